"""On-disk formats: LLAT tensors, model directories and token-id text files.

LLAT layout (little-endian): ``b"LLAT"``, u32 version (1), u32 ndims,
``ndims`` x u64 dims, then row-major float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .locker import LockedFfn, LockedModel
from .model import Block, FfnBlock, ToyModel

TENSOR_MAGIC = b"LLAT"
TENSOR_VERSION = 1
MAX_ELEMENTS = 1 << 32


def save_tensor(m, path) -> None:
    arr = np.ascontiguousarray(np.asarray(m, dtype="<f4"))
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, not an LLAT tensor")
    version, ndims = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported LLAT version {version}")
    if ndims > 8:
        raise FormatError(f"{path}: implausible rank {ndims}")
    end = 12 + 8 * ndims
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndims}Q", raw, 12)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError(f"{path}: dimensions {dims} overflow the element limit")
    if len(raw) - end != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} payload bytes, found {len(raw) - end}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(dims)


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_model(model: ToyModel, directory, lock: dict | None = None) -> None:
    """Write a model directory: ``manifest.json`` plus one LLAT file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = []
    save_tensor(model.embed, d / "embed.llat")
    save_tensor(model.unembed, d / "unembed.llat")
    for i, blk in enumerate(model.blocks):
        entry = {"kind": blk.ffn.kind, "activation": blk.ffn.activation}
        for role, arr in (("mix", blk.mix), ("w_up", blk.ffn.w_up), ("w_gate", blk.ffn.w_gate), ("w_down", blk.ffn.w_down)):
            if arr is None:
                continue
            name = f"block{i}.{role}.llat"
            save_tensor(arr, d / name)
            entry[role] = name
        blocks.append(entry)
    manifest = {
        "format": "lla-model",
        "version": 1,
        "vocab": model.vocab,
        "d_model": model.d_model,
        "embed": "embed.llat",
        "unembed": "unembed.llat",
        "blocks": blocks,
    }
    if lock is not None:
        manifest["lock"] = lock
    _write_json(manifest, d / "manifest.json")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if manifest.get("format") != "lla-model":
        raise FormatError(f"{path}: not an lla-model manifest")
    return manifest


def load_model(directory) -> ToyModel:
    d = Path(directory)
    man = read_manifest(d)
    try:
        blocks = []
        for entry in man["blocks"]:
            gate = load_tensor(d / entry["w_gate"]) if "w_gate" in entry else None
            ffn = FfnBlock(entry["kind"], load_tensor(d / entry["w_up"]), load_tensor(d / entry["w_down"]), gate, entry["activation"])
            blocks.append(Block(load_tensor(d / entry["mix"]), ffn))
        return ToyModel(load_tensor(d / man["embed"]), tuple(blocks), load_tensor(d / man["unembed"]))
    except KeyError as exc:
        raise FormatError(f"{d}: manifest missing {exc}") from None


def save_locked_model(locked: LockedModel, directory) -> None:
    lf = locked.locked
    lock = {
        "protected_block": locked.protected_block,
        "n": lf.n,
        "m": lf.m,
        "hadamard_seed": str(lf.hadamard_seed),
        "rotate": lf.rotate,
    }
    save_model(locked.model, directory, lock)


def is_locked(directory) -> bool:
    return "lock" in read_manifest(directory)


def load_locked_model(directory) -> LockedModel:
    man = read_manifest(directory)
    if "lock" not in man:
        raise FormatError(f"{directory}: not a locked model")
    lock = man["lock"]
    model = load_model(directory)
    blk = model.blocks[lock["protected_block"]].ffn
    lf = LockedFfn(blk.kind, blk.w_up, blk.w_down, blk.w_gate, blk.activation,
                   int(lock["n"]), int(lock["m"]), int(lock["hadamard_seed"]), bool(lock.get("rotate", True)))
    return LockedModel(model, int(lock["protected_block"]), lf)


def read_tokens(path) -> list:
    """One sequence per line, space-separated decimal ids; blank lines skipped."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                seqs.append([int(tok) for tok in line.split()])
            except ValueError:
                raise InputError(f"{path}:{lineno}: token ids must be decimal integers") from None
    return seqs


def write_tokens(seqs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


def write_json(obj, path) -> None:
    _write_json(obj, path)


