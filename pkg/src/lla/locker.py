"""Orthogonal obfuscation, weight folding and locked execution.

A protected FFN runs as::

    z = act(x @ W_up~)            (gated: act(x @ W_gate~) * (x @ W_up~))
    z[:, :n] = z[:, :n] @ H       H = H_n diag(signs) / sqrt(n), via FWHT
    z[:, :n] = fabric(z[:, :n])   per group of m lanes, key-controlled
    y = z @ W_down~

with ``W_up~ = W_up P`` (and ``W_gate~ = W_gate P``) and
``W_down~ = K^T R^T P^T W_down``.  With the correct key the fabric is ``K``
and every orthogonal factor cancels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import fabric, linalg
from .errors import InputError, ShapeError
from .fabric import GroupedKey
from .model import FfnBlock, ToyModel, activate, ffn_intermediate, model_logits, random_probes
from .outlier import DEFAULT_TAU, find_feature_outliers, score_neurons, select_protected_block
from .rng import derive_seed


@dataclass(frozen=True)
class LockSpec:
    protected_block: int
    protected_neurons: tuple
    group_size: int
    hadamard_seed: int
    key_perm: np.ndarray = field(repr=False)
    tau: float = DEFAULT_TAU
    rotate: bool = True  # False only for the no-rotation ablation

    @property
    def n(self) -> int:
        return len(self.protected_neurons)

    def validate(self, d_ff: int) -> None:
        n = self.n
        if len(set(self.protected_neurons)) != n:
            raise InputError("protected neurons must be distinct")
        if any(not 0 <= j < d_ff for j in self.protected_neurons):
            raise InputError(f"protected neuron index outside [0, {d_ff})")
        if not linalg.is_power_of_two(n):
            raise InputError(f"number of protected neurons {n} must be a power of two")
        fabric.check_grouped(self.key_perm, self.group_size)
        if len(self.key_perm) != n:
            raise InputError("key permutation length must equal the number of protected neurons")


@dataclass(frozen=True)
class OrthogonalSet:
    p_order: np.ndarray
    r: np.ndarray
    k_perm: np.ndarray

    def p_matrix(self) -> np.ndarray:
        return linalg.permutation_matrix(self.p_order)

    def k_matrix(self) -> np.ndarray:
        d = self.k_perm.size
        k = np.zeros((d, d), dtype=np.float32)
        k[np.arange(d), self.k_perm] = 1.0
        return k


def protected_order(neurons, d_ff: int) -> np.ndarray:
    """Column order after the swaps bringing protected neuron j to slot j."""
    order = np.arange(d_ff)
    where = np.arange(d_ff)
    for j, p in enumerate(neurons):
        a, b = j, where[p]
        order[a], order[b] = order[b], order[a]
        where[order[a]], where[order[b]] = a, b
    return order


def rotation_block(spec: LockSpec) -> np.ndarray:
    if not spec.rotate:
        return linalg.identity(spec.n)
    return linalg.randomized_hadamard(spec.n, spec.hadamard_seed)


def build_orthogonal_set(spec: LockSpec, d_ff: int) -> OrthogonalSet:
    spec.validate(d_ff)
    n = spec.n
    r = linalg.identity(d_ff)
    r[:n, :n] = rotation_block(spec)
    k_perm = np.arange(d_ff)
    k_perm[:n] = np.asarray(spec.key_perm, dtype=np.int64)
    return OrthogonalSet(protected_order(spec.protected_neurons, d_ff), r, k_perm)


@dataclass(frozen=True)
class LockedFfn:
    kind: str
    w_up: np.ndarray
    w_down: np.ndarray
    w_gate: Optional[np.ndarray]
    activation: str
    n: int
    m: int
    hadamard_seed: int
    rotate: bool = True

    def as_block(self) -> FfnBlock:
        """The folded weights as a plain FFN (what a keyless device executes)."""
        return FfnBlock(self.kind, self.w_up, self.w_down, self.w_gate, self.activation)

    @property
    def key_bits(self) -> int:
        return (self.n // self.m) * fabric.n_bits(self.m)


def fold_weights(ffn: FfnBlock, ortho: OrthogonalSet, n: int, m: int, hadamard_seed: int, rotate: bool = True) -> LockedFfn:
    d_ff = ffn.d_ff
    if ortho.p_order.size != d_ff or ortho.r.shape != (d_ff, d_ff) or ortho.k_perm.size != d_ff:
        raise ShapeError("orthogonal set does not match the FFN width")
    order = ortho.p_order
    w_up = ffn.w_up[:, order].copy()
    w_gate = ffn.w_gate[:, order].copy() if ffn.w_gate is not None else None
    down = ffn.w_down[order].astype(np.float64)
    down = ortho.r.astype(np.float64).T @ down
    folded = np.empty_like(down)
    folded[ortho.k_perm] = down
    return LockedFfn(ffn.kind, w_up, folded.astype(np.float32), w_gate, ffn.activation, n, m, hadamard_seed, rotate)


def rotate_front(z: np.ndarray, n: int, seed: int, path: str = "fwht") -> np.ndarray:
    """Right-multiply the first ``n`` columns of ``z`` by the randomized Hadamard block."""
    out = z.copy()
    if n == 0:
        return out
    if path == "fwht":
        signs = linalg.hadamard_signs(n, seed).astype(np.float64)
        head = linalg.fwht_apply(z[:, :n].astype(np.float64) * signs).astype(np.float64)
        out[:, :n] = (head / math.sqrt(n)).astype(np.float32)
    elif path == "dense":
        out[:, :n] = linalg.matmul(z[:, :n], linalg.randomized_hadamard(n, seed))
    else:
        raise InputError(f"unknown rotation path {path!r}")
    return out


def key_permutation(locked: LockedFfn, key) -> np.ndarray:
    if isinstance(key, GroupedKey):
        if (key.n, key.m) != (locked.n, locked.m):
            raise InputError(f"key geometry (n={key.n}, m={key.m}) does not match the model (n={locked.n}, m={locked.m})")
        return key.perm
    return fabric.key_from_bits(key, locked.n, locked.m).perm


def locked_intermediate(locked: LockedFfn, x, r_path: str = "fwht") -> np.ndarray:
    """``act(x @ W_up~) @ R``: the values that reach the fabric."""
    z = ffn_intermediate(locked.as_block(), x)
    if locked.rotate:
        z = rotate_front(z, locked.n, locked.hadamard_seed, r_path)
    return z


def run_locked_ffn(locked: LockedFfn, key, x, r_path: str = "fwht") -> np.ndarray:
    """Locked forward pass with key bits (or a :class:`GroupedKey`)."""
    return run_with_perm(locked, key_permutation(locked, key), x, r_path)


def run_with_perm(locked: LockedFfn, perm, x, r_path: str = "fwht") -> np.ndarray:
    """Locked forward pass with the fabric set to an explicit permutation."""
    z = locked_intermediate(locked, x, r_path)
    z[:, :locked.n] = fabric.apply_grouped(z[:, :locked.n], perm)
    return linalg.matmul(z, locked.w_down)


@dataclass(frozen=True)
class LockedModel:
    model: ToyModel
    protected_block: int
    locked: LockedFfn

    def ffn_override(self, key, r_path: str = "fwht") -> dict:
        perm = key_permutation(self.locked, key)
        return {self.protected_block: lambda h: run_with_perm(self.locked, perm, h, r_path)}

    def logits(self, tokens, key, r_path: str = "fwht") -> np.ndarray:
        return model_logits(self.model, tokens, self.ffn_override(key, r_path))

    def zero_key(self) -> np.ndarray:
        return np.zeros(self.locked.key_bits, dtype=np.uint8)


def make_locked_model(model: ToyModel, spec: LockSpec) -> LockedModel:
    ffn = model.blocks[spec.protected_block].ffn
    ortho = build_orthogonal_set(spec, ffn.d_ff)
    locked = fold_weights(ffn, ortho, spec.n, spec.group_size, spec.hadamard_seed, spec.rotate)
    return LockedModel(model.replace_ffn(spec.protected_block, locked.as_block()), spec.protected_block, locked)


@dataclass
class LockOutcome:
    locked: LockedModel
    key: GroupedKey
    spec: LockSpec
    outlier_report: object
    neuron_scores: object


def lock_model(model: ToyModel, n: int, m: int = 16, seed: int = 0, tau: float = DEFAULT_TAU,
               probes=None, block: Optional[int] = None, rotate: bool = True) -> LockOutcome:
    """Select the protected block and neurons, draw a key, and fold the weights.

    Seeds for the probes, the Hadamard signs and the key permutation are
    all derived from ``seed``.
    """
    if probes is None:
        probes = random_probes(model.vocab, derive_seed(seed, 12))
    if block is None:
        block = select_protected_block(model, probes, tau)
    report = find_feature_outliers(model, block, probes, tau)
    if not report.outliers:
        warnings.warn(f"block {block} shows no feature outliers at tau={tau}; a wrong key may barely degrade the model")
        raise InputError(f"block {block} has no feature outliers at tau={tau}; lower tau")
    u_bar = _block_u_bar(model, block, probes)
    scores = score_neurons(model.blocks[block].ffn, report.outliers, u_bar, n, block)
    perm = fabric.random_group_perm(n, m, derive_seed(seed, 11))
    spec = LockSpec(block, tuple(scores.selected), m, derive_seed(seed, 10), perm, tau, rotate)
    key = fabric.key_material(perm, m)
    return LockOutcome(make_locked_model(model, spec), key, spec, report, scores)


def _block_u_bar(model, block, probes):
    from .outlier import block_statistics

    return block_statistics(model, probes)[block][1]


@dataclass(frozen=True)
class HpnnFfn:
    """Negation-locked FFN: stored pre-activations of ``neurons`` are negated
    where the embedded key bit is 1; a supplied bit of 1 negates again."""

    base: FfnBlock
    neurons: tuple

    def run(self, key_bits, x) -> np.ndarray:
        bits = np.asarray(key_bits).reshape(-1)
        if bits.size != len(self.neurons):
            raise InputError(f"HPNN key needs {len(self.neurons)} bits, got {bits.size}")
        signs = np.where(bits.astype(bool), -1.0, 1.0).astype(np.float32)
        return hpnn_forward(self, signs, x)


def hpnn_forward(h: HpnnFfn, multipliers, x) -> np.ndarray:
    """Run with a real-valued multiplier per protected pre-activation."""
    blk = h.base
    x = np.asarray(x, dtype=np.float32)
    idx = list(h.neurons)
    if blk.kind == "standard":
        pre = linalg.matmul(x, blk.w_up)
        pre[:, idx] = pre[:, idx] * multipliers
        z = activate(pre, blk.activation)
    else:
        pre = linalg.matmul(x, blk.w_gate)
        pre[:, idx] = pre[:, idx] * multipliers
        z = activate(pre, blk.activation) * linalg.matmul(x, blk.w_up)
    return linalg.matmul(z, blk.w_down)


def hpnn_lock(ffn: FfnBlock, neurons, key) -> HpnnFfn:
    neurons = tuple(int(j) for j in neurons)
    key = np.asarray(key, dtype=np.uint8).reshape(-1)
    if key.size != len(neurons):
        raise InputError(f"{len(neurons)} neurons but {key.size} key bits")
    if len(set(neurons)) != len(neurons) or any(not 0 <= j < ffn.d_ff for j in neurons):
        raise InputError("HPNN neurons must be distinct indices into the FFN width")
    flip = np.ones(ffn.d_ff, dtype=np.float32)
    flip[list(neurons)] = np.where(key.astype(bool), -1.0, 1.0)
    if ffn.kind == "standard":
        base = replace(ffn, w_up=ffn.w_up * flip[None, :])
    else:
        base = replace(ffn, w_gate=ffn.w_gate * flip[None, :])
    return HpnnFfn(base, neurons)


@dataclass
class FlopReport:
    d_model: int
    d_ff: int
    ffn_kind: str
    n: int
    m: int
    r_path: str
    key_bits: int
    base_flops: int
    rotation_flops: int
    fabric_flops: int
    ratio: float
    warning: Optional[str] = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def flop_overhead_report(d_model: int, d_ff: int, ffn_kind: str, n: int, m: int = 16, r_path: str = "fwht") -> FlopReport:
    """Per-token FLOPs of the FFN versus the rotation added by locking.

    The fabric only routes values, so it costs no FLOPs.
    """
    matrices = {"standard": 2, "gated": 3}.get(ffn_kind)
    if matrices is None:
        raise InputError(f"unknown FFN kind {ffn_kind!r}")
    base = 2 * d_model * d_ff * matrices
    if n == 0:
        rot = 0
    elif r_path == "fwht":
        rot = n * int(math.log2(n)) + n
    elif r_path == "dense":
        rot = 2 * n * n
    else:
        raise InputError(f"unknown rotation path {r_path!r}")
    key_bits = (n // m) * fabric.n_bits(m) if n else 0
    ratio = rot / base
    warning = None
    if r_path == "dense" and ratio >= 1e-3:
        warning = "dense rotation exceeds 0.1% overhead; only the FWHT path stays below it"
    return FlopReport(d_model, d_ff, ffn_kind, n, m, r_path, key_bits, base, rot, 0, ratio, warning)
