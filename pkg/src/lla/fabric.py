"""Key-controlled Benes permutation fabric.

Topology for ``m`` lanes (``m`` a power of two), built recursively::

    lanes 2k, 2k+1 --[in switch k]--+-- upper half-network, port k --+--[out switch k]-- lanes 2k, 2k+1
                                    +-- lower half-network, port k --+

A switch with control bit 0 passes (top -> upper, bottom -> lower on the
way in; upper -> lane 2k, lower -> lane 2k+1 on the way out) and swaps
when the bit is 1.  The network has ``2*log2(m) - 1`` stages of ``m/2``
switches.  Stage 0 is the input column, the last stage is the output
column, and each inner stage ``s`` holds stage ``s-1`` of the upper
half-network followed by stage ``s-1`` of the lower one.  Control bits
are flattened stage-major, then by switch index.

Permutation convention: a permutation ``pi`` moves lane ``i`` to output
position ``pi[i]``, i.e. ``out[pi[i]] = in[i]``.  This is the row-vector
product ``x @ G`` with ``G[i, pi[i]] = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .linalg import is_power_of_two
from .rng import SplitMix64

KEY_MAGIC = b"LLAK"
KEY_VERSION = 1


def n_stages(m: int) -> int:
    return 2 * int(math.log2(m)) - 1


def n_bits(m: int) -> int:
    return n_stages(m) * (m // 2)


def bits_per_lane(m: int) -> float:
    return n_stages(m) / 2


def _check_m(m: int):
    if m < 2 or not is_power_of_two(m):
        raise InputError(f"fabric size {m} must be a power of two >= 2")


def _check_perm(pi, m=None) -> list:
    pi = [int(v) for v in pi]
    size = len(pi) if m is None else m
    if len(pi) != size or sorted(pi) != list(range(size)):
        raise InputError(f"{pi} is not a permutation of {size} elements")
    return pi


def _route(pi: list) -> list:
    """Per-stage switch settings (list of lists) realising ``pi``."""
    m = len(pi)
    if m == 2:
        return [[pi[0]]]
    half = m // 2
    inv = [0] * m
    for i, p in enumerate(pi):
        inv[p] = i
    side = [-1] * m  # 0 -> upper half-network, 1 -> lower
    for start in range(0, m, 2):
        if side[start] != -1:
            continue
        # loop from the lowest-numbered unrouted input, which goes upper
        i = start
        while side[i] == -1:
            side[i] = 0
            partner_out = pi[i] ^ 1
            j = inv[partner_out]
            side[j] = 1
            i = j ^ 1
    upper = [0] * half
    lower = [0] * half
    for i in range(m):
        if side[i] == 0:
            upper[i // 2] = pi[i] // 2
        else:
            lower[i // 2] = pi[i] // 2
    first = [side[2 * k] for k in range(half)]
    last = [int(side[inv[2 * k]] == 1) for k in range(half)]
    up_stages = _route(upper)
    lo_stages = _route(lower)
    inner = [u + lo for u, lo in zip(up_stages, lo_stages)]
    return [first] + inner + [last]


def benes_route(pi) -> np.ndarray:
    """Control bits (uint8, stage-major) that make the fabric apply ``pi``."""
    pi = _check_perm(pi)
    _check_m(len(pi))
    return np.array([b for stage in _route(pi) for b in stage], dtype=np.uint8)


def _eval(stages: list, lanes: list) -> list:
    m = len(lanes)
    if m == 2:
        return [lanes[1], lanes[0]] if stages[0][0] else list(lanes)
    half = m // 2
    first, last = stages[0], stages[-1]
    upper, lower = [None] * half, [None] * half
    for k in range(half):
        a, b = lanes[2 * k], lanes[2 * k + 1]
        if first[k]:
            a, b = b, a
        upper[k], lower[k] = a, b
    q = half // 2
    up = _eval([s[:q] for s in stages[1:-1]], upper)
    lo = _eval([s[q:] for s in stages[1:-1]], lower)
    out = [None] * m
    for k in range(half):
        a, b = up[k], lo[k]
        if last[k]:
            a, b = b, a
        out[2 * k], out[2 * k + 1] = a, b
    return out


def _split(bits, m: int) -> list:
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size != n_bits(m):
        raise InputError(f"fabric of {m} lanes needs {n_bits(m)} control bits, got {bits.size}")
    return bits.reshape(n_stages(m), m // 2).tolist()


def benes_eval(bits, lanes) -> list:
    """Pass ``lanes`` (any values) through the fabric configured by ``bits``."""
    lanes = list(lanes)
    _check_m(len(lanes))
    return _eval(_split(bits, len(lanes)), lanes)


def bits_to_perm(bits, m: int) -> np.ndarray:
    """The permutation ``pi`` realised by ``bits`` (``out[pi[i]] = in[i]``)."""
    _check_m(m)
    out = _eval(_split(bits, m), list(range(m)))
    pi = np.empty(m, dtype=np.int64)
    pi[np.asarray(out)] = np.arange(m)
    return pi


@dataclass(frozen=True)
class GroupedKey:
    n: int
    m: int
    bits: np.ndarray
    perm: np.ndarray

    @property
    def total_bits(self) -> int:
        return int(self.bits.size)

    @property
    def bits_per_neuron(self) -> float:
        return self.total_bits / self.n if self.n else 0.0

    def group_bits(self, g: int) -> np.ndarray:
        w = n_bits(self.m)
        return self.bits[g * w:(g + 1) * w]


def check_grouped(pi, m: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64).reshape(-1)
    _check_m(m)
    n = pi.size
    if n % m:
        raise InputError(f"key length {n} is not divisible by the group size {m}")
    _check_perm(pi.tolist())
    for g in range(n // m):
        block = pi[g * m:(g + 1) * m]
        if block.min() < g * m or block.max() >= (g + 1) * m:
            raise InputError(f"permutation crosses the boundary of group {g}")
    return pi


def key_material(pi, m: int) -> GroupedKey:
    pi = check_grouped(pi, m)
    n = pi.size
    chunks = [benes_route(pi[g * m:(g + 1) * m] - g * m) for g in range(n // m)]
    bits = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    return GroupedKey(n=n, m=m, bits=bits, perm=pi)


def key_from_bits(bits, n: int, m: int) -> GroupedKey:
    _check_m(m)
    if n % m:
        raise InputError(f"key length {n} is not divisible by the group size {m}")
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    w = n_bits(m)
    if bits.size != (n // m) * w:
        raise InputError(f"(n={n}, m={m}) needs {(n // m) * w} key bits, got {bits.size}")
    perm = np.concatenate([bits_to_perm(bits[g * w:(g + 1) * w], m) + g * m for g in range(n // m)]) if n else np.zeros(0, np.int64)
    return GroupedKey(n=n, m=m, bits=bits, perm=perm)


def random_group_perm(n: int, m: int, seed: int) -> np.ndarray:
    """Uniform group-local permutation, Fisher-Yates per group."""
    _check_m(m)
    if n % m:
        raise InputError(f"key length {n} is not divisible by the group size {m}")
    rng = SplitMix64(seed)
    return np.concatenate([rng.permutation(m) + g * m for g in range(n // m)]) if n else np.zeros(0, np.int64)


def apply_grouped(x: np.ndarray, perm) -> np.ndarray:
    """Row-vector product ``x @ G`` on the last axis: ``out[..., pi[i]] = x[..., i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    out = np.empty_like(x)
    out[..., perm] = x
    return out


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def save_key(key: GroupedKey, path) -> None:
    header = KEY_MAGIC + np.array([KEY_VERSION, key.n, key.m], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + pack_bits(key.bits))


def load_key(path) -> GroupedKey:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != KEY_MAGIC:
        raise FormatError(f"{path}: not an LLAK key file")
    version, n, m = np.frombuffer(raw[4:16], dtype="<u4").tolist()
    if version != KEY_VERSION:
        raise FormatError(f"{path}: unsupported key version {version}")
    if m < 2 or not is_power_of_two(m) or n % m:
        raise FormatError(f"{path}: invalid geometry n={n}, m={m}")
    total = (n // m) * n_bits(m)
    payload = raw[16:]
    if len(payload) != (total + 7) // 8:
        raise FormatError(f"{path}: expected {(total + 7) // 8} key bytes, found {len(payload)}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:total]
    return key_from_bits(bits, n, m)
