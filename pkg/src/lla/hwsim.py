"""Cycle-level systolic-array simulator with an output-lane locking module.

Logical timing model: one MAC per PE per cycle, one hop per cycle between
neighbouring PEs, combinational Benes fabric.

Weight-stationary (WS): a ``k x w`` weight tile sits in the PEs.  Input
row ``t`` enters PE row ``r`` at local cycle ``t + r`` and moves right one
PE per cycle; partial sums move down.  Output ``(t, c)`` leaves the bottom
of column ``c`` at local cycle ``t + k - 1 + c``, so lane ``c`` lags lane 0
by ``c`` cycles.  For a 4x4 array with T=2::

    cycle  0    1    2    3    4    5    6    7    8
    lane0  .    .    .    t0   t1
    lane1  .    .    .    .    t0   t1
    lane2  .    .    .    .    .    t0   t1
    lane3  .    .    .    .    .    .    t0   t1

The trigger logic delays lane ``c`` by ``(m-1) - (c mod m)`` cycles so the
``m`` lanes of a fabric group reach the fabric together.  A tile takes
``T + k + w - 2`` cycles; weights for the next tile are preloaded into
shadow registers, so only the first tile pays its ``k`` preload cycles.

Output-stationary (OS): PE ``(i, j)`` accumulates ``C[i, j]``; ``A[i, k]``
enters row ``i`` at cycle ``k + i`` and ``B[k, j]`` enters column ``j`` at
cycle ``k + j``.  A tile computes for ``K + h + w - 2`` cycles, then the
accumulators shift down one row per cycle onto the output lanes (bottom
row first), every lane of a row in the same cycle, so no trigger delay is
needed.  Draining overlaps the next tile's compute (double-buffered
accumulators); only the last drain of ``h`` cycles adds to the total.

Reduction is split into accumulation rounds.  Each round's partial output
passes through the output lanes (and through the fabric while the key
matrix is computed) and is added into the output buffer, so the same key
is applied to every round.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fabric, linalg
from .errors import ConfigError, ShapeError, SimulatorBugError
from .locker import LockedFfn, key_permutation
from .model import activate

DATAFLOWS = ("weight_stationary", "output_stationary")


@dataclass(frozen=True)
class SystolicConfig:
    rows: int = 4
    cols: int = 4
    dataflow: str = "weight_stationary"
    group_size: int = 4
    rounds: int = 1

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("array dimensions must be positive")
        if self.dataflow not in DATAFLOWS:
            raise ConfigError(f"unknown dataflow {self.dataflow!r}")
        if self.group_size < 1 or self.cols % self.group_size:
            raise ConfigError(f"fabric group size {self.group_size} must divide the array width {self.cols}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")


@dataclass
class Phase:
    name: str
    start: int
    end: int
    key: bool


@dataclass
class SimTrace:
    events: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    cycles: int = 0
    macs: int = 0

    def log(self, cycle: int, unit: str, event: str, value="") -> None:
        self.events.append((cycle, unit, event, value))

    @property
    def fabric_activations(self) -> int:
        return sum(1 for e in self.events if e[2] == "apply")

    def fabric_events_in(self, phase: Phase) -> list:
        return [e for e in self.events if e[2] == "apply" and phase.start <= e[0] < phase.end]

    def to_text(self) -> str:
        return "".join(f"{c} {u} {e} {v}\n" for c, u, e, v in self.events)

    def summary(self) -> dict:
        return {
            "cycles": self.cycles,
            "macs": self.macs,
            "fabric_activations": self.fabric_activations,
            "outputs": sum(1 for e in self.events if e[2] == "out"),
            "phases": [{"name": p.name, "start": p.start, "end": p.end, "key": p.key} for p in self.phases],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def trigger_schedule(cfg: SystolicConfig) -> np.ndarray:
    """Per-lane delay (cycles) that aligns each fabric group at its input."""
    cfg.validate()
    if cfg.dataflow == "output_stationary":
        return np.zeros(cfg.cols, dtype=np.int64)
    m = cfg.group_size
    return (m - 1) - (np.arange(cfg.cols) % m)


def _chunks(total: int, count: int, limit: int | None) -> list:
    size = math.ceil(total / count) if total else 0
    if limit is not None:
        size = min(size, limit)
    size = max(size, 1)
    return [(s, min(s + size, total)) for s in range(0, total, size)]


class _Fabric:
    """Output lanes -> trigger delays -> per-group Benes fabric."""

    def __init__(self, cfg: SystolicConfig, trace: SimTrace, key_bits=None, m: int = 1):
        self.cfg = cfg
        self.trace = trace
        self.delays = trigger_schedule(cfg)
        self.key_bits = key_bits
        self.m = m
        self.pending = {}

    def lane(self, cycle: int, row: int, col0: int, lane: int, value: float, out: np.ndarray, seen: np.ndarray):
        self.trace.log(cycle, f"lane{lane}", "out", f"{value:.9g}")
        if self.key_bits is None:
            out[row, col0 + lane] += value
            seen[row, col0 + lane] += 1
            return
        arrive = cycle + int(self.delays[lane])
        g = (col0 + lane) // self.m
        slot = self.pending.setdefault((row, g), {})
        slot[(col0 + lane) % self.m] = (arrive, value)
        if len(slot) == self.m:
            del self.pending[(row, g)]
            times = {a for a, _ in slot.values()}
            if len(times) != 1:
                raise SimulatorBugError(f"group {g}, row {row}: lanes reach the fabric in cycles {sorted(times)}")
            t_arr = times.pop()
            bits = self.key_bits[g]
            vals = fabric.benes_eval(bits, [slot[i][1] for i in range(self.m)])
            routing = "identity" if not np.any(bits) else "".join(str(int(b)) for b in bits)
            self.trace.log(t_arr, f"fabric{g}", "apply", routing)
            for i, v in enumerate(vals):
                out[row, g * self.m + i] += v
                seen[row, g * self.m + i] += 1

    def flush(self):
        if self.pending:
            raise SimulatorBugError(f"incomplete fabric groups: {sorted(self.pending)}")


def _ws_tile(a: np.ndarray, w: np.ndarray, base: int, col0: int, lanes: _Fabric, out, seen, trace: SimTrace) -> int:
    t_rows = a.shape[0]
    k, width = w.shape
    act = np.zeros((k, width), dtype=np.float32)
    vact = np.zeros((k, width), dtype=bool)
    psum = np.zeros((k, width), dtype=np.float32)
    length = t_rows + k + width - 2
    rr = np.arange(k)
    for tau in range(length):
        act[:, 1:] = act[:, :-1]
        vact[:, 1:] = vact[:, :-1]
        t_in = tau - rr
        ok = (t_in >= 0) & (t_in < t_rows)
        act[:, 0] = np.where(ok, a[np.clip(t_in, 0, t_rows - 1), rr], 0)
        vact[:, 0] = ok
        prod = act * w
        new = np.empty_like(psum)
        new[0] = prod[0]
        new[1:] = psum[:-1] + prod[1:]
        psum = new
        busy = int(vact.sum())
        if busy:
            trace.macs += busy
            trace.log(base + tau, "array", "mac", busy)
        for c in np.flatnonzero(vact[k - 1]):
            t = tau - (k - 1) - c
            lanes.lane(base + tau, t, col0, int(c), float(psum[k - 1, c]), out, seen)
    return length


def _os_tile(a: np.ndarray, b: np.ndarray, base: int, row0: int, col0: int, lanes: _Fabric, out, seen, trace: SimTrace) -> int:
    h, k = a.shape
    width = b.shape[1]
    ar = np.zeros((h, width), dtype=np.float32)
    br = np.zeros((h, width), dtype=np.float32)
    va = np.zeros((h, width), dtype=bool)
    acc = np.zeros((h, width), dtype=np.float32)
    length = k + h + width - 2
    ii = np.arange(h)
    jj = np.arange(width)
    for tau in range(length):
        ar[:, 1:] = ar[:, :-1]
        va[:, 1:] = va[:, :-1]
        br[1:, :] = br[:-1, :]
        ka = tau - ii
        oka = (ka >= 0) & (ka < k)
        ar[:, 0] = np.where(oka, a[ii, np.clip(ka, 0, k - 1)], 0)
        va[:, 0] = oka
        kb = tau - jj
        okb = (kb >= 0) & (kb < k)
        br[0, :] = np.where(okb, b[np.clip(kb, 0, k - 1), jj], 0)
        acc += np.where(va, ar * br, 0).astype(np.float32)
        busy = int(va.sum())
        if busy:
            trace.macs += busy
            trace.log(base + tau, "array", "mac", busy)
    for d in range(h):
        i = h - 1 - d
        for c in range(width):
            lanes.lane(base + length + d, row0 + i, col0, c, float(acc[i, c]), out, seen)
    return length


def _simulate(a, b, cfg: SystolicConfig, trace: SimTrace, start: int, name: str, key_bits=None, m: int = 1):
    """Tile ``a @ b`` onto the array from global cycle ``start``.

    Returns ``(c, end_cycle)``.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    t_rows, red = a.shape
    n_out = b.shape[1]
    out = np.zeros((t_rows, n_out), dtype=np.float32)
    lanes = _Fabric(cfg, trace, key_bits, m)
    if key_bits is not None:
        trace.log(start, "trigger", "activate", name)
    clock = start
    tail = 0
    if cfg.dataflow == "weight_stationary":
        chunks = _chunks(red, cfg.rounds, cfg.rows)
        if chunks:
            clock += chunks[0][1] - chunks[0][0]  # first weight preload
        for c0 in range(0, n_out, cfg.cols):
            c1 = min(c0 + cfg.cols, n_out)
            for k0, k1 in chunks:
                seen = np.zeros((t_rows, n_out), dtype=np.int64)
                clock += _ws_tile(a[:, k0:k1], b[k0:k1, c0:c1], clock, c0, lanes, out, seen, trace)
                _check_once(seen, slice(None), slice(c0, c1))
    else:
        chunks = _chunks(red, cfg.rounds, None)
        for r0 in range(0, t_rows, cfg.rows):
            r1 = min(r0 + cfg.rows, t_rows)
            for c0 in range(0, n_out, cfg.cols):
                c1 = min(c0 + cfg.cols, n_out)
                for k0, k1 in chunks:
                    seen = np.zeros((t_rows, n_out), dtype=np.int64)
                    clock += _os_tile(a[r0:r1, k0:k1], b[k0:k1, c0:c1], clock, r0, c0, lanes, out, seen, trace)
                    _check_once(seen, slice(r0, r1), slice(c0, c1))
                    tail = r1 - r0
        clock += tail
    lanes.flush()
    if key_bits is not None:
        trace.log(clock, "trigger", "deactivate", name)
    trace.phases.append(Phase(name, start, clock, key_bits is not None))
    return out, clock


def _check_once(seen, rows, cols):
    block = seen[rows, cols]
    if block.size and not np.all(block == 1):
        raise SimulatorBugError("an output element was produced more or less than once in a round")
    rest = seen.copy()
    rest[rows, cols] = 0
    if np.any(rest):
        raise SimulatorBugError("a round wrote outside its output tile")


def expected_cycles(t_rows: int, red: int, n_out: int, cfg: SystolicConfig) -> int:
    """Closed-form latency of :func:`systolic_matmul` for one product."""
    cfg.validate()
    widths = [min(cfg.cols, n_out - c) for c in range(0, n_out, cfg.cols)]
    if cfg.dataflow == "weight_stationary":
        ks = [k1 - k0 for k0, k1 in _chunks(red, cfg.rounds, cfg.rows)]
        return (ks[0] if ks else 0) + sum(t_rows + k + w - 2 for w in widths for k in ks)
    ks = [k1 - k0 for k0, k1 in _chunks(red, cfg.rounds, None)]
    heights = [min(cfg.rows, t_rows - r) for r in range(0, t_rows, cfg.rows)]
    return sum(k + h + w - 2 for h in heights for w in widths for k in ks) + (heights[-1] if heights and ks and widths else 0)


def systolic_matmul(a, b, cfg: SystolicConfig):
    """Multiply on the array with the locking module idle."""
    cfg.validate()
    trace = SimTrace()
    c, end = _simulate(a, b, cfg, trace, 0, "matmul")
    trace.cycles = end
    return c, trace


def locked_layer_sim(locked: LockedFfn, key_bits, x, cfg: SystolicConfig):
    """Run a locked FFN on the simulated accelerator.

    Phases: ``x @ W_up~`` (and ``x @ W_gate~``) with activation at drain,
    then the rotation block as an ordinary matrix whose output lanes pass
    through the key-triggered fabric, then ``@ W_down~``.
    """
    cfg.validate()
    if locked.m != cfg.group_size:
        raise ConfigError(f"model group size {locked.m} differs from the fabric group size {cfg.group_size}")
    perm = key_permutation(locked, key_bits)
    key = fabric.key_material(perm, locked.m)
    groups = [key.group_bits(g) for g in range(locked.n // locked.m)]
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != locked.w_up.shape[0]:
        raise ShapeError(f"input {x.shape} does not match D_m={locked.w_up.shape[0]}")
    trace = SimTrace()
    up, clock = _simulate(x, locked.w_up, cfg, trace, 0, "up")
    if locked.kind == "gated":
        gate, clock = _simulate(x, locked.w_gate, cfg, trace, clock, "gate")
        z = activate(gate, locked.activation) * up
    else:
        z = activate(up, locked.activation)
    n = locked.n
    rot = linalg.randomized_hadamard(n, locked.hadamard_seed) if locked.rotate else linalg.identity(n)
    head, clock = _simulate(z[:, :n], rot, cfg, trace, clock, "key", key_bits=groups, m=locked.m)
    z = np.concatenate([head, z[:, n:]], axis=1)
    y, clock = _simulate(z, locked.w_down, cfg, trace, clock, "down")
    trace.cycles = clock
    return y, trace
