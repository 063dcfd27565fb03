"""Feature-outlier detection and protected-neuron selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, SelectionError
from .model import FfnBlock, ToyModel, model_forward

DEFAULT_TAU = 5.0


@dataclass
class OutlierReport:
    block_index: int
    feature_means: np.ndarray
    mean: float
    tau: float
    outliers: list

    def to_json(self) -> dict:
        return {
            "block_index": self.block_index,
            "feature_means": [float(v) for v in self.feature_means],
            "mean": self.mean,
            "tau": self.tau,
            "outliers": list(self.outliers),
        }


@dataclass
class NeuronScores:
    block_index: int
    scores: np.ndarray
    selected: list

    def to_json(self) -> dict:
        return {
            "block_index": self.block_index,
            "scores": [float(v) for v in self.scores],
            "selected": list(self.selected),
        }


def outliers_from_means(y_bar, tau: float) -> list:
    """Indices whose mean magnitude exceeds ``tau`` times the mean over features."""
    y_bar = np.asarray(y_bar, dtype=np.float64)
    return np.flatnonzero(y_bar > tau * y_bar.mean()).tolist()


def _flatten(probes) -> np.ndarray:
    if probes is None or len(probes) == 0 or sum(len(p) for p in probes) == 0:
        raise InputError("outlier detection needs at least one probe token")
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in probes])


def block_statistics(model: ToyModel, probes) -> list:
    """``(y_bar, u_bar)`` for every block, pooled over all probe tokens."""
    _, caps = model_forward(model, _flatten(probes))
    return [(np.abs(c.y.astype(np.float64)).mean(axis=0), c.u_bar) for c in caps]


def find_feature_outliers(model: ToyModel, block: int, probes, tau: float = DEFAULT_TAU) -> OutlierReport:
    if tau <= 1:
        raise InputError(f"tau must exceed 1, got {tau}")
    if not 0 <= block < len(model.blocks):
        raise InputError(f"block {block} outside [0, {len(model.blocks)})")
    y_bar, _ = block_statistics(model, probes)[block]
    return OutlierReport(block, y_bar, float(y_bar.mean()), tau, outliers_from_means(y_bar, tau))


def score_neurons(block: FfnBlock, o_f, u_bar, n: int, block_index: int = -1) -> NeuronScores:
    """Score each neuron by its down-projection weight mass on the outlier
    features times its mean activation magnitude, and keep the top ``n``.

    Ties go to the lower index.
    """
    o_f = sorted(set(int(i) for i in o_f))
    if not o_f:
        raise InputError("the outlier set is empty; lower tau")
    u_bar = np.asarray(u_bar, dtype=np.float64)
    if u_bar.shape != (block.d_ff,):
        raise InputError(f"u_bar has length {u_bar.size}, expected D_ff={block.d_ff}")
    if not 0 < n <= block.d_ff:
        raise InputError(f"cannot select {n} of {block.d_ff} neurons")
    weight = np.abs(block.w_down[:, o_f].astype(np.float64)).sum(axis=1)
    scores = weight * u_bar
    selected = np.lexsort((np.arange(scores.size), -scores))[:n]
    return NeuronScores(block_index, scores, selected.tolist())


def select_protected_block(model: ToyModel, probes, tau: float = DEFAULT_TAU) -> int:
    """First block whose FFN output shows at least one feature outlier."""
    if not model.blocks:
        raise SelectionError("model has no blocks")
    for b, (y_bar, _) in enumerate(block_statistics(model, probes)):
        if outliers_from_means(y_bar, tau):
            return b
    raise SelectionError(f"no block shows feature outliers at tau={tau}; lower tau")


def report_json(report: OutlierReport, scores: NeuronScores) -> dict:
    return {"outliers": report.to_json(), "neurons": scores.to_json()}
