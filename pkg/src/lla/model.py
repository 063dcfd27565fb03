"""Toy decoder substrate: FFN blocks, a residual block stack and planted outliers.

Attention is replaced by a fixed per-token linear mixing stub, so a model
maps each token independently to a row of logits.  That keeps every
forward pass cheap while preserving the residual stream through which
feature outliers propagate.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .errors import ConstructionError, InputError, ShapeError
from .rng import SplitMix64, derive_seed

ACTIVATIONS = ("relu", "silu")
FFN_KINDS = ("standard", "gated")


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0).astype(z.dtype, copy=False)
    if kind == "silu":
        z64 = z.astype(np.float64)
        return (z64 / (1.0 + np.exp(-z64))).astype(z.dtype, copy=False)
    raise InputError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class FfnBlock:
    kind: str
    w_up: np.ndarray
    w_down: np.ndarray
    w_gate: Optional[np.ndarray] = None
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in FFN_KINDS:
            raise InputError(f"unknown FFN kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        up, down = self.w_up, self.w_down
        if up.ndim != 2 or down.ndim != 2 or up.shape != down.shape[::-1]:
            raise ShapeError(f"W_up {up.shape} and W_down {down.shape} are inconsistent")
        if (self.kind == "gated") != (self.w_gate is not None):
            raise ShapeError("a gated FFN needs W_gate and a standard one must not have it")
        if self.w_gate is not None and self.w_gate.shape != up.shape:
            raise ShapeError(f"W_gate {self.w_gate.shape} must match W_up {up.shape}")

    @property
    def d_model(self) -> int:
        return self.w_up.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_up.shape[1]


def ffn_intermediate(block: FfnBlock, x) -> np.ndarray:
    """Values entering the down projection (post-activation, post-gating)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != block.d_model:
        raise ShapeError(f"input {x.shape} does not match D_m={block.d_model}")
    up = linalg.matmul(x, block.w_up)
    if block.kind == "standard":
        return activate(up, block.activation)
    gate = activate(linalg.matmul(x, block.w_gate), block.activation)
    return gate * up


def ffn_forward(block: FfnBlock, x) -> np.ndarray:
    return linalg.matmul(ffn_intermediate(block, x), block.w_down)


@dataclass(frozen=True)
class Block:
    mix: np.ndarray
    ffn: FfnBlock


@dataclass(frozen=True)
class ToyModel:
    embed: np.ndarray
    blocks: tuple
    unembed: np.ndarray

    def __post_init__(self):
        d_m = self.embed.shape[1]
        if self.unembed.shape != (d_m, self.embed.shape[0]):
            raise ShapeError(f"unembed {self.unembed.shape} must be (D_m, V) = {(d_m, self.embed.shape[0])}")
        for i, b in enumerate(self.blocks):
            if b.mix.shape != (d_m, d_m) or b.ffn.d_model != d_m:
                raise ShapeError(f"block {i} does not match D_m={d_m}")

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def d_model(self) -> int:
        return self.embed.shape[1]

    def replace_ffn(self, index: int, ffn: FfnBlock) -> "ToyModel":
        blocks = list(self.blocks)
        blocks[index] = Block(blocks[index].mix, ffn)
        return ToyModel(self.embed, tuple(blocks), self.unembed)


@dataclass
class HiddenCapture:
    y: np.ndarray
    u_bar: np.ndarray
    block_input: np.ndarray = field(repr=False, default=None)


def check_tokens(tokens, vocab: int) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise InputError(f"token ids must lie in [0, {vocab})")
    return t


def embed_tokens(model: ToyModel, tokens) -> np.ndarray:
    return model.embed[check_tokens(tokens, model.vocab)]


def run_blocks(model: ToyModel, h: np.ndarray, start: int, stop: Optional[int] = None, ffn_override=None, captures=None):
    """Advance the residual stream through blocks ``start..stop-1``.

    ``ffn_override`` maps a block index to a callable used instead of
    :func:`ffn_forward` (the locked FFN runner plugs in here).
    """
    stop = len(model.blocks) if stop is None else stop
    for i in range(start, stop):
        blk = model.blocks[i]
        h = h + linalg.matmul(h, blk.mix)
        if ffn_override and i in ffn_override:
            y = ffn_override[i](h)
        else:
            y = ffn_forward(blk.ffn, h)
        if captures is not None:
            u = ffn_intermediate(blk.ffn, h)
            captures.append(HiddenCapture(y=y, u_bar=np.abs(u.astype(np.float64)).mean(axis=0), block_input=h))
        h = h + y
    return h


def model_forward(model: ToyModel, tokens, ffn_override=None):
    """Return ``(logits, captures)`` for one token sequence."""
    h = embed_tokens(model, tokens)
    captures = []
    h = run_blocks(model, h, 0, ffn_override=ffn_override, captures=captures)
    return linalg.matmul(h, model.unembed), captures


def model_logits(model: ToyModel, tokens, ffn_override=None) -> np.ndarray:
    h = run_blocks(model, embed_tokens(model, tokens), 0, ffn_override=ffn_override)
    return linalg.matmul(h, model.unembed)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def sequence_nll(logits, tokens) -> np.ndarray:
    """Negative log-likelihood of each next token given per-position logits."""
    t = np.asarray(tokens, dtype=np.int64)
    lp = log_softmax(np.asarray(logits)[:-1])
    return -lp[np.arange(t.size - 1), t[1:]]


def perplexity(model: ToyModel, corpus: Sequence[Sequence[int]], ffn_override=None) -> float:
    if not corpus:
        raise InputError("perplexity needs a non-empty corpus")
    losses = []
    for seq in corpus:
        if len(seq) < 2:
            raise InputError("every corpus sequence needs at least two tokens")
        losses.append(sequence_nll(model_logits(model, seq, ffn_override), seq))
    mean_nll = float(np.concatenate(losses).mean())
    return math.exp(mean_nll) if mean_nll < 709 else math.inf  # float64 exp overflows past ~709


def random_probes(vocab: int, seed: int, count: int = 8, length: int = 64) -> list:
    rng = SplitMix64(seed)
    return [rng.integers(vocab, length).tolist() for _ in range(count)]


def sample_corpus(model: ToyModel, seed: int, count: int = 16, length: int = 64) -> list:
    """Token streams sampled from the model's own next-token distribution.

    The model is token-local, so it is a Markov chain over the vocabulary;
    the transition table is computed once.
    """
    table = softmax(model_logits(model, np.arange(model.vocab)))
    cdf = np.cumsum(table, axis=1)
    rng = SplitMix64(seed)
    out = []
    for _ in range(count):
        cur = rng.randbelow(model.vocab)
        seq = [cur]
        for u in rng.uniform(length - 1):
            cur = int(min(np.searchsorted(cdf[cur], u, side="right"), model.vocab - 1))
            seq.append(cur)
        out.append(seq)
    return out


def feature_means(model: ToyModel, probes) -> list:
    """Per-block mean |Y| per feature and mean |u| per neuron over all probe tokens."""
    tokens = np.concatenate([np.asarray(p, dtype=np.int64) for p in probes]) if probes else np.zeros(0, np.int64)
    _, caps = model_forward(model, tokens)
    return [(np.abs(c.y.astype(np.float64)).mean(axis=0), c.u_bar) for c in caps]


@dataclass(frozen=True)
class SynthConfig:
    vocab: int = 64
    d_model: int = 32
    d_ff: int = 256
    n_blocks: int = 3
    outlier_dims: tuple = (7, 13)
    outlier_block: int = 1
    outlier_gain: float = 50.0
    hot_neurons: int = 4
    act_gain: float = 50.0
    kind: str = "standard"
    activation: str = "relu"
    tau: float = 5.0
    logit_std: float = 2.5


def _gauss(rng: SplitMix64, shape, std: float) -> np.ndarray:
    return (rng.normal(int(np.prod(shape))).reshape(shape) * std).astype(np.float32)


def _draw(cfg: SynthConfig, seed: int, gain: float) -> ToyModel:
    d_m, d_ff = cfg.d_model, cfg.d_ff
    out = np.asarray(cfg.outlier_dims, dtype=np.int64)
    planted = gain != 1.0 and out.size > 0
    embed = _gauss(SplitMix64(derive_seed(seed, 0)), (cfg.vocab, d_m), 1.0)
    blocks = []
    for b in range(cfg.n_blocks):
        rng = SplitMix64(derive_seed(seed, 1, b))
        mix = _gauss(rng, (d_m, d_m), 0.5 / np.sqrt(d_m))
        w_up = _gauss(rng, (d_m, d_ff), 1.0 / np.sqrt(d_m))
        w_gate = _gauss(rng, (d_m, d_ff), 1.0 / np.sqrt(d_m)) if cfg.kind == "gated" else None
        w_down = _gauss(rng, (d_ff, d_m), 1.0 / np.sqrt(d_ff))
        if planted and b >= cfg.outlier_block:
            hot = rng.permutation(d_ff)[: cfg.hot_neurons]
            signs = rng.signs(out.size).astype(np.float32)
            rows = np.ix_(hot, out)
            w_down[rows] = signs[None, :] * (gain / np.sqrt(d_ff))
            # hot neurons fire act_gain times harder; their down rows shrink to match
            w_up[:, hot] *= cfg.act_gain
            w_down[hot, :] /= cfg.act_gain
        if planted and b > cfg.outlier_block:
            # downstream readers see the outlier dims at unit scale
            mix[out, :] /= gain
            w_up[out, :] /= gain
            if w_gate is not None:
                w_gate[out, :] /= gain
        ffn = FfnBlock(cfg.kind, w_up, w_down, w_gate, cfg.activation)
        blocks.append(Block(mix, ffn))
    unembed = _gauss(SplitMix64(derive_seed(seed, 2)), (d_m, cfg.vocab), 1.0 / np.sqrt(d_m))
    if planted and cfg.outlier_block < cfg.n_blocks:
        unembed[out, :] /= gain
    model = ToyModel(embed, tuple(blocks), unembed)
    logits = model_logits(model, np.arange(cfg.vocab)).astype(np.float64)
    scale = cfg.logit_std / max(float(logits.std()), 1e-12)
    return ToyModel(embed, tuple(blocks), (unembed * scale).astype(np.float32))


def outlier_set(y_bar: np.ndarray, tau: float) -> set:
    return set(np.flatnonzero(y_bar > tau * y_bar.mean()).tolist())


def synth_model(cfg: SynthConfig, seed: int, max_rescale: int = 4, margin: float = 1.25) -> ToyModel:
    """Random toy model with feature outliers planted from ``outlier_block`` on.

    In every block at or after ``outlier_block`` the down-projection
    entries linking a few "hot" neurons to ``outlier_dims`` are set to
    ``outlier_gain`` times the typical entry scale, with one sign per
    outlier feature.  The planting is verified with the outlier criterion
    at ``cfg.tau`` on random probes; if it fails the gain is doubled, up to
    ``max_rescale`` times.  Every selected feature must clear the threshold
    by ``margin`` and every other feature stay below it by the same factor.
    """
    if cfg.n_blocks < 1:
        raise ConstructionError("a model needs at least one block")
    if cfg.kind not in FFN_KINDS or cfg.activation not in ACTIVATIONS:
        raise ConstructionError(f"unsupported FFN kind/activation {cfg.kind}/{cfg.activation}")
    if not 0 <= cfg.outlier_block < cfg.n_blocks:
        raise ConstructionError(f"outlier_block {cfg.outlier_block} outside [0, {cfg.n_blocks})")
    if any(not 0 <= d < cfg.d_model for d in cfg.outlier_dims) or len(set(cfg.outlier_dims)) != len(cfg.outlier_dims):
        raise ConstructionError(f"outlier_dims must be distinct indices in [0, {cfg.d_model})")
    if cfg.outlier_gain < 1.0:
        raise ConstructionError(f"outlier_gain {cfg.outlier_gain} < 1 cannot plant outliers")
    if not 0 < cfg.hot_neurons <= cfg.d_ff:
        raise ConstructionError("hot_neurons must lie in [1, D_ff]")

    gain = float(cfg.outlier_gain)
    if gain == 1.0 or not cfg.outlier_dims:
        return _draw(cfg, seed, 1.0)
    want = set(cfg.outlier_dims)
    probes = random_probes(cfg.vocab, derive_seed(seed, 3))
    diag = []
    for _ in range(max_rescale + 1):
        model = _draw(cfg, seed, gain)
        stats = feature_means(model, probes)
        found = [outlier_set(y, cfg.tau) for y, _ in stats]
        # margin keeps the selection stable on probe sets other than this one
        strict = [outlier_set(y, cfg.tau * margin) for y, _ in stats]
        loose = [outlier_set(y, cfg.tau / margin) for y, _ in stats]
        ok = all(
            found[b] == strict[b] == loose[b] == (want if b >= cfg.outlier_block else set())
            for b in range(cfg.n_blocks)
        )
        if ok:
            return model
        diag.append((gain, found))
        gain *= 2.0
    detail = "; ".join(f"gain={g:g}: per-block outliers {f}" for g, f in diag)
    raise ConstructionError(f"could not plant outliers {sorted(want)} at tau={cfg.tau}: {detail}")
