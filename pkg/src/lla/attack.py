"""Key-recovery attacks against locked models and the robustness metrics.

Gradient derivation (everything after the protected FFN is fixed)::

    V   = U @ G~                 U: rotated activations reaching the fabric
    h   = h_in + V @ W_down~
    h'  = downstream blocks(h);  logits = h' @ W_unembed

Backward, with ``d*`` meaning d(loss)/d(*):

    JSD loss, p = softmax(logits), q = oracle, m = (p+q)/2:
        dp_k = 0.5 * log(p_k / m_k)
    cross-entropy on target y:          dlogits = p - onehot(y)
    softmax:        dlogits = p * (dp - sum(p * dp))
    unembed:        dh' = dlogits @ W_unembed^T
    block (h1 = h + h @ M; h2 = h1 + f(h1)):
        standard f = act(h1 Wu) Wd:  da = (dh2 Wd^T) * act'(h1 Wu)
                                      dh1 = dh2 + da Wu^T
        gated f = (act(h1 Wg) * h1 Wu) Wd:
                  dz = dh2 Wd^T; dg = dz * (h1 Wu) * act'(h1 Wg); du = dz * act(h1 Wg)
                  dh1 = dh2 + dg Wg^T + du Wu^T
        dh = dh1 + dh1 @ M^T
    protected FFN:  dV = dh @ W_down~^T;  dG~ = U^T @ dV (diagonal group blocks)
    column softmax G~[:, j] = softmax(L[:, j]):
        dL[:, j] = G~[:, j] * (dG~[:, j] - sum_i G~[i, j] dG~[i, j])

The negation baseline replaces the sign flip of each protected
pre-activation by ``tanh(theta_j)``; with ``a`` the stored pre-activation,
``dtheta_j = sum_t dpre[t, j] * a[t, j] * (1 - tanh(theta_j)^2)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fabric, linalg
from .errors import DivergenceError, InputError
from .locker import HpnnFfn, LockedModel, locked_intermediate
from .model import ToyModel, check_tokens, log_softmax, model_logits, perplexity, run_blocks, softmax
from .rng import SplitMix64, derive_seed

_EPS = 1e-300


# --------------------------------------------------------------------- metrics

def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError(f"{name} is not a probability distribution")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InputError(f"{name} does not sum to 1")
    return p


def _kl_to_mid(p, mid):
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe / np.where(mid > 0, mid, 1.0)), 0.0).sum(axis=-1)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (natural log); rows are averaged for 2-D input."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    if p.shape != q.shape:
        raise InputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    mid = 0.5 * (p + q)
    d = 0.5 * _kl_to_mid(p, mid) + 0.5 * _kl_to_mid(q, mid)
    return float(np.mean(np.maximum(d, 0.0)))


def jsd_logits(a, b) -> float:
    return jsd(softmax(a), softmax(b))


def fidelity(candidate, truth) -> float:
    c = np.asarray(candidate).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if c.size != t.size:
        raise InputError(f"length mismatch: {c.size} vs {t.size}")
    if c.size == 0:
        return 1.0
    return float(np.mean(c == t))


def random_fidelity_baseline(m: int) -> float:
    """Expected fidelity of a uniform random group-local guess: 1/m."""
    return 1.0 / m


def source_map(perm) -> np.ndarray:
    """For each output lane, the input lane the fabric routes there."""
    perm = np.asarray(perm, dtype=np.int64)
    src = np.empty_like(perm)
    src[perm] = np.arange(perm.size)
    return src


# ---------------------------------------------------------------------- oracle

class Oracle:
    """Query access to the unlocked model's output logits."""

    def __init__(self, model: ToyModel):
        self._model = model
        self.queries = 0

    def query(self, tokens) -> np.ndarray:
        self.queries += 1
        return model_logits(self._model, tokens)


class TranscriptOracle:
    """Oracle answering from recorded ``(tokens, logits)`` pairs."""

    def __init__(self, transcript):
        self._table = {tuple(int(t) for t in toks): np.asarray(logits, dtype=np.float32) for toks, logits in transcript}
        self.queries = 0

    def query(self, tokens) -> np.ndarray:
        key = tuple(int(t) for t in tokens)
        if key not in self._table:
            raise InputError("sequence not present in the recorded transcript")
        self.queries += 1
        return self._table[key]


# ------------------------------------------------------------- configuration

@dataclass
class AttackConfig:
    mode: str = "gradient"
    guidance: str = "OG"
    iterations: int = 2000
    time_limit_s: float = 7200.0
    seed: int = 0
    probes: Optional[list] = None
    corpus: Optional[list] = None
    eval_corpus: Optional[list] = None
    population: int = 64
    tournament: int = 4
    mutation_rate: float = 0.5
    crossover_rate: float = 0.9
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 0.01
    log_every: int = 0

    def validate(self) -> None:
        if self.mode not in ("genetic", "gradient"):
            raise InputError(f"unknown attack mode {self.mode!r}")
        if self.guidance not in ("OG", "OL"):
            raise InputError(f"unknown guidance {self.guidance!r}")
        if self.iterations < 0 or self.time_limit_s <= 0:
            raise InputError("attack budget must be positive")
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if self.population < 2 or not 1 <= self.tournament <= self.population:
            raise InputError("population must be >= 2 and tournament size within it")


@dataclass
class AttackResult:
    mode: str
    guidance: str
    recovered: list
    fidelity: float
    jsd_before: float
    jsd_after: float
    perplexity_after: Optional[float]
    iterations: int
    evaluations: int
    elapsed_s: float
    random_baseline: float
    recovered_repaired: Optional[list] = None
    fidelity_repaired: Optional[float] = None
    jsd_after_repaired: Optional[float] = None
    history: list = field(default_factory=list)

    def to_json(self, include_timing: bool = True) -> dict:
        out = dict(self.__dict__)
        if not include_timing:
            out.pop("elapsed_s")
        return out


# --------------------------------------------------------- differentiable core

def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z / (1.0 + np.exp(-z))


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class _Tail:
    """Blocks after the protected one plus the unembedding, in float64."""

    def __init__(self, model: ToyModel, first: int):
        self.blocks = []
        for blk in model.blocks[first:]:
            f = blk.ffn
            self.blocks.append((
                blk.mix.astype(np.float64), f.kind, f.activation, f.w_up.astype(np.float64),
                None if f.w_gate is None else f.w_gate.astype(np.float64), f.w_down.astype(np.float64),
            ))
        self.unembed = model.unembed.astype(np.float64)

    def forward(self, h):
        cache = []
        for mix, kind, act, wu, wg, wd in self.blocks:
            h1 = h + h @ mix
            if kind == "standard":
                a = h1 @ wu
                z = _act(a, act)
                cache.append((a, None, None))
            else:
                g = h1 @ wg
                u = h1 @ wu
                z = _act(g, act) * u
                cache.append((g, u, None))
            h = h1 + z @ wd
        return h @ self.unembed, cache

    def backward(self, dlogits, cache):
        dh = dlogits @ self.unembed.T
        for (mix, kind, act, wu, wg, wd), (a, u, _) in zip(reversed(self.blocks), reversed(cache)):
            dz = dh @ wd.T
            if kind == "standard":
                dh1 = dh + (dz * _act_grad(a, act)) @ wu.T
            else:
                dg = dz * u * _act_grad(a, act)
                du = dz * _act(a, act)
                dh1 = dh + dg @ wg.T + du @ wu.T
            dh = dh1 + dh1 @ mix.T
        return dh


def _loss_and_dlogits(logits, target, guidance):
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = logits.shape[0]
    if guidance == "OG":
        q = target
        mid = 0.5 * (p + q)
        logmid = np.log(np.maximum(mid, _EPS))
        kl_p = (p * (logp - logmid)).sum(axis=1)
        kl_q = np.where(q > 0, q * (np.log(np.maximum(q, _EPS)) - logmid), 0.0).sum(axis=1)
        loss = float(np.mean(0.5 * kl_p + 0.5 * kl_q))
        dp = 0.5 * (logp - logmid) / rows
        dlogits = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    else:
        loss = float(-np.mean(logp[np.arange(rows), target]))
        dlogits = p.copy()
        dlogits[np.arange(rows), target] -= 1.0
        dlogits /= rows
    return loss, dlogits


def _attack_inputs(oracle, cfg: AttackConfig, vocab: int):
    """Token positions and targets the attack fits."""
    if cfg.guidance == "OG":
        if oracle is None:
            raise InputError("an oracle-guided attack needs an oracle")
        if not cfg.probes:
            raise InputError("an oracle-guided attack needs a non-empty probe set")
        toks = [check_tokens(p, vocab) for p in cfg.probes]
        toks = [t for t in toks if t.size]
        if not toks:
            raise InputError("an oracle-guided attack needs a non-empty probe set")
        target = softmax(np.concatenate([oracle.query(t) for t in toks]).astype(np.float64))
        return np.concatenate(toks), target
    if not cfg.corpus:
        raise InputError("an oracle-less attack needs a corpus")
    inputs, targets = [], []
    for seq in cfg.corpus:
        t = check_tokens(seq, vocab)
        if t.size >= 2:
            inputs.append(t[:-1])
            targets.append(t[1:])
    if not inputs:
        raise InputError("corpus has no next-token positions")
    return np.concatenate(inputs), np.concatenate(targets)


class KeySurface:
    """Loss of a locked model as a function of the fabric setting."""

    def __init__(self, locked: LockedModel, tokens, target, guidance: str):
        self.locked = locked
        self.guidance = guidance
        self.target = target
        lf = locked.locked
        self.n, self.m = lf.n, lf.m
        model = locked.model
        b = locked.protected_block
        h = run_blocks(model, model.embed[np.asarray(tokens)], 0, b)
        blk = model.blocks[b]
        h = h + (h.astype(np.float64) @ blk.mix.astype(np.float64)).astype(np.float32)
        self.h_in = h.astype(np.float64)
        self.u = locked_intermediate(lf, h).astype(np.float64)
        self.w_down = lf.w_down.astype(np.float64)
        self.tail = _Tail(model, b + 1)
        self.base = self.h_in + self.u[:, self.n:] @ self.w_down[self.n:]
        self.w_head = self.w_down[:self.n]

    def _finish(self, head):
        logits, cache = self.tail.forward(self.base + head @ self.w_head)
        return logits, cache

    def loss_perm(self, perm) -> float:
        v = fabric.apply_grouped(self.u[:, :self.n], perm)
        logits, _ = self._finish(v)
        return _loss_and_dlogits(logits, self.target, self.guidance)[0]

    def loss_sources(self, src) -> float:
        logits, _ = self._finish(self.u[:, :self.n][:, np.asarray(src)])
        return _loss_and_dlogits(logits, self.target, self.guidance)[0]

    def relaxed(self, logit_blocks):
        """Loss and d(loss)/d(L) for per-group logit matrices ``L`` (groups x m x m)."""
        g_soft = _column_softmax(logit_blocks)
        groups = self.n // self.m
        u = self.u[:, :self.n].reshape(-1, groups, self.m)
        v = np.einsum("tgi,gij->tgj", u, g_soft).reshape(-1, self.n)
        logits, cache = self._finish(v)
        loss, dlogits = _loss_and_dlogits(logits, self.target, self.guidance)
        dh = self.tail.backward(dlogits, cache)
        dv = (dh @ self.w_head.T).reshape(-1, groups, self.m)
        dg = np.einsum("tgi,tgj->gij", u, dv)
        dl = g_soft * (dg - (g_soft * dg).sum(axis=1, keepdims=True))
        return loss, dl


def _column_softmax(logit_blocks):
    z = logit_blocks - logit_blocks.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class HpnnSurface:
    """Loss of a negation-locked model as a function of relaxed key signs."""

    def __init__(self, model: ToyModel, block: int, hpnn: HpnnFfn, tokens, target, guidance: str):
        self.guidance = guidance
        self.target = target
        self.idx = np.asarray(hpnn.neurons)
        h = run_blocks(model, model.embed[np.asarray(tokens)], 0, block)
        blk = model.blocks[block]
        h = h + (h.astype(np.float64) @ blk.mix.astype(np.float64)).astype(np.float32)
        self.h_in = h.astype(np.float64)
        f = hpnn.base
        self.kind, self.act = f.kind, f.activation
        w_pre = f.w_up if f.kind == "standard" else f.w_gate
        self.pre = self.h_in @ w_pre.astype(np.float64)
        self.up = None if f.kind == "standard" else self.h_in @ f.w_up.astype(np.float64)
        self.w_down = f.w_down.astype(np.float64)
        self.tail = _Tail(model, block + 1)

    def loss_signs(self, signs):
        pre = self.pre.copy()
        pre[:, self.idx] *= signs
        z = _act(pre, self.act) if self.up is None else _act(pre, self.act) * self.up
        logits, cache = self.tail.forward(self.h_in + z @ self.w_down)
        return pre, logits, cache

    def relaxed(self, theta):
        s = np.tanh(theta)
        pre, logits, cache = self.loss_signs(s)
        loss, dlogits = _loss_and_dlogits(logits, self.target, self.guidance)
        dh = self.tail.backward(dlogits, cache)
        dz = dh @ self.w_down.T
        dpre = dz * _act_grad(pre, self.act) if self.up is None else dz * self.up * _act_grad(pre, self.act)
        ds = (dpre[:, self.idx] * self.pre[:, self.idx]).sum(axis=0)
        return loss, ds * (1.0 - s * s)

    def loss_bits(self, bits) -> float:
        signs = np.where(np.asarray(bits).astype(bool), -1.0, 1.0)
        _, logits, _ = self.loss_signs(signs)
        return _loss_and_dlogits(logits, self.target, self.guidance)[0]


class Adam:
    def __init__(self, shape, lr=0.03, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ------------------------------------------------------------------ evaluation

def _eval_tokens(vocab: int) -> np.ndarray:
    # the model is token-local, so every token once covers its whole behaviour
    return np.arange(vocab)


def _post_metrics(locked: LockedModel, oracle_logits, mapper, eval_corpus):
    """JSD against the unlocked logits and optional perplexity for a fabric map."""
    override = {locked.protected_block: mapper}
    logits = model_logits(locked.model, _eval_tokens(locked.model.vocab), override)
    j = jsd_logits(logits, oracle_logits)
    ppl = perplexity(locked.model, eval_corpus, override) if eval_corpus else None
    return j, ppl


def _source_runner(locked: LockedModel, src):
    lf = locked.locked
    src = np.asarray(src)

    def run(h):
        z = locked_intermediate(lf, h)
        z[:, :lf.n] = z[:, :lf.n][:, src]
        return linalg.matmul(z, lf.w_down)

    return run


def _truth_sources(truth_perm) -> np.ndarray:
    return source_map(truth_perm)


# --------------------------------------------------------------------- attacks

def gradient_attack(locked: LockedModel, oracle, cfg: AttackConfig, truth_perm=None, reference_logits=None,
                    init_logits=None) -> AttackResult:
    """Relax each group's permutation matrix by a column softmax and fit it with Adam.

    ``truth_perm`` and ``reference_logits`` are only used for reporting.
    """
    cfg.validate()
    start = time.perf_counter()
    tokens, target = _attack_inputs(oracle, cfg, locked.model.vocab)
    surf = KeySurface(locked, tokens, target, cfg.guidance)
    n, m = surf.n, surf.m
    groups = n // m
    if init_logits is None:
        rng = SplitMix64(derive_seed(cfg.seed, 1))
        logits = rng.normal(groups * m * m).reshape(groups, m, m) * cfg.init_scale
    else:
        logits = np.array(init_logits, dtype=np.float64).reshape(groups, m, m)
    initial = _literal_sources(logits)
    opt = Adam(logits.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    it = 0
    while it < cfg.iterations and time.perf_counter() - start < cfg.time_limit_s:
        loss, grad = surf.relaxed(logits)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at iteration {it}", {"iteration": it, "loss": loss, "logits": logits.tolist()})
        logits = opt.step(logits, grad)
        it += 1
        if cfg.log_every and it % cfg.log_every == 0:
            history.append((it, loss))
    literal = _literal_sources(logits)
    repaired = _repaired_sources(logits)
    return _finish_perm_result(locked, "gradient", cfg, literal, repaired, initial, truth_perm, reference_logits,
                               oracle, it, 3 * it, start, history)


def _literal_sources(logit_blocks) -> np.ndarray:
    groups, m, _ = logit_blocks.shape
    src = np.argmax(logit_blocks, axis=1)  # per column: row with the largest entry
    return (src + (np.arange(groups) * m)[:, None]).reshape(-1)


def _repaired_sources(logit_blocks) -> np.ndarray:
    """Greedy assignment: largest entries first, each row and column used once."""
    g_soft = _column_softmax(logit_blocks)
    groups, m, _ = g_soft.shape
    out = np.empty(groups * m, dtype=np.int64)
    for g in range(groups):
        block = g_soft[g]
        order = np.lexsort((np.arange(m * m), -block.reshape(-1)))
        used_r, used_c = set(), set()
        for flat in order:
            i, j = divmod(int(flat), m)
            if i in used_r or j in used_c:
                continue
            used_r.add(i)
            used_c.add(j)
            out[g * m + j] = g * m + i
    return out


def _reference(locked, oracle, reference_logits):
    if reference_logits is not None:
        return reference_logits
    if oracle is None:
        raise InputError("post-attack JSD needs an oracle or reference logits")
    return oracle.query(_eval_tokens(locked.model.vocab))


def _finish_perm_result(locked, mode, cfg, literal, repaired, initial, truth_perm, reference_logits, oracle,
                        iterations, evaluations, start, history):
    ref = _reference(locked, oracle, reference_logits)
    j_before, _ = _post_metrics(locked, ref, _source_runner(locked, initial), None)
    j_after, ppl = _post_metrics(locked, ref, _source_runner(locked, literal), cfg.eval_corpus)
    fid = fid_rep = float("nan")
    if truth_perm is not None:
        truth = _truth_sources(truth_perm)
        fid = fidelity(literal, truth)
        fid_rep = fidelity(repaired, truth) if repaired is not None else None
    j_rep = None
    if repaired is not None:
        j_rep, _ = _post_metrics(locked, ref, _source_runner(locked, repaired), None)
    return AttackResult(
        mode=mode, guidance=cfg.guidance, recovered=[int(v) for v in literal], fidelity=fid,
        jsd_before=j_before, jsd_after=j_after, perplexity_after=ppl, iterations=iterations,
        evaluations=evaluations, elapsed_s=time.perf_counter() - start,
        random_baseline=random_fidelity_baseline(locked.locked.m),
        recovered_repaired=None if repaired is None else [int(v) for v in repaired],
        fidelity_repaired=fid_rep, jsd_after_repaired=j_rep, history=history,
    )


def _tournament(rng: SplitMix64, fitness, size):
    best = None
    for _ in range(size):
        i = rng.randbelow(len(fitness))
        if best is None or fitness[i] < fitness[best] or (fitness[i] == fitness[best] and i < best):
            best = i
    return best


def genetic_attack(locked: LockedModel, oracle, cfg: AttackConfig, truth_perm=None, reference_logits=None,
                   initial_population=None) -> AttackResult:
    """Evolve group-local permutations; fitness is the attack loss (lower is better).

    Operators: tournament selection, whole-group uniform crossover, and one
    random within-group transposition per child at ``mutation_rate``.  The
    best individual is carried over unchanged.  ``cfg.iterations`` counts
    generations.
    """
    cfg.validate()
    start = time.perf_counter()
    tokens, target = _attack_inputs(oracle, cfg, locked.model.vocab)
    surf = KeySurface(locked, tokens, target, cfg.guidance)
    n, m = surf.n, surf.m
    groups = n // m
    pop = [np.asarray(p, dtype=np.int64) for p in (initial_population or [])][: cfg.population]
    for p in pop:
        fabric.check_grouped(p, m)
    k = 0
    while len(pop) < cfg.population:
        pop.append(fabric.random_group_perm(n, m, derive_seed(cfg.seed, 2, k)))
        k += 1
    cache = {}
    evaluations = 0

    def score(p):
        nonlocal evaluations
        key = p.tobytes()
        if key not in cache:
            cache[key] = surf.loss_perm(p)
            evaluations += 1
        return cache[key]

    fit = [score(p) for p in pop]
    initial = source_map(pop[int(np.argmax(fit))])
    history = []
    gen = 0
    while gen < cfg.iterations and time.perf_counter() - start < cfg.time_limit_s:
        best = int(np.argmin(fit))
        nxt = [pop[best].copy()]
        for idx in range(1, cfg.population):
            rng = SplitMix64(derive_seed(cfg.seed, 3, gen, idx))
            a = pop[_tournament(rng, fit, cfg.tournament)]
            b = pop[_tournament(rng, fit, cfg.tournament)]
            child = a.copy()
            if rng.uniform(1)[0] < cfg.crossover_rate:
                take = rng.next_u64_array(groups) >> np.uint64(63)
                for g in np.flatnonzero(take):
                    child[g * m:(g + 1) * m] = b[g * m:(g + 1) * m]
            if rng.uniform(1)[0] < cfg.mutation_rate:
                g = rng.randbelow(groups)
                i = rng.randbelow(m)
                j = (i + 1 + rng.randbelow(m - 1)) % m
                child[g * m + i], child[g * m + j] = child[g * m + j], child[g * m + i]
            nxt.append(child)
        pop = nxt
        fit = [score(p) for p in pop]
        gen += 1
        if cfg.log_every and gen % cfg.log_every == 0:
            history.append((gen, float(min(fit))))
    best = pop[int(np.argmin(fit))]
    literal = source_map(best)
    return _finish_perm_result(locked, "genetic", cfg, literal, None, initial, truth_perm, reference_logits,
                               oracle, gen, evaluations, start, history)


def hpnn_gradient_attack(model: ToyModel, block: int, hpnn: HpnnFfn, oracle, cfg: AttackConfig, truth_bits=None,
                         reference_logits=None, init_theta=None) -> AttackResult:
    """Relax every negation key bit with ``tanh`` and fit with Adam; negative -> bit 1."""
    cfg.validate()
    start = time.perf_counter()
    tokens, target = _attack_inputs(oracle, cfg, model.vocab)
    surf = HpnnSurface(model, block, hpnn, tokens, target, cfg.guidance)
    k = len(hpnn.neurons)
    if init_theta is None:
        theta = SplitMix64(derive_seed(cfg.seed, 4)).normal(k) * cfg.init_scale
    else:
        theta = np.array(init_theta, dtype=np.float64).reshape(k)
    initial = (theta < 0).astype(np.uint8)
    opt = Adam(theta.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    it = 0
    history = []
    while it < cfg.iterations and time.perf_counter() - start < cfg.time_limit_s:
        loss, grad = surf.relaxed(theta)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at iteration {it}", {"iteration": it, "loss": loss, "theta": theta.tolist()})
        theta = opt.step(theta, grad)
        it += 1
        if cfg.log_every and it % cfg.log_every == 0:
            history.append((it, loss))
    bits = (theta < 0).astype(np.uint8)
    ref = reference_logits if reference_logits is not None else oracle.query(_eval_tokens(model.vocab))

    def metrics(b, corpus):
        override = {block: lambda h: hpnn.run(b, h)}
        j = jsd_logits(model_logits(model, _eval_tokens(model.vocab), override), ref)
        ppl = perplexity(model, corpus, override) if corpus else None
        return j, ppl

    j_before, _ = metrics(initial, None)
    j_after, ppl = metrics(bits, cfg.eval_corpus)
    fid = fidelity(bits, truth_bits) if truth_bits is not None else float("nan")
    return AttackResult(
        mode="hpnn-gradient", guidance=cfg.guidance, recovered=[int(b) for b in bits], fidelity=fid,
        jsd_before=j_before, jsd_after=j_after, perplexity_after=ppl, iterations=it, evaluations=3 * it,
        elapsed_s=time.perf_counter() - start, random_baseline=0.5, history=history,
    )
