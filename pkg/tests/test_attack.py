import math

import numpy as np
import pytest
from scipy.spatial.distance import jensenshannon

from lla import fabric
from lla.attack import (AttackConfig, HpnnSurface, KeySurface, Oracle, TranscriptOracle, _attack_inputs, fidelity,
                        genetic_attack, gradient_attack, hpnn_gradient_attack, jsd, random_fidelity_baseline,
                        source_map)
from lla.errors import DivergenceError, InputError
from lla.locker import LockSpec, hpnn_lock, lock_model, make_locked_model
from lla.model import SynthConfig, model_logits, random_probes, sample_corpus, synth_model
from lla.outlier import block_statistics, find_feature_outliers, score_neurons
from lla.rng import SplitMix64


def test_jsd_examples():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert jsd([1, 0], [0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    independent = jensenshannon([0.5, 0.5], [1.0, 0.0]) ** 2  # natural log by default
    assert jsd([0.5, 0.5], [1, 0]) == pytest.approx(independent, abs=1e-6)


def test_jsd_is_symmetric_and_bounded():
    r = SplitMix64(1)
    for _ in range(20):
        p = r.uniform(6)
        q = r.uniform(6)
        p, q = p / p.sum(), q / q.sum()
        assert jsd(p, q) == pytest.approx(jsd(q, p), abs=1e-12)
        assert 0 <= jsd(p, q) <= math.log(2)


@pytest.mark.parametrize("p,q", [([0.5, 0.6], [0.5, 0.5]), ([-0.1, 1.1], [0.5, 0.5]), ([1, 0], [1, 0, 0])])
def test_jsd_invalid(p, q):
    with pytest.raises(InputError):
        jsd(p, q)


def test_fidelity_examples():
    assert fidelity([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert fidelity([1, 0, 2, 3], [0, 1, 2, 3]) == 0.5
    assert fidelity([3, 2, 1, 0], [0, 1, 2, 3]) == 0.0
    assert random_fidelity_baseline(16) == 1 / 16
    with pytest.raises(InputError):
        fidelity([0, 1], [0, 1, 2])


def test_source_map_inverts():
    perm = fabric.random_group_perm(32, 8, 4)
    src = source_map(perm)
    x = np.arange(32.0)
    assert np.array_equal(fabric.apply_grouped(x, perm), x[src])


@pytest.fixture(scope="module")
def small():
    model = synth_model(SynthConfig(), 0)
    return model, Oracle(model), random_probes(model.vocab, 5)


def _identity_locked(model, n, m):
    probes = random_probes(model.vocab, 1)
    rep = find_feature_outliers(model, 1, probes, 5)
    u_bar = block_statistics(model, probes)[1][1]
    neurons = score_neurons(model.blocks[1].ffn, rep.outliers, u_bar, n).selected
    return make_locked_model(model, LockSpec(1, tuple(neurons), m, 3, np.arange(n)))


def test_genetic_identity_in_population(small):
    model, oracle, probes = small
    locked = _identity_locked(model, 16, 4)
    cfg = AttackConfig(mode="genetic", iterations=0, probes=probes)
    res = genetic_attack(locked, oracle, cfg, truth_perm=np.arange(16), initial_population=[np.arange(16)])
    assert res.fidelity == 1.0 and res.iterations == 0


def test_genetic_beats_random_baseline(small):
    model, oracle, probes = small
    out = lock_model(model, 16, 4, seed=3)
    cfg = AttackConfig(mode="genetic", iterations=30, time_limit_s=60, probes=probes, seed=1)
    res = genetic_attack(out.locked, oracle, cfg, truth_perm=out.key.perm)
    assert res.fidelity > res.random_baseline == 0.25
    assert res.evaluations <= 64 * 31


def test_genetic_deterministic(small):
    model, oracle, probes = small
    out = lock_model(model, 16, 4, seed=3)
    cfg = AttackConfig(mode="genetic", iterations=5, probes=probes, seed=9)
    a = genetic_attack(out.locked, oracle, cfg, truth_perm=out.key.perm).to_json(include_timing=False)
    b = genetic_attack(out.locked, oracle, cfg, truth_perm=out.key.perm).to_json(include_timing=False)
    assert a == b


def test_gradient_identity_diagonal_init(small):
    model, oracle, probes = small
    locked = _identity_locked(model, 16, 16)
    init = np.eye(16)[None] * 50.0
    res = gradient_attack(locked, oracle, AttackConfig(iterations=0, probes=probes), truth_perm=np.arange(16),
                          init_logits=init)
    assert res.fidelity == 1.0


def test_gradient_reduces_jsd(small):
    model, oracle, probes = small
    out = lock_model(model, 16, 16, seed=3)
    cfg = AttackConfig(iterations=2000, lr=0.03, probes=probes)
    res = gradient_attack(out.locked, oracle, cfg, truth_perm=out.key.perm)
    assert res.jsd_after < res.jsd_before
    assert 0.0 <= res.fidelity <= 1.0
    assert res.evaluations == 3 * res.iterations


def test_gradient_deterministic(small):
    model, oracle, probes = small
    out = lock_model(model, 16, 16, seed=3)
    cfg = AttackConfig(iterations=20, probes=probes, seed=4)
    a = gradient_attack(out.locked, oracle, cfg, truth_perm=out.key.perm).to_json(include_timing=False)
    b = gradient_attack(out.locked, oracle, cfg, truth_perm=out.key.perm).to_json(include_timing=False)
    assert a == b


def test_oracle_less_mode(small):
    model, _, _ = small
    out = lock_model(model, 16, 16, seed=3)
    corpus = sample_corpus(model, 2, count=8, length=32)
    res = gradient_attack(out.locked, None, AttackConfig(guidance="OL", iterations=50, corpus=corpus),
                          truth_perm=out.key.perm, reference_logits=model_logits(model, np.arange(model.vocab)))
    assert res.guidance == "OL" and res.iterations == 50


def test_empty_probes_rejected(small):
    model, oracle, _ = small
    out = lock_model(model, 16, 16, seed=3)
    with pytest.raises(InputError):
        gradient_attack(out.locked, oracle, AttackConfig(iterations=1, probes=[]))
    with pytest.raises(InputError):
        genetic_attack(out.locked, oracle, AttackConfig(mode="genetic", iterations=1, probes=None))


def test_divergence_reported(small):
    model, oracle, probes = small
    out = lock_model(model, 16, 16, seed=3)
    init = np.full((1, 16, 16), np.nan)
    with pytest.raises(DivergenceError) as info:
        gradient_attack(out.locked, oracle, AttackConfig(iterations=3, probes=probes), init_logits=init)
    assert info.value.dump["iteration"] == 0


def test_transcript_oracle(small):
    model, oracle, probes = small
    rec = TranscriptOracle([(p, oracle.query(p)) for p in probes])
    assert np.array_equal(rec.query(probes[0]), oracle.query(probes[0]))
    with pytest.raises(InputError):
        rec.query([1, 2, 3])


def test_hpnn_single_bit(small):
    model, oracle, probes = small
    hot = score_neurons(model.blocks[1].ffn, [7, 13], block_statistics(model, probes)[1][1], 1).selected
    for bit in (0, 1):
        h = hpnn_lock(model.blocks[1].ffn, hot, [bit])
        # exhaustive two-case oracle: the true bit has the lower loss
        tokens, target = _attack_inputs(oracle, AttackConfig(probes=probes), model.vocab)
        surf = HpnnSurface(model, 1, h, tokens, target, "OG")
        assert surf.loss_bits([bit]) < surf.loss_bits([1 - bit])
        res = hpnn_gradient_attack(model, 1, h, oracle, AttackConfig(iterations=100, probes=probes), truth_bits=[bit])
        assert res.fidelity == 1.0


def test_hpnn_zero_iterations(small):
    model, oracle, probes = small
    h = hpnn_lock(model.blocks[1].ffn, [0, 1, 2, 3], [1, 0, 1, 0])
    res = hpnn_gradient_attack(model, 1, h, oracle, AttackConfig(iterations=0, probes=probes), truth_bits=[1, 0, 1, 0])
    assert res.iterations == 0 and 0 <= res.fidelity <= 1


def _fd_check(fn, x, idx, eps=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += eps
    xm[idx] -= eps
    return (fn(xp) - fn(xm)) / (2 * eps)


@pytest.mark.parametrize("kind,act,guidance", [("standard", "relu", "OG"), ("gated", "silu", "OG"),
                                               ("gated", "silu", "OL")])
def test_relaxed_gradient_matches_finite_differences(kind, act, guidance):
    model = synth_model(SynthConfig(kind=kind, activation=act), 2)
    out = lock_model(model, 16, 4, seed=1)
    cfg = AttackConfig(guidance=guidance, probes=random_probes(model.vocab, 3, 2, 16),
                       corpus=sample_corpus(model, 1, 2, 16))
    tokens, target = _attack_inputs(Oracle(model), cfg, model.vocab)
    surf = KeySurface(out.locked, tokens, target, guidance)
    logits = SplitMix64(8).normal(4 * 16).reshape(4, 4, 4)
    _, grad = surf.relaxed(logits)
    for flat in SplitMix64(2).integers(logits.size, 10):
        idx = np.unravel_index(int(flat), logits.shape)
        num = _fd_check(lambda z: surf.relaxed(z)[0], logits, idx)
        assert abs(num - grad[idx]) <= 1e-3 * max(abs(num), 1e-6) + 1e-9
