import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lla import fabric, linalg
from lla.errors import InputError
from lla.locker import (LockSpec, build_orthogonal_set, flop_overhead_report, fold_weights, hpnn_lock, lock_model,
                        protected_order, run_locked_ffn)
from lla.model import FfnBlock, SynthConfig, ffn_forward, model_logits, random_probes, synth_model
from lla.rng import SplitMix64, derive_seed

from conftest import rel_err


def _random_ffn(seed, d_m=4, d_ff=8, kind="standard", act="relu"):
    r = SplitMix64(seed)
    up = r.normal(d_m * d_ff).reshape(d_m, d_ff).astype(np.float32)
    down = r.normal(d_ff * d_m).reshape(d_ff, d_m).astype(np.float32)
    gate = r.normal(d_m * d_ff).reshape(d_m, d_ff).astype(np.float32) if kind == "gated" else None
    return FfnBlock(kind, up, down, gate, act)


def _random_spec(seed, d_ff, n, m):
    r = SplitMix64(seed)
    neurons = tuple(int(v) for v in r.permutation(d_ff)[:n])
    return LockSpec(0, neurons, m, derive_seed(seed, 1), fabric.random_group_perm(n, m, derive_seed(seed, 2)))


def test_trivial_orthogonal_set():
    # one protected neuron already in slot 0 with the identity key
    spec = LockSpec(0, (0, 1), 2, 5, np.arange(2))
    o = build_orthogonal_set(spec, 6)
    assert np.array_equal(o.p_matrix(), np.eye(6)) and np.array_equal(o.k_matrix(), np.eye(6))
    assert np.allclose(o.r[:2, :2], linalg.randomized_hadamard(2, 5)) and np.array_equal(o.r[2:, 2:], np.eye(4))
    assert protected_order([0], 6).tolist() == list(range(6))
    assert abs(linalg.randomized_hadamard(1, 5)[0, 0]) == 1.0


def test_identity_transforms_leave_weights():
    ffn = _random_ffn(1)
    spec = LockSpec(0, (0, 1), 2, 3, np.arange(2), rotate=False)
    ortho = build_orthogonal_set(spec, ffn.d_ff)
    assert np.array_equal(ortho.p_matrix(), np.eye(8)) and np.array_equal(ortho.k_matrix(), np.eye(8))
    locked = fold_weights(ffn, ortho, 2, 2, 3, rotate=False)
    assert np.array_equal(locked.w_up, ffn.w_up) and np.array_equal(locked.w_down, ffn.w_down)


def test_protected_order_brings_neurons_forward():
    order = protected_order([5, 2, 0], 7)
    assert order[:3].tolist() == [5, 2, 0]
    assert sorted(order.tolist()) == list(range(7))


@given(seed=st.integers(0, 2**32), kind=st.sampled_from(["standard", "gated"]), act=st.sampled_from(["relu", "silu"]))
@settings(max_examples=40, deadline=None)
def test_correct_key_equivalence(seed, kind, act):
    ffn = _random_ffn(seed, kind=kind, act=act)
    spec = _random_spec(seed, 8, 4, 2 if seed % 2 else 4)
    ortho = build_orthogonal_set(spec, 8)
    locked = fold_weights(ffn, ortho, spec.n, spec.group_size, spec.hadamard_seed)
    x = SplitMix64(seed + 1).normal(12).reshape(3, 4)
    key = fabric.key_material(spec.key_perm, spec.group_size)
    assert rel_err(run_locked_ffn(locked, key.bits, x), ffn_forward(ffn, x)) < 1e-4


def test_generated_matrices_are_orthogonal():
    spec = _random_spec(9, 64, 16, 4)
    ortho = build_orthogonal_set(spec, 64)
    for mat in (ortho.p_matrix(), ortho.r, ortho.k_matrix()):
        assert linalg.orthogonality_defect(mat) < 1e-6


def test_folding_identity_with_explicit_matrices():
    # W~_up = W_up P and W~_down = K^T R^T P^T W_down, checked densely
    ffn = _random_ffn(4, d_ff=16)
    spec = _random_spec(4, 16, 8, 4)
    o = build_orthogonal_set(spec, 16)
    p, r, k = (m.astype(np.float64) for m in (o.p_matrix(), o.r, o.k_matrix()))
    locked = fold_weights(ffn, o, 8, 4, spec.hadamard_seed)
    assert np.allclose(locked.w_up, ffn.w_up @ p, atol=1e-6)
    assert np.allclose(locked.w_down, k.T @ r.T @ p.T @ ffn.w_down, atol=1e-5)


def test_wrong_key_deviation(planted, locked64):
    lm, key = locked64.locked, locked64.key
    x = random_probes(planted.vocab, 3, 1, 32)[0]
    good = model_logits(planted, x)
    perm = key.perm.copy()
    perm[:16] = perm[:16][::-1]  # one group scrambled differently
    wrong = fabric.key_material(perm, 16)
    assert rel_err(lm.logits(x, wrong), good) > 0.01
    assert rel_err(lm.logits(x, lm.zero_key()), good) > 0
    assert rel_err(lm.logits(x, key), good) < 1e-4


def test_fwht_and_dense_paths_agree(planted, locked64):
    lm = locked64.locked
    h = SplitMix64(2).normal(5 * planted.d_model).reshape(5, planted.d_model)
    a = run_locked_ffn(lm.locked, locked64.key, h, "fwht")
    b = run_locked_ffn(lm.locked, locked64.key, h, "dense")
    assert rel_err(a, b) < 1e-5


def test_bit_length_mismatch(locked64):
    with pytest.raises(InputError):
        run_locked_ffn(locked64.locked.locked, np.zeros(5, np.uint8), np.zeros((1, 32)))


def test_lock_model_picks_planted_block(planted):
    out = lock_model(planted, 64, 16, seed=7)
    assert out.spec.protected_block == 1 and out.key.total_bits == 224
    assert out.outlier_report.outliers == [7, 13]
    again = lock_model(planted, 64, 16, seed=7)
    assert np.array_equal(again.key.bits, out.key.bits)


def test_lock_model_without_outliers_fails(planted):
    with pytest.raises(InputError), pytest.warns(UserWarning):
        lock_model(planted, 16, 4, seed=0, block=0)


@pytest.mark.parametrize("kind,act", [("standard", "relu"), ("gated", "silu")])
def test_hpnn(kind, act):
    ffn = _random_ffn(6, 8, 32, kind, act)
    neurons = [3, 9, 12, 30]
    key = np.array([1, 0, 1, 1], np.uint8)
    h = hpnn_lock(ffn, neurons, key)
    x = SplitMix64(1).normal(40).reshape(5, 8)
    assert np.array_equal(h.run(key, x), ffn_forward(ffn, x))
    flipped = key.copy()
    flipped[0] ^= 1
    assert rel_err(h.run(flipped, x), ffn_forward(ffn, x)) > 1e-3
    with pytest.raises(InputError):
        hpnn_lock(ffn, neurons, key[:3])


def test_flops_examples():
    rep = flop_overhead_report(4096, 16384, "standard", 2048, 16, "fwht")
    assert rep.key_bits == 7168
    assert rep.base_flops == 268_435_456
    assert rep.rotation_flops == 2048 * 11 + 2048
    assert rep.ratio < 1e-3 and rep.warning is None
    assert flop_overhead_report(4096, 16384, "standard", 0).ratio == 0
    dense = flop_overhead_report(4096, 16384, "standard", 2048, 16, "dense")
    assert dense.ratio == pytest.approx(8_388_608 / 268_435_456)
    assert dense.warning


def test_flops_gated_base():
    assert flop_overhead_report(64, 256, "gated", 16).base_flops == 2 * 64 * 256 * 3


def test_locked_model_is_deterministic_across_seeds():
    m = synth_model(SynthConfig(kind="gated", activation="silu"), 2)
    a = lock_model(m, 32, 16, seed=1)
    b = lock_model(m, 32, 16, seed=2)
    assert not np.array_equal(a.key.perm, b.key.perm)
    toks = [0, 5, 9]
    for out in (a, b):
        assert rel_err(out.locked.logits(toks, out.key), model_logits(m, toks)) < 1e-4
