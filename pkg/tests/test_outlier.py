import json

import numpy as np
import pytest

from lla.errors import InputError, SelectionError
from lla.model import FfnBlock, SynthConfig, random_probes, synth_model
from lla.outlier import (block_statistics, find_feature_outliers, outliers_from_means, report_json, score_neurons,
                         select_protected_block)


def test_outliers_hand_example():
    assert outliers_from_means([1, 2, 1, 12], 2) == [3]


@pytest.mark.parametrize("tau", [1.01, 2, 5, 100])
def test_equal_features_have_no_outliers(tau):
    assert outliers_from_means([3.0] * 8, tau) == []


def test_empty_probes(planted):
    with pytest.raises(InputError):
        find_feature_outliers(planted, 0, [], 5)


def test_tau_must_exceed_one(planted):
    with pytest.raises(InputError):
        find_feature_outliers(planted, 0, random_probes(planted.vocab, 1), 1.0)


def _block(w_down):
    w_down = np.asarray(w_down, np.float32)
    return FfnBlock("standard", np.zeros(w_down.shape[::-1], np.float32), w_down)


def test_score_hand_example():
    b = _block([[0.5, 0.0], [-2.0, 0.0]])
    s = score_neurons(b, [0], np.array([1.0, 3.0]), 1)
    assert np.allclose(s.scores, [0.5, 6.0])
    assert s.selected == [1]


def test_zero_activity_selects_lowest():
    b = _block(np.ones((6, 3)))
    s = score_neurons(b, [0, 2], np.zeros(6), 3)
    assert not np.any(s.scores)
    assert s.selected == [0, 1, 2]


def test_all_features_closed_form():
    d_m = 5
    b = _block(np.ones((2, d_m)))
    s = score_neurons(b, list(range(d_m)), np.array([2.0, 1.0]), 2)
    assert np.allclose(s.scores, [2 * d_m, d_m])
    assert s.selected == [0, 1]


def test_empty_outlier_set_rejected():
    with pytest.raises(InputError):
        score_neurons(_block(np.ones((2, 2))), [], np.ones(2), 1)


def test_gain_one_selection_error():
    m = synth_model(SynthConfig(outlier_gain=1.0), 3)
    with pytest.raises(SelectionError):
        select_protected_block(m, random_probes(m.vocab, 4), 5)


def test_report_json(planted):
    probes = random_probes(planted.vocab, 2)
    rep = find_feature_outliers(planted, 1, probes, 5)
    _, u_bar = block_statistics(planted, probes)[1]
    sc = score_neurons(planted.blocks[1].ffn, rep.outliers, u_bar, 8, 1)
    body = json.loads(json.dumps(report_json(rep, sc)))
    assert body["outliers"]["outliers"] == [7, 13]
    assert len(body["neurons"]["selected"]) == 8
