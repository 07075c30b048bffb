import dataclasses

import numpy as np
import pytest

from smpcval.probval import ProbabilisticLevels
from smpcval.sysmodel import ControllerDesign, LtiSystem, closed_loop_matrix
from smpcval.tightening import (TighteningError, TighteningProfile, compute_tightening,
                                tightening_from_samples, validate_tightening)
from smpcval.uncertainty import DisturbanceModel, draw_disturbance_batch


def test_hand_example():
    d = np.array([[[0.1]], [[-0.2]], [[0.05]]])
    q = tightening_from_samples([[0.0]], [[1.0]], d, r=1, N=2)
    assert q[0, 0] == 0.0 and q[1, 0] == pytest.approx(0.1)


def test_first_row_zero_and_shape(example_profile):
    assert example_profile.q.shape == (8, 6)
    assert np.all(example_profile.q[0] == 0.0)
    assert example_profile.S_q == 2448
    assert example_profile.levels.multiplicity == 48


def test_q_is_rth_largest_full_sort_oracle(example_system, example_design, example_model):
    d = draw_disturbance_batch(example_model, 7, 300, seed=3)
    A_K = closed_loop_matrix(example_system, example_design.K)
    q = tightening_from_samples(A_K, example_design.C_K, d, 13, 8)
    for l in range(8):
        e = np.zeros((300, 2))
        for step in range(l):
            e = e @ A_K.T + d[:, step]
        for j in range(6):
            vals = sorted((e @ example_design.C_K[j]).tolist(), reverse=True)
            assert q[l, j] == pytest.approx(vals[12], abs=1e-15)


def test_larger_r_tightens_less(example_system, example_design, example_model):
    d = draw_disturbance_batch(example_model, 7, 500, seed=4)
    A_K = closed_loop_matrix(example_system, example_design.K)
    qs = [tightening_from_samples(A_K, example_design.C_K, d, r, 8) for r in (1, 5, 25, 60)]
    for a, b in zip(qs, qs[1:]):
        assert np.all(b <= a)


def test_symmetric_rows_agree_statistically(example_profile):
    q = example_profile.q[1:]
    # +row and -row of each coordinate see a symmetric law
    np.testing.assert_allclose(q[:, 0], q[:, 1], rtol=0.25)
    np.testing.assert_allclose(q[:, 2], q[:, 3], rtol=0.25)
    np.testing.assert_allclose(q[:, 4], q[:, 5], rtol=0.25)


def test_deterministic_given_seed(example_system, example_design, example_model, example_profile):
    again = compute_tightening(example_system, example_design, example_model,
                               ProbabilisticLevels(0.05, 1e-6, 60))
    np.testing.assert_array_equal(again.q, example_profile.q)
    other = compute_tightening(example_system, example_design, example_model,
                               ProbabilisticLevels(0.05, 1e-6, 60), seed=99)
    assert not np.array_equal(other.q, example_profile.q)


def test_rejects_small_sample(example_system, example_design, example_model):
    with pytest.raises(ValueError):
        compute_tightening(example_system, example_design, example_model,
                           ProbabilisticLevels(0.05, 1e-6, 60), S_q=100)


def test_interior_loss_is_an_error():
    sys = LtiSystem.from_boxes([[0.9]], [[1.0]], [0.01], [1.0])
    design = ControllerDesign.from_system(sys, [[1.0]], [[1.0]], 3)
    model = DisturbanceModel("truncated-gaussian", 1, [[1.0]], 4.0, seed=0)
    with pytest.raises(TighteningError, match="increase epsilon"):
        compute_tightening(sys, design, model, ProbabilisticLevels(0.1, 0.1, 1))


def test_json_round_trip(example_profile):
    text = example_profile.to_json({"note": 1})
    back = TighteningProfile.from_json(text)
    np.testing.assert_array_equal(back.q, example_profile.q)
    assert back.digest() == example_profile.digest()
    tampered = text.replace('"S_q": 2448', '"S_q": 2449')
    with pytest.raises(ValueError, match="hash"):
        TighteningProfile.from_json(tampered)


def test_validation_extremes(example_system, example_design, example_model, example_profile):
    hi = dataclasses.replace(example_profile, q=np.full_like(example_profile.q, np.inf))
    lo = dataclasses.replace(example_profile, q=np.full_like(example_profile.q, -np.inf))
    rep_hi = validate_tightening(hi, example_system, example_design, example_model, 2000, 77)
    rep_lo = validate_tightening(lo, example_system, example_design, example_model, 2000, 77)
    assert np.all(rep_hi.frequency == 0) and rep_hi.ok
    assert np.all(rep_lo.frequency == 1) and len(rep_lo.flagged) == 48
    with pytest.raises(ValueError):
        validate_tightening(example_profile, example_system, example_design, example_model, 10,
                            example_profile.seed)
