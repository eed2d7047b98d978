import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varfilter.kalman import (KalmanBelief, SingularInnovation, initial_belief, joint_gaussian_loglik,
                              kalman_filter_sequence, kalman_predict, kalman_update)
from varfilter.models import make_lgssm


def unit_model(R=1.0, Q=0.1, A=0.9):
    return make_lgssm([[A]], [Q], [[1.0]], [0.0], [R], [0.0], [1.0])


def test_predict_identity_dynamics():
    m = make_lgssm(np.eye(2), [1e-300, 1e-300], np.eye(2), [0, 0], [1, 1], [0, 0], [1, 1])
    b = KalmanBelief([0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    out = kalman_predict(m, b)
    np.testing.assert_array_equal(out.mean, b.mean)
    np.testing.assert_allclose(out.cov, b.cov, atol=1e-299)


def test_predict_scalar():
    out = kalman_predict(unit_model(), KalmanBelief([1.0], [[0.0]]))
    assert out.mean.item() == pytest.approx(0.9)
    assert out.cov.item() == pytest.approx(0.1)


def test_predict_keeps_covariance_pd():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    m = make_lgssm(A, [0.1, 0.2, 0.3], np.eye(3), np.zeros(3), np.ones(3), np.zeros(3), np.ones(3))
    L = rng.normal(size=(3, 3))
    out = kalman_predict(m, KalmanBelief(np.zeros(3), L @ L.T + 0.1 * np.eye(3)))
    np.testing.assert_array_equal(out.cov, out.cov.T)
    assert np.all(np.linalg.eigvalsh(out.cov) > 0)


def test_update_conjugate_example():
    post, ll = kalman_update(unit_model(R=1.0), KalmanBelief([0.0], [[1.0]]), [1.0])
    assert post.mean.item() == pytest.approx(0.5, abs=1e-15)
    assert post.cov.item() == pytest.approx(0.5, abs=1e-15)
    ref = -0.5 * math.log(2 * math.pi * 2) - 0.25
    assert ll == pytest.approx(ref, abs=1e-14)
    assert ll == pytest.approx(-1.515513, abs=1e-6)


def test_update_uninformative_observation():
    post, _ = kalman_update(unit_model(R=1e12), KalmanBelief([0.4], [[2.0]]), [50.0])
    assert post.mean.item() == pytest.approx(0.4, abs=1e-9)
    assert post.cov.item() == pytest.approx(2.0, rel=1e-9)


def test_update_zero_innovation_keeps_mean():
    m = make_lgssm(np.eye(2), [1, 1], [[1.0, 2.0], [0.5, -1.0]], [0.3, 0.1], [0.5, 0.2], [0, 0], [1, 1])
    pred = KalmanBelief([0.2, -0.7], [[1.0, 0.3], [0.3, 2.0]])
    post, _ = kalman_update(m, pred, m.C @ pred.mean + m.b)
    np.testing.assert_allclose(post.mean, pred.mean, atol=1e-15)


def test_singular_innovation_raises():
    # two identical observation channels with negligible noise
    m = make_lgssm([[1.0]], [1.0], [[1.0], [1.0]], [0.0, 0.0], [1e-300, 1e-300], [0.0], [1.0])
    with pytest.raises(SingularInnovation):
        kalman_update(m, KalmanBelief([0.0], [[1.0]]), [1.0, 1.0])


def test_belief_rejects_asymmetric_covariance():
    with pytest.raises(ValueError):
        KalmanBelief([0, 0], [[1.0, 0.2], [0.0, 1.0]])


def test_sequence_base_case():
    m = unit_model()
    beliefs, total = kalman_filter_sequence(m, [[0.7]])
    post, ll = kalman_update(m, initial_belief(m), [0.7])
    assert total == ll
    np.testing.assert_array_equal(beliefs[0].mean, post.mean)


def test_sequence_matches_dense_joint_gaussian():
    m = make_lgssm([[0.8, 0.1], [-0.2, 0.7]], [0.2, 0.1], [[1.0, 0.5], [0.3, -1.0], [0.0, 2.0]],
                   [0.1, 0.0, -0.3], [0.3, 0.2, 0.4], [0.5, -0.5], [1.0, 2.0])
    xs, _ = m.sample_sequence(5, np.random.default_rng(0))
    _, total = kalman_filter_sequence(m, xs)
    assert total == pytest.approx(joint_gaussian_loglik(m, xs), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_covariances_stay_symmetric_pd(seed):
    rng = np.random.default_rng(seed)
    n, k = 3, 2
    A = rng.normal(scale=0.6, size=(n, n))
    m = make_lgssm(A, rng.uniform(0.01, 1, n), rng.normal(size=(k, n)), rng.normal(size=k),
                   rng.uniform(0.01, 1, k), rng.normal(size=n), rng.uniform(0.1, 2, n))
    xs, _ = m.sample_sequence(30, rng)
    beliefs, total = kalman_filter_sequence(m, xs)
    assert np.isfinite(total)
    for b in beliefs:
        assert np.max(np.abs(b.cov - b.cov.T)) < 1e-12
        assert np.all(np.linalg.eigvalsh(b.cov) > 0)


def test_step_logliks_sum_to_total():
    m = unit_model()
    xs, _ = m.sample_sequence(12, np.random.default_rng(1))
    _, total, steps = kalman_filter_sequence(m, xs, return_steps=True)
    assert steps.shape == (12,)
    assert total == pytest.approx(steps.sum(), rel=1e-15)
