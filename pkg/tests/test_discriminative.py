import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import class_probs_ref
from gdhmm.core_model import DiscriminativeParams
from gdhmm.discriminative import (
    NO_PENALTY,
    PenaltyConfig,
    WeightedClassificationProblem,
    class_probabilities,
    class_probability_matrix,
    cross_validate_lambda,
    fit_intercept_only,
    fit_weighted_multinomial,
    lambda_grid,
    lambda_max,
    loglik_gradient,
    one_hot,
    softmax_with_reference,
    weighted_loglik,
)
from gdhmm.errors import ConfigError, DataError
from gdhmm.splines import make_basis

BASIS = make_basis(1, 10.0)


def _problem(rng, n=300, p=3, K=2, beta=None, noise=False):
    t = rng.uniform(0, 10, n)
    x = rng.normal(size=(n, p))
    if beta is None:
        beta = rng.normal(0, 1, (K, p))
    if noise:
        beta = np.zeros((K, p))
    probs = softmax_with_reference(x @ beta.T + 0.3 * np.sin(t)[:, None])
    labels = (rng.uniform(size=(n, 1)) > np.cumsum(probs, axis=1)).sum(axis=1)
    return WeightedClassificationProblem(t, x, one_hot(np.minimum(labels, K), K + 1), BASIS)


def test_zero_coefficients_uniform():
    d = DiscriminativeParams.zeros(4, 2, BASIS)
    np.testing.assert_allclose(class_probabilities(d, np.array([0.3, -1.0]), 2.0).probs, 0.25, atol=1e-15)


def test_sigmoid_values():
    d = DiscriminativeParams(np.zeros((1, BASIS.dim)), np.array([[1.0]]), BASIS)
    np.testing.assert_allclose(class_probabilities(d, np.array([0.0]), 1.0).probs, [0.5, 0.5])
    np.testing.assert_allclose(class_probabilities(d, np.array([math.log(3.0)]), 1.0).probs, [0.25, 0.75], atol=1e-15)


def test_matches_reference_formula(rng):
    d = DiscriminativeParams(rng.normal(size=(3, BASIS.dim)), rng.normal(size=(3, 4)), BASIS)
    x = rng.normal(size=(50, 4))
    t = rng.uniform(0, 10, 50)
    np.testing.assert_allclose(class_probability_matrix(d, x, t), class_probs_ref(d, x, t), atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    lin=st.lists(st.floats(-700, 700), min_size=1, max_size=5),
    shift=st.floats(-50, 50),
)
def test_simplex_and_shift_invariance(lin, shift):
    lin = np.array(lin)
    p = softmax_with_reference(lin[None])[0]
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-10
    full = np.concatenate([[0.0], lin]) + shift
    q = softmax_with_reference((full[1:] - full[0])[None])[0]
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_wrong_marker_length():
    d = DiscriminativeParams.zeros(3, 2, BASIS)
    with pytest.raises(DataError):
        class_probabilities(d, np.zeros(3), 1.0)


def test_separation_is_flagged(rng):
    t = rng.uniform(0, 10, 40)
    x = rng.normal(size=(40, 2))
    w = one_hot(np.zeros(40, dtype=int), 3)
    fit = fit_weighted_multinomial(WeightedClassificationProblem(t, x, w, BASIS))
    probs = class_probability_matrix(fit.params, x, t)
    assert np.all(probs[:, 0] > 1 - 1e-8)
    assert -1e-6 < -fit.objective <= 0
    assert fit.separated


def test_duplicated_half_weights():
    t = np.array([2.0, 2.0])
    x = np.array([[1.0], [1.0]])
    w = np.full((2, 2), 0.5)
    fit = fit_weighted_multinomial(WeightedClassificationProblem(t, x, w, BASIS))
    np.testing.assert_allclose(class_probability_matrix(fit.params, x, t), 0.5, atol=1e-7)


def test_huge_lambda_zeroes_groups_and_matches_intercept_only(rng):
    prob = _problem(rng)
    pen = PenaltyConfig("group_adaptive_lasso", 1e6, np.ones(3))
    fit = fit_weighted_multinomial(prob, pen)
    assert np.all(fit.params.beta == 0)
    ref = fit_intercept_only(prob)
    np.testing.assert_allclose(fit.params.eta, ref.eta, atol=1e-5)
    # lambda_max is the threshold at which all groups vanish
    lmax = lambda_max(prob)
    assert np.all(fit_weighted_multinomial(prob, PenaltyConfig("group_adaptive_lasso", 1.001 * lmax)).params.beta == 0)
    assert np.any(fit_weighted_multinomial(prob, PenaltyConfig("group_adaptive_lasso", 0.9 * lmax)).params.beta != 0)


def test_replication_equals_integer_weights(rng):
    prob = _problem(rng, n=120)
    k = rng.integers(1, 4, prob.num_rows)
    weighted = WeightedClassificationProblem(prob.times, prob.markers, prob.weights * k[:, None], BASIS)
    rows = np.repeat(np.arange(prob.num_rows), k)
    replicated = prob.subset(rows)
    a = fit_weighted_multinomial(weighted, tol=1e-10).params
    b = fit_weighted_multinomial(replicated, tol=1e-10).params
    np.testing.assert_allclose(a.eta, b.eta, atol=1e-8)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)


@pytest.mark.parametrize("solver", ["newton", "fista"])
def test_objective_trace_is_monotone(rng, solver):
    prob = _problem(rng)
    pen = PenaltyConfig("group_adaptive_lasso", 5.0, np.array([1.0, 2.0, 0.5]))
    fit = fit_weighted_multinomial(prob, pen, solver=solver)
    tr = np.array(fit.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * np.maximum(1.0, np.abs(tr[:-1])))
    assert fit.converged


def test_solvers_agree(rng):
    prob = _problem(rng)
    pen = PenaltyConfig("group_adaptive_lasso", 3.0)
    a = fit_weighted_multinomial(prob, pen, solver="newton", tol=1e-9)
    b = fit_weighted_multinomial(prob, pen, solver="fista", tol=1e-9)
    assert abs(a.objective - b.objective) < 1e-6


def test_unpenalized_stationarity_by_finite_differences(rng):
    prob = _problem(rng, n=200)
    fit = fit_weighted_multinomial(prob, tol=1e-10)
    g_eta, g_beta = loglik_gradient(fit.params, prob)
    assert np.max(np.abs(g_eta)) < 1e-6 and np.max(np.abs(g_beta)) < 1e-6
    # analytic gradient against central differences at a random point
    d = DiscriminativeParams(rng.normal(size=fit.params.eta.shape), rng.normal(size=fit.params.beta.shape), BASIS)
    g_eta, g_beta = loglik_gradient(d, prob)
    h = 1e-6
    for (i, j) in [(0, 0), (1, 2)]:
        b1, b2 = np.array(d.beta), np.array(d.beta)
        b1[i, j] += h
        b2[i, j] -= h
        fd = (weighted_loglik(DiscriminativeParams(d.eta, b1, BASIS), prob) - weighted_loglik(DiscriminativeParams(d.eta, b2, BASIS), prob)) / (2 * h)
        assert abs(fd - g_beta[i, j]) < 1e-5 * max(1, abs(fd))


def test_labels_as_weights_equal_plain_fit(rng):
    prob = _problem(rng)
    labels = np.argmax(prob.weights, axis=1)
    a = fit_weighted_multinomial(prob, tol=1e-10).params
    b = fit_weighted_multinomial(WeightedClassificationProblem(prob.times, prob.markers, one_hot(labels, 3), BASIS), tol=1e-10).params
    np.testing.assert_array_equal(a.beta, b.beta)


def test_uniform_weights_give_intercept_only(rng):
    t = rng.uniform(0, 10, 200)
    x = rng.normal(size=(200, 2))
    prob = WeightedClassificationProblem(t, x, np.full((200, 3), 1.0 / 3), BASIS)
    _, gb = loglik_gradient(DiscriminativeParams.zeros(3, 2, BASIS), prob)
    assert np.max(np.abs(gb)) < 1e-12
    fit = fit_weighted_multinomial(prob, tol=1e-10)
    np.testing.assert_allclose(class_probability_matrix(fit.params, x, t), 1.0 / 3, atol=1e-6)


def test_cv_single_value_and_errors(rng):
    prob = _problem(rng, n=50)
    assert cross_validate_lambda(prob, [0.7], 5, rng).lam == 0.7
    with pytest.raises(ConfigError):
        cross_validate_lambda(prob, [2.0, 1.0], 5, rng)
    with pytest.raises(ConfigError):
        cross_validate_lambda(prob, [1.0, 2.0], 1, rng)


def test_cv_prefers_empty_model_under_noise():
    rng = np.random.default_rng(77)
    hits = 0
    for _ in range(50):
        prob = _problem(rng, n=200, p=3, K=1, noise=True)
        grid = lambda_grid(prob, num=10)
        res = cross_validate_lambda(prob, grid, 5, rng)
        hits += res.chosen_index == len(grid) - 1
    assert hits >= 45


def test_cv_keeps_strong_signal(rng):
    beta = np.array([[1.5, -1.5, 0, 0, 0], [1.5, 1.5, 0, 0, 0]])
    prob = _problem(rng, n=600, p=5, K=2, beta=beta)
    grid = lambda_grid(prob, num=20)
    lam = cross_validate_lambda(prob, grid, 5, rng).lam
    fit = fit_weighted_multinomial(prob, PenaltyConfig("group_adaptive_lasso", lam)).params
    assert np.all(np.linalg.norm(fit.beta[:, :2], axis=0) > 0)


def test_penalty_config_validation():
    with pytest.raises(ConfigError):
        PenaltyConfig("ridge", 1.0)
    with pytest.raises(ConfigError):
        PenaltyConfig("group_adaptive_lasso", -1.0)
    with pytest.raises(ConfigError):
        PenaltyConfig("group_adaptive_lasso", 1.0, np.array([1.0, 0.0]))
    assert not NO_PENALTY.active
