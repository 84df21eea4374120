import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import class_probs_ref, nw_direct, random_intensity
from gdhmm.core_model import Dataset, DiscriminativeParams, ModelDims, SubjectRecord
from gdhmm.discriminative import class_probabilities
from gdhmm.errors import ConfigError, DomainError
from gdhmm.kernel_marginal import (
    EmptyKernelWindowWarning,
    KernelConfig,
    NadarayaWatson,
    default_bandwidth,
    epanechnikov,
    hmm_marginals,
    hmm_state_marginal,
    nw_state_marginal,
    nw_state_marginal_direct,
)
from gdhmm.simulate import canonical_truth
from gdhmm.splines import make_basis

BASIS = make_basis(1, 10.0)


def test_kernel_values():
    assert epanechnikov(0.0) == 0.75
    assert epanechnikov(1.0) == 0.0
    assert epanechnikov(-1.0) == 0.0
    assert epanechnikov(0.5) == 0.5625
    assert epanechnikov(1.5) == 0.0


def test_default_bandwidth():
    assert default_bandwidth(200, 10.0) == pytest.approx(10.0 * 200 ** -0.2, rel=1e-15)
    with pytest.raises(ConfigError):
        KernelConfig(0.0)


def test_single_observation_gives_its_class_probabilities(rng):
    d = DiscriminativeParams(rng.normal(size=(2, BASIS.dim)), rng.normal(size=(2, 2)), BASIS)
    x = np.array([0.4, -1.2])
    data = Dataset((SubjectRecord("a", np.array([0.0]), x[None], None),), ModelDims(3, 2, 10.0))
    out = nw_state_marginal(data, d, KernelConfig(1.0), 0.0)
    np.testing.assert_allclose(out, class_probabilities(d, x, 0.0).probs, atol=1e-15)


def test_two_equidistant_observations():
    # markers push the two observations to opposite classes
    d = DiscriminativeParams(np.zeros((1, BASIS.dim)), np.array([[60.0]]), BASIS)
    nw = NadarayaWatson([4.0, 6.0], [[-1.0], [1.0]], [5.0], 2.0)
    np.testing.assert_allclose(nw.marginals(d)[0], [0.5, 0.5], atol=1e-12)


def test_three_observation_weights(rng):
    a = 2.0
    d = DiscriminativeParams(rng.normal(size=(2, BASIS.dim)), rng.normal(size=(2, 1)), BASIS)
    t0 = 5.0
    obs_t = np.array([t0, t0 + a / 2, t0 - 2 * a])
    obs_x = rng.normal(size=(3, 1))
    w = np.array([0.75, 0.5625, 0.0])
    probs = class_probs_ref(d, obs_x, np.full(3, t0))
    ref = w @ probs / w.sum()
    nw = NadarayaWatson(obs_t, obs_x, [t0], a)
    np.testing.assert_allclose(nw.marginals(d)[0], ref, atol=1e-14)


def test_batched_matches_direct_and_oracle(rng):
    d = DiscriminativeParams(rng.normal(size=(3, BASIS.dim)), rng.normal(size=(3, 2)), BASIS)
    t = rng.uniform(0, 10, 80)
    x = rng.normal(size=(80, 2))
    q = rng.uniform(0, 10, 7)
    nw = NadarayaWatson(t, x, q, 1.5)
    out = nw.marginals(d)
    for i, qt in enumerate(q):
        np.testing.assert_allclose(out[i], nw_state_marginal_direct(t, x, d, 1.5, qt), atol=1e-13)
        np.testing.assert_allclose(out[i], nw_direct(t, x, d, 1.5, qt), atol=1e-13)


def test_large_predictors_use_stable_path(rng):
    d = DiscriminativeParams(rng.normal(size=(2, BASIS.dim)), np.array([[400.0], [-300.0]]), BASIS)
    t = rng.uniform(0, 10, 30)
    x = rng.normal(size=(30, 1))
    out = NadarayaWatson(t, x, [5.0], 3.0).marginals(d)[0]
    np.testing.assert_allclose(out, nw_direct(t, x, d, 3.0, 5.0), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_reordering_invariance_and_simplex(seed):
    rng = np.random.default_rng(seed)
    d = DiscriminativeParams(rng.normal(size=(2, BASIS.dim)), rng.normal(size=(2, 2)), BASIS)
    t = rng.uniform(0, 10, 40)
    x = rng.normal(size=(40, 2))
    perm = rng.permutation(40)
    q = rng.uniform(0, 10, 5)
    a = NadarayaWatson(t, x, q, 2.5).marginals(d, fallback=np.full((5, 3), 1 / 3))
    b = NadarayaWatson(t[perm], x[perm], q, 2.5).marginals(d, fallback=np.full((5, 3), 1 / 3))
    np.testing.assert_allclose(a, b, atol=1e-14)
    assert np.all(a >= 0) and np.allclose(a.sum(axis=1), 1.0, atol=1e-10)


def test_empty_window_fallback_and_error():
    d = DiscriminativeParams.zeros(2, 1, BASIS)
    nw = NadarayaWatson([0.0], [[0.0]], [9.0], 1.0)
    with pytest.warns(EmptyKernelWindowWarning):
        out = nw.marginals(d, fallback=np.array([[0.2, 0.8]]))
    np.testing.assert_allclose(out[0], [0.2, 0.8])
    with pytest.raises(DomainError):
        nw.marginals(d)


def test_hmm_marginal_examples():
    pi = np.array([0.3, 0.7])
    r = np.array([[-1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(hmm_state_marginal(pi, r, 0.0), pi, atol=1e-15)
    np.testing.assert_allclose(hmm_state_marginal(np.array([1.0, 0.0]), r, math.log(2.0)), [0.5, 0.5], atol=1e-15)
    init, intensity, _, _ = canonical_truth()
    out = hmm_state_marginal(init, intensity, 1e6)
    assert out[3] >= 1 - 1e-6
    with pytest.raises(DomainError):
        hmm_state_marginal(init, intensity, -1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hmm_marginals_simplex(seed):
    rng = np.random.default_rng(seed)
    r = random_intensity(rng, 4, scale=rng.uniform(0.01, 5))
    pi = rng.dirichlet(np.ones(4))
    out = hmm_marginals(pi, r.rho, rng.uniform(0, 50, 20))
    assert np.all(out >= 0) and np.allclose(out.sum(axis=1), 1.0, atol=1e-10)


def test_nw_tracks_hmm_marginal_when_markers_uninformative():
    rng = np.random.default_rng(5)
    init, intensity, _, _ = canonical_truth()
    n = 2000
    t = rng.uniform(0, 10, n)
    x = rng.normal(size=(n, 1))
    basis = make_basis(6, 10.0)
    grid = np.linspace(0, 10, 400)
    from gdhmm.splines import evaluate_basis

    m = hmm_marginals(init.pi, intensity.rho, grid)
    logits = np.log(m[:, 1:]) - np.log(m[:, :1])
    eta = np.linalg.lstsq(evaluate_basis(basis, grid), logits, rcond=None)[0].T
    d = DiscriminativeParams(eta, np.zeros((3, 1)), basis)
    q = np.linspace(0.5, 9.5, 19)
    nw = NadarayaWatson(t, x, q, default_bandwidth(n, 10.0)).marginals(d)
    ref = hmm_marginals(init.pi, intensity.rho, q)
    assert np.max(np.abs(nw - ref)) < 0.05
