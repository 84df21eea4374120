import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdhmm.errors import ConfigError
from gdhmm.evaluation import (
    accuracy,
    bias_mse,
    default_fit_config,
    misd,
    one_vs_rest_auc,
    run_benchmark,
    run_replication,
    selection_metrics,
)
from gdhmm.simulate import SimulationConfig
from gdhmm.splines import make_basis


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 100.0
    assert accuracy([0, 1, 1, 0], [1, 0, 0, 1]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 75.0
    with pytest.raises(ConfigError):
        accuracy([0, 1], [0])


def test_auc_examples():
    truth = np.array([1, 0, 1, 0])
    s = np.array([0.9, 0.8, 0.7, 0.1])
    scores = np.column_stack([1 - s, s])
    assert one_vs_rest_auc(scores, truth)[1] == pytest.approx(0.75)
    perfect = np.column_stack([1 - truth, truth]).astype(float)
    np.testing.assert_allclose(one_vs_rest_auc(perfect, truth), 1.0)
    np.testing.assert_allclose(one_vs_rest_auc(np.full((4, 2), 0.5), truth), 0.5)
    assert np.isnan(one_vs_rest_auc(np.full((3, 3), 1 / 3), np.array([0, 1, 1]))[2])


def test_selection_examples():
    sup = np.zeros(20, bool)
    sup[:4] = True
    beta = np.zeros((3, 20))
    beta[:, :4] = 1.0
    assert selection_metrics(beta, sup) == (4, 0, 1.0)
    assert selection_metrics(np.ones((3, 20)), sup) == (4, 16, 0.0)
    assert selection_metrics(np.zeros((3, 20)), sup) == (0, 0, 0.0)


def test_misd_examples(rng):
    basis = make_basis(2, 10.0)
    eta = rng.normal(size=(3, basis.dim))
    np.testing.assert_array_equal(misd(eta, eta, basis), 0.0)
    c = 0.7
    # a constant offset in every coefficient shifts the curve by c (partition of unity)
    np.testing.assert_allclose(misd(eta + c, eta, basis, 10.0), 10 * c * c, atol=1e-6)
    base = misd(eta, np.zeros_like(eta), basis)
    np.testing.assert_allclose(misd(eta, -eta, basis), 4 * base, rtol=1e-12)


def test_bias_mse():
    e = np.array([[1.0, -2.0], [3.0, 0.0]])
    bias, mse = bias_mse(e)
    assert bias == pytest.approx((2.0 + 1.0) / 2)
    assert mse == pytest.approx((1 + 4 + 9 + 0) / 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, 60)
    probs = rng.dirichlet(np.ones(4), size=60)
    pred = np.argmax(probs, axis=1)
    perm = rng.permutation(60)
    assert accuracy(pred, truth) == accuracy(pred[perm], truth[perm])
    np.testing.assert_allclose(one_vs_rest_auc(probs, truth), one_vs_rest_auc(probs[perm], truth[perm]), atol=1e-14)


def test_dknown_accuracy_grows_with_signal():
    accs = []
    for scale in (0.5, 6.0):
        sim = SimulationConfig(n=80, beta_scale=scale, pool_size=20_000)
        res = run_replication(sim, default_fit_config(sim), ("dknown",), seed=3)
        assert res.methods["dknown"].status == "ok"
        accs.append(res.methods["dknown"].acc_posterior)
    assert accs[1] > accs[0]
    assert accs[1] > 90.0


def test_single_replication_rerun_is_identical():
    sim = SimulationConfig(n=30, pool_size=5000)
    cfg = default_fit_config(sim, max_iter=3, hmm_max_iter=5)
    a = run_benchmark(sim, 1, ("proposed", "obs"), cfg, seed=9)
    b = run_benchmark(sim, 1, ("proposed", "obs"), cfg, seed=9)
    np.testing.assert_equal(a.rows(), b.rows())
    np.testing.assert_equal(a.summary(), b.summary())


def test_unknown_method_and_mode():
    sim = SimulationConfig(n=10, pool_size=2000)
    with pytest.raises(ConfigError):
        run_replication(sim, default_fit_config(sim), ("oracle",))
    with pytest.raises(ConfigError):
        run_replication(sim, default_fit_config(sim), ("obs",), eval_mode="first_visit")
