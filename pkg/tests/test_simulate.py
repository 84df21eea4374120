import numpy as np
import pytest
import scipy.stats

from gdhmm.errors import ConfigError
from gdhmm.simulate import (
    SimulationConfig,
    build_marker_pool,
    canonical_truth,
    generate_cohort,
    make_study,
    sample_visit_schedule,
)


def test_visit_schedule():
    rng = np.random.default_rng(0)
    sched = sample_visit_schedule(10_000, 6.0, 10.0, rng)
    m = np.array([len(t) for t in sched])
    assert m.min() >= 2
    se = m.std(ddof=1) / np.sqrt(len(m))
    assert abs(m.mean() - 8.0) <= 3 * se
    for t in sched[:500]:
        assert t[0] == 0 and np.all(np.diff(t) > 0) and t[-1] < 10.0


def test_pool_without_signal_is_balanced():
    cfg = SimulationConfig(pool_size=100_000)
    pool = build_marker_pool(cfg, np.random.default_rng(1), beta=np.zeros((3, 4)))
    sizes = np.array([len(g) for g in pool.groups])
    p = 0.25
    se = np.sqrt(cfg.pool_size * p * (1 - p))
    assert np.all(np.abs(sizes - cfg.pool_size * p) <= 3 * se)


def test_scenario_one_markers_standard_normal():
    pool = build_marker_pool(SimulationConfig(pool_size=100_000), np.random.default_rng(2))
    for u in range(4):
        assert scipy.stats.kstest(pool.markers[:, u], "norm").statistic < 0.01


def test_scenario_two_supports():
    pool = build_marker_pool(SimulationConfig(scenario="II", num_markers=5, pool_size=20_000), np.random.default_rng(3))
    x = pool.markers
    assert set(np.unique(x[:, 2])) == {0.0, 1.0}
    assert set(np.unique(x[:, 3])) == {0.0, 1.0} and set(np.unique(x[:, 4])) == {0.0, 1.0}
    assert not np.any((x[:, 3] == 1) & (x[:, 4] == 1))
    with pytest.raises(ConfigError):
        SimulationConfig(scenario="II", num_markers=4)


def test_scenario_three_correlation():
    pool = build_marker_pool(SimulationConfig(scenario="III", pool_size=100_000), np.random.default_rng(4))
    c = np.corrcoef(pool.markers.T)
    idx = np.arange(4)
    target = 0.5 ** np.abs(idx[:, None] - idx[None, :])
    assert np.max(np.abs(c - target)) < 0.02


def test_pool_is_seeded():
    cfg = SimulationConfig(pool_size=5000)
    a = build_marker_pool(cfg, np.random.default_rng(5))
    b = build_marker_pool(cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a.markers, b.markers)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_identity_emission_copies_states():
    cfg = SimulationConfig(n=50, emission=tuple(map(tuple, np.eye(4))), pool_size=5000, seed=1)
    st = make_study(cfg)
    for s, d in zip(st.train.subjects + st.test.subjects, st.train_states + st.test_states):
        np.testing.assert_array_equal(s.surrogate, d)


def test_final_state_constraint_and_sizes():
    cfg = SimulationConfig(n=60, pool_size=5000, seed=2)
    st = make_study(cfg)
    assert len(st.test) == 2 * len(st.train)
    for s, d in zip(st.train.subjects, st.train_states):
        assert s.final_state_known and s.final_state == d[-1] == s.surrogate[-1]
    for s in st.test.subjects:
        assert not s.final_state_known
        assert s.times[-1] < 7.0


def test_label_frequencies_match_emission_rows():
    cfg = SimulationConfig(pool_size=5000)
    rng = np.random.default_rng(9)
    pool = build_marker_pool(cfg, rng)
    cohort = generate_cohort(cfg, rng, pool, 13_000, 6.0, 10.0, False)
    z = np.concatenate([s.surrogate for s in cohort.data.subjects])
    d = np.concatenate(cohort.states)
    assert len(z) >= 100_000
    e = canonical_truth()[2].e
    for k in range(4):
        zk = z[d == k]
        freq = np.bincount(zk, minlength=4) / len(zk)
        se = np.sqrt(e[k] * (1 - e[k]) / len(zk))
        assert np.all(np.abs(freq - e[k]) <= 3 * se)


def test_study_is_seeded():
    cfg = SimulationConfig(n=30, pool_size=5000, seed=11)
    a, b = make_study(cfg), make_study(cfg)
    for s, t in zip(a.train.subjects + a.test.subjects, b.train.subjects + b.test.subjects):
        np.testing.assert_array_equal(s.times, t.times)
        np.testing.assert_array_equal(s.markers, t.markers)
        np.testing.assert_array_equal(s.surrogate, t.surrogate)
    np.testing.assert_array_equal(a.truth.discrim.eta, b.truth.discrim.eta)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimulationConfig(scenario="IV")
    with pytest.raises(ConfigError):
        SimulationConfig(num_markers=3)
    with pytest.raises(ConfigError):
        SimulationConfig(test_horizon=12.0)
