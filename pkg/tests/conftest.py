import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gdhmm.evaluation import default_fit_config, run_benchmark  # noqa: E402
from gdhmm.simulate import SimulationConfig, make_study  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def canonical_study_200():
    return make_study(SimulationConfig(n=200, seed=2024))


@pytest.fixture(scope="session")
def small_study():
    return make_study(SimulationConfig(n=40, seed=7, pool_size=5000))


_BENCH_CACHE = {}


def cached_benchmark(n, p, reps, methods, seed):
    """Benchmarks shared between acceptance tests within one session."""
    key = (n, p, reps, tuple(methods), seed)
    if key not in _BENCH_CACHE:
        sim = SimulationConfig(n=n, num_markers=p)
        _BENCH_CACHE[key] = run_benchmark(sim, reps, methods, default_fit_config(sim), seed=seed)
    return _BENCH_CACHE[key]
