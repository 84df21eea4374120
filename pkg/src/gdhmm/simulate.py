"""Synthetic cohorts with latent CTMC paths, pooled markers and noisy labels.

Markers are generated indirectly.  A large pool of candidate vectors is
drawn from the scenario's marker law and each receives a label from the
logistic model with zero intercepts.  A subject's marker vector at a visit
is then drawn from the pool group matching the latent state.  The induced
class probabilities are logistic in the markers with the same slopes and
a time-varying intercept determined by the state marginals and the pool
label frequencies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_model import (
    Dataset,
    DiscriminativeParams,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    ModelParams,
    SubjectRecord,
    TransitionIntensityMatrix,
)
from .ctmc import sample_ctmc_states
from .discriminative import softmax_with_reference
from .errors import ConfigError
from .kernel_marginal import hmm_marginals
from .splines import SplineBasis, build_basis, evaluate_basis

SCENARIOS = ("I", "II", "III")

CANONICAL_PI = (0.55, 0.2, 0.1, 0.15)
CANONICAL_RATES = {(0, 1): 0.08, (0, 2): 0.05, (0, 3): 0.03, (1, 3): 0.06, (2, 3): 0.06}
# rows: true state; columns: surrogate label.  Labels are noisy and drawn
# toward AD: LBD and the mixed state are labelled AD as often as correctly.
CANONICAL_EMISSION = (
    (0.40, 0.30, 0.15, 0.15),
    (0.15, 0.50, 0.15, 0.20),
    (0.10, 0.40, 0.40, 0.10),
    (0.10, 0.40, 0.10, 0.40),
)
CANONICAL_BETA = (
    (1.5, 1.5, -1.5, 1.5),
    (-1.5, 1.5, 1.5, -1.5),
    (1.5, -1.5, 1.5, 1.5),
)
NUM_SIGNAL = 4


def canonical_mask() -> np.ndarray:
    """Healthy may move to any disease state; AD or LBD alone may only move
    on to the mixed state, which is absorbing."""
    mask = np.zeros((4, 4), dtype=bool)
    for a, b in CANONICAL_RATES:
        mask[a, b] = True
    return mask


def canonical_truth(num_markers: int = 4, t_star: float = 10.0, emission=None, beta_scale: float = 1.0):
    """Default generative parameters (without the induced intercepts).

    Returns ``(init, intensity, emission, beta)``; ``beta`` has shape
    ``(3, num_markers)`` with the signal in the first four columns.
    """
    if num_markers < NUM_SIGNAL:
        raise ConfigError(f"the canonical truth needs at least {NUM_SIGNAL} markers")
    mask = canonical_mask()
    rho = np.zeros((4, 4))
    for (a, b), v in CANONICAL_RATES.items():
        rho[a, b] = v
    intensity = TransitionIntensityMatrix.from_rates(rho[mask], mask)
    beta = np.zeros((3, num_markers))
    beta[:, :NUM_SIGNAL] = np.asarray(CANONICAL_BETA) * beta_scale
    e = np.asarray(CANONICAL_EMISSION if emission is None else emission, dtype=float)
    return InitialDistribution(np.asarray(CANONICAL_PI)), intensity, EmissionMatrix(e), beta


@dataclass(frozen=True)
class SimulationConfig:
    """Study design.

    ``emission`` and ``beta_scale`` override the canonical truth; ``n`` is
    the training size and the test set has ``2 n`` subjects.
    """

    n: int = 200
    num_markers: int = 4
    scenario: str = "I"
    t_max: float = 10.0
    visits_train: float = 6.0
    visits_test: float = 3.0
    test_horizon: float = 7.0
    pool_size: int = 100_000
    ar_rho: float = 0.5
    emission: tuple | None = None
    beta_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not (self.t_max > self.test_horizon > 0):
            raise ConfigError("need t_max > test_horizon > 0")
        if self.pool_size < 1000:
            raise ConfigError("pool_size must be >= 1000")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.scenario == "II" and self.num_markers < 5:
            raise ConfigError("scenario II needs at least 5 markers (2 normal, 1 binary, 2 dummy columns)")
        if self.num_markers < NUM_SIGNAL:
            raise ConfigError(f"need at least {NUM_SIGNAL} markers")

    def truth(self):
        return canonical_truth(self.num_markers, self.t_max, self.emission, self.beta_scale)


def sample_visit_schedule(num_subjects: int, mean_extra: float, horizon: float, rng: np.random.Generator) -> list:
    """Visit times: ``2 + Poisson(mean_extra)`` visits, the first at 0 and
    the rest uniform on ``(0, horizon)``."""
    out = []
    for _ in range(num_subjects):
        m = 2 + int(rng.poisson(mean_extra))
        while True:
            t = np.sort(rng.uniform(0.0, horizon, m - 1))
            t = np.concatenate([[0.0], t])
            if np.all(np.diff(t) > 1e-9):
                break
        out.append(t)
    return out


def sample_markers(cfg: SimulationConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    p = cfg.num_markers
    if cfg.scenario == "I":
        return rng.standard_normal((size, p))
    if cfg.scenario == "III":
        idx = np.arange(p)
        cov = cfg.ar_rho ** np.abs(idx[:, None] - idx[None, :])
        return rng.standard_normal((size, p)) @ np.linalg.cholesky(cov).T
    x = rng.standard_normal((size, p))
    x[:, 2] = rng.binomial(1, 0.5, size)
    level = rng.integers(0, 3, size)
    x[:, 3] = level == 1
    x[:, 4] = level == 2
    return x


class MarkerPool(NamedTuple):
    markers: np.ndarray
    labels: np.ndarray
    groups: tuple
    label_freq: np.ndarray


def build_marker_pool(cfg: SimulationConfig, rng: np.random.Generator, beta=None) -> MarkerPool:
    """Pool of marker vectors labelled by the zero-intercept logistic model."""
    if beta is None:
        beta = cfg.truth()[3]
    S = beta.shape[0] + 1
    for _ in range(100):
        x = sample_markers(cfg, cfg.pool_size, rng)
        probs = softmax_with_reference(x @ beta.T)
        u = rng.uniform(size=(len(x), 1))
        labels = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), S - 1)
        counts = np.bincount(labels, minlength=S)
        if np.all(counts > 0):
            groups = tuple(np.flatnonzero(labels == k) for k in range(S))
            return MarkerPool(x, labels, groups, counts / counts.sum())
    raise ConfigError("could not populate every state group of the marker pool")


def induced_intercepts(init, intensity, label_freq, t) -> np.ndarray:
    """True ``alpha_k(t)`` implied by the pool construction, ``(len(t), K)``.

    ``alpha_k(t) = log(m_k(t) / f_k) - log(m_0(t) / f_0)`` with ``m`` the
    state marginal at ``t`` and ``f`` the pool label frequencies.
    """
    m = hmm_marginals(init.pi, intensity.rho, np.atleast_1d(t))
    a = np.log(m) - np.log(label_freq)
    return a[:, 1:] - a[:, :1]


def project_intercepts(init, intensity, label_freq, basis: SplineBasis, num: int = 2001) -> np.ndarray:
    """Least-squares spline coefficients of the induced intercepts."""
    grid = np.linspace(0.0, basis.t_star, num)
    B = evaluate_basis(basis, grid)
    a = induced_intercepts(init, intensity, label_freq, grid)
    return np.linalg.lstsq(B, a, rcond=None)[0].T


class Cohort(NamedTuple):
    data: Dataset
    states: list


def generate_cohort(
    cfg: SimulationConfig,
    rng: np.random.Generator,
    pool: MarkerPool,
    num_subjects: int,
    mean_extra: float,
    horizon: float,
    final_known: bool,
    id_prefix: str = "s",
) -> Cohort:
    """Subjects with latent paths, pooled markers and surrogate labels.

    With ``final_known`` the label at the last visit equals the latent
    state there; otherwise every label is an emission draw.
    """
    init, intensity, emission, _ = cfg.truth()
    e = emission.e
    S = len(init.pi)
    schedule = sample_visit_schedule(num_subjects, mean_extra, horizon, rng)
    subjects, states = [], []
    width = len(str(num_subjects))
    for i, times in enumerate(schedule):
        d = sample_ctmc_states(init, intensity, times, rng)
        rows = np.array([pool.groups[k][rng.integers(len(pool.groups[k]))] for k in d])
        x = pool.markers[rows]
        cum = np.cumsum(e[d], axis=1)
        z = np.minimum((rng.uniform(size=(len(d), 1)) > cum).sum(axis=1), S - 1)
        if final_known:
            z[-1] = d[-1]
        subjects.append(
            SubjectRecord(f"{id_prefix}{i:0{width}d}", times, x, z, final_known, int(d[-1]) if final_known else None)
        )
        states.append(d)
    dims = ModelDims(S, cfg.num_markers, cfg.t_max)
    return Cohort(Dataset(tuple(subjects), dims), states)


@dataclass
class Study:
    train: Dataset
    test: Dataset
    train_states: list
    test_states: list
    truth: ModelParams
    pool_label_freq: np.ndarray = field(repr=False)

    def true_alpha(self, t) -> np.ndarray:
        return induced_intercepts(self.truth.init, self.truth.intensity, self.pool_label_freq, t)


def make_study(cfg: SimulationConfig, rng: np.random.Generator | None = None) -> Study:
    """Training cohort of ``n`` subjects and a test cohort of ``2 n``.

    Training subjects have a known final state; test visits fall in
    ``[0, test_horizon)`` and carry only emitted labels.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    init, intensity, emission, beta = cfg.truth()
    pool = build_marker_pool(cfg, rng, beta)
    train = generate_cohort(cfg, rng, pool, cfg.n, cfg.visits_train, cfg.t_max, True, "tr")
    test = generate_cohort(cfg, rng, pool, 2 * cfg.n, cfg.visits_test, cfg.test_horizon, False, "te")
    basis = build_basis(cfg.n, cfg.t_max)
    eta = project_intercepts(init, intensity, pool.label_freq, basis)
    truth = ModelParams(
        ModelDims(4, cfg.num_markers, cfg.t_max), init, intensity, emission, DiscriminativeParams(eta, beta, basis), {"seed": cfg.seed}
    )
    return Study(train.data, test.data, train.states, test.states, truth, pool.label_freq)
