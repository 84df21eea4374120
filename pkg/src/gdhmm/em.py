"""Pseudo-EM fitting of the generative-discriminative hidden Markov model.

The E-step runs forward-backward recursions in which the usual marker
emission density is replaced by the ratio ``P(d | X) / P_hat(d)`` of the
discriminative class probability to a marginal state probability.  All
recursions are batched over subjects on a padded (subject, visit) grid and
carried out in log space.  Visits past a subject's end get identity
transitions and a zero log-factor, which leaves every quantity unchanged.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.optimize

from .core_model import (
    Dataset,
    DiscriminativeParams,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    ModelParams,
    StackedData,
    SubjectRecord,
    TransitionIntensityMatrix,
    full_mask,
    progressive_mask,
)
from .ctmc import IntervalTransitions, transition_stack
from .discriminative import (
    NO_PENALTY,
    PenaltyConfig,
    WeightedClassificationProblem,
    adaptive_weights_from,
    class_probability_matrix,
    cross_validate_lambda,
    fit_weighted_multinomial,
    lambda_grid,
    one_hot,
)
from .errors import ConfigError, DataError, FitError, GdhmmError, NumericalError
from .kernel_marginal import NadarayaWatson, default_bandwidth, hmm_marginals
from .splines import build_basis

LOG_RATE_MIN = math.log(1e-8)
LOG_RATE_MAX = math.log(1e3)


def logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


# ---------------------------------------------------------------- layout


class Layout:
    """Padded index structure of a dataset, built once per fit.

    Attributes
    ----------
    index : (n, m_max) int array of flat rows, -1 for padding
    valid : (n, m_max) bool
    intervals : flat list of (subject, visit) pairs with visit >= 1
    dts : elapsed time of each valid interval
    emit_rows : flat rows whose surrogate label is an emission draw (all
        visits except the final one of subjects with a known final state)
    final_rows : flat rows of known final states
    """

    def __init__(self, st: StackedData, num_states: int):
        self.st = st
        self.S = num_states
        self.n, self.m_max = st.index.shape
        self.N = len(st.times)
        self.index = st.index
        self.valid = st.index >= 0
        self.lengths = st.lengths
        iv = self.valid[:, 1:]
        self.int_subject, self.int_visit = np.nonzero(iv)
        self.int_visit = self.int_visit + 1
        rows = st.index[self.int_subject, self.int_visit]
        self.dts = st.times[rows] - st.times[rows - 1]
        last = st.index[np.arange(self.n), st.lengths - 1]
        self.final_rows = last[st.final_known]
        self.final_states = st.final_state[st.final_known]
        self.emit_rows = np.ones(self.N, dtype=bool)
        self.emit_rows[self.final_rows] = False
        self.has_z = st.surrogate >= 0
        self.first_rows = st.index[:, 0]
        self._transitions = None

    @property
    def transitions(self) -> IntervalTransitions:
        if self._transitions is None:
            self._transitions = IntervalTransitions(self.dts)
        return self._transitions

    def pad_rows(self, flat, fill=0.0):
        """Scatter an ``(N, ...)`` array onto the padded grid."""
        out = np.full((self.n, self.m_max) + flat.shape[1:], fill)
        out[self.valid] = flat[self.index[self.valid]]
        return out

    def pad_intervals(self, per_interval, fill):
        out = np.broadcast_to(fill, (self.n, self.m_max - 1) + per_interval.shape[1:]).copy()
        out[self.int_subject, self.int_visit - 1] = per_interval
        return out


def layout_for(subjects, num_states: int) -> Layout:
    return Layout(StackedData.from_subjects(list(subjects), num_states), num_states)


# ---------------------------------------------------------------- E-step


@dataclass
class EStepQuantities:
    """Forward-backward output on the padded grid.

    ``log_A`` and ``log_B`` hold the logarithms of the adaptive forward and
    backward tables; ``xi[:, j - 1]`` is the pairwise posterior of visits
    ``(j - 1, j)``.  Entries past each subject's length are padding.
    """

    log_A: np.ndarray
    log_B: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_norm: np.ndarray
    lengths: np.ndarray

    def subject(self, i: int) -> "SubjectEStep":
        m = int(self.lengths[i])
        return SubjectEStep(self.log_A[i, :m], self.log_B[i, :m], self.gamma[i, :m], self.xi[i, : m - 1], float(self.log_norm[i]))

    @property
    def total_log_norm(self) -> float:
        return float(np.sum(self.log_norm))


class SubjectEStep(NamedTuple):
    log_A: np.ndarray
    log_B: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_norm: float


def log_emission_terms(layout: Layout, e: np.ndarray) -> np.ndarray:
    """Per-visit log emission factor, shape ``(N, S)``.

    Ordinary visits contribute ``log e[d, Z]``; the final visit of a
    subject with a known final state contributes ``log I(d = D_m)``;
    visits without a surrogate label contribute 0.
    """
    out = np.zeros((layout.N, layout.S))
    rows = np.flatnonzero(layout.emit_rows & layout.has_z)
    out[rows] = safe_log(e[:, layout.st.surrogate[rows]].T)
    if len(layout.final_rows):
        ind = np.full((len(layout.final_rows), layout.S), -np.inf)
        ind[np.arange(len(layout.final_rows)), layout.final_states] = 0.0
        out[layout.final_rows] = ind
    return out


def log_marker_ratio(layout: Layout, class_probs: np.ndarray, marginals: np.ndarray) -> np.ndarray:
    """``log P(d | X) - log P_hat(d)`` per visit; zero marginals are errors."""
    bad = marginals <= 0
    if np.any(bad & (class_probs > 0)):
        r = int(np.argwhere(bad & (class_probs > 0))[0, 0])
        i, j = layout.st.subject[r], layout.st.visit[r]
        raise NumericalError(f"zero marginal state probability at subject index {i}, visit {j}, time {layout.st.times[r]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(class_probs) - np.log(marginals)
    return np.where(class_probs > 0, out, -np.inf)


def forward_backward(layout: Layout, log_pi, q_intervals, log_g) -> EStepQuantities:
    """Log-space forward-backward on the padded grid.

    Parameters
    ----------
    log_pi : (S,) array
    q_intervals : (num_intervals, S, S) transition matrices of the valid
        intervals in layout order
    log_g : (N, S) per-visit log factors (emission plus marker ratio)
    """
    S, n, M = layout.S, layout.n, layout.m_max
    lg = layout.pad_rows(log_g, 0.0)
    eye_log = np.where(np.eye(S, dtype=bool), 0.0, -np.inf)
    lq = layout.pad_intervals(safe_log(q_intervals), eye_log)
    log_A = np.empty((n, M, S))
    log_A[:, 0] = log_pi[None, :] + lg[:, 0]
    for j in range(1, M):
        log_A[:, j] = logsumexp(log_A[:, j - 1, :, None] + lq[:, j - 1], axis=1) + lg[:, j]
    log_B = np.zeros((n, M, S))
    for j in range(M - 2, -1, -1):
        log_B[:, j] = logsumexp(lq[:, j] + (lg[:, j + 1] + log_B[:, j + 1])[:, None, :], axis=2)
    log_norm = logsumexp(log_A[:, M - 1], axis=1)
    if not np.all(np.isfinite(log_norm)):
        i = int(np.flatnonzero(~np.isfinite(log_norm))[0])
        raise NumericalError(f"subject index {i} has zero adaptive likelihood under the current parameters")
    gamma = np.exp(log_A + log_B - log_norm[:, None, None])
    gamma /= gamma.sum(axis=2, keepdims=True)
    if M > 1:
        xi = np.exp(
            log_A[:, :-1, :, None]
            + lq
            + (lg[:, 1:] + log_B[:, 1:])[:, :, None, :]
            - log_norm[:, None, None, None]
        )
    else:
        xi = np.zeros((n, 0, S, S))
    return EStepQuantities(log_A, log_B, gamma, xi, log_norm, layout.lengths.copy())


def visit_log_factors(layout, params: ModelParams, marginals=None, c: float = 1.0) -> np.ndarray:
    """Emission plus marker-ratio log factor per visit.

    ``marginals=None`` drops the marker term (classical HMM).  ``c`` is the
    constant standing in for the unmodeled marker density; it rescales
    every visit's factor and cancels from all posteriors.
    """
    lg = log_emission_terms(layout, params.emission.e)
    if marginals is not None:
        st = layout.st
        probs = class_probability_matrix(params.discrim, st.markers, st.times)
        lg = lg + log_marker_ratio(layout, probs, marginals)
    if c != 1.0:
        lg = lg + math.log(c)
    return lg


def estep(layout: Layout, params: ModelParams, marginals=None, c: float = 1.0, q_intervals=None) -> EStepQuantities:
    if q_intervals is None:
        q_intervals = layout.transitions.compute(params.intensity.rho) if len(layout.dts) else np.zeros((0, layout.S, layout.S))
    lg = visit_log_factors(layout, params, marginals, c)
    return forward_backward(layout, safe_log(params.init.pi), q_intervals, lg)


def _single(subject: SubjectRecord, params: ModelParams, marginals, c=1.0):
    lay = layout_for([subject], params.dims.num_states)
    q = transition_stack(params.intensity, lay.dts) if len(lay.dts) else np.zeros((0, lay.S, lay.S))
    m = None if marginals is None else np.asarray(marginals, dtype=float).reshape(subject.num_visits, -1)
    return estep(lay, params, m, c, q).subject(0)


def adaptive_forward(subject: SubjectRecord, params: ModelParams, marginals) -> np.ndarray:
    """Log of the adaptive forward table, shape ``(m, K + 1)``.

    ``marginals`` holds ``P_hat(d)`` at each visit; pass None for the
    classical recursion without the marker ratio.
    """
    return _single(subject, params, marginals).log_A


def adaptive_backward(subject: SubjectRecord, params: ModelParams, marginals) -> np.ndarray:
    """Log of the adaptive backward table, shape ``(m, K + 1)``."""
    return _single(subject, params, marginals).log_B


def posterior_marginals(log_A, log_B) -> np.ndarray:
    log_norm = logsumexp(log_A[-1], axis=0)
    g = np.exp(log_A + log_B - log_norm)
    return g / g.sum(axis=1, keepdims=True)


def posterior_pairs(log_A, log_B, params: ModelParams, marginals, subject: SubjectRecord) -> np.ndarray:
    """Pairwise posteriors ``xi[j - 1, k, l] = P(D_{j-1} = k, D_j = l | data)``."""
    lay = layout_for([subject], params.dims.num_states)
    lg = visit_log_factors(lay, params, None if marginals is None else np.asarray(marginals, dtype=float))
    q = transition_stack(params.intensity, lay.dts)
    log_norm = logsumexp(log_A[-1], axis=0)
    return np.exp(log_A[:-1, :, None] + safe_log(q) + (lg[1:] + log_B[1:])[:, None, :] - log_norm)


# ---------------------------------------------------------------- M-step


def mstep_initial(gamma_first) -> InitialDistribution:
    """``pi_k = mean_i gamma_{i1k}``."""
    g = np.asarray(gamma_first, dtype=float)
    pi = g.mean(axis=0)
    return InitialDistribution(pi / pi.sum())


def mstep_emission(gamma_rows, surrogate, use_rows, previous: EmissionMatrix, diagnostics=None) -> EmissionMatrix:
    """Closed-form emission update from the visits flagged in ``use_rows``.

    A state with no posterior mass keeps its previous row.
    """
    gamma_rows = np.asarray(gamma_rows, dtype=float)
    S = gamma_rows.shape[1]
    use = np.asarray(use_rows, dtype=bool) & (np.asarray(surrogate) >= 0)
    g = gamma_rows[use]
    num = g.T @ one_hot(np.asarray(surrogate)[use], S)
    num = np.where(previous.feasible_mask, num, 0.0)
    den = num.sum(axis=1)
    e = np.array(previous.e, dtype=float)
    ok = den > 0
    e[ok] = num[ok] / den[ok, None]
    if not np.all(ok) and diagnostics is not None:
        diagnostics.append(f"emission rows {np.flatnonzero(~ok).tolist()} have no posterior mass; kept previous values")
    return EmissionMatrix(e, previous.feasible_mask)


def transition_objective(log_rates, weights, mask, transitions: IntervalTransitions) -> float:
    """``sum xi * log q`` over all intervals for the given free log-rates.

    Entries with zero weight contribute nothing; the floor on ``q`` only
    keeps ``0 * log 0`` finite.
    """
    rates = np.exp(np.clip(log_rates, LOG_RATE_MIN, LOG_RATE_MAX))
    rho = np.zeros(mask.shape)
    rho[mask] = rates
    np.fill_diagonal(rho, -rho.sum(axis=1))
    return transitions.weighted_log_sum(rho, weights)


class TransitionStep(NamedTuple):
    intensity: TransitionIntensityMatrix
    objective: float
    initial_objective: float
    improved: bool


def mstep_transition(
    weights, transitions: IntervalTransitions, r_init: TransitionIntensityMatrix, num_starts: int, rng: np.random.Generator,
    maxiter: int = 500, xatol: float = 1e-8, fatol: float = 1e-8,
) -> TransitionStep:
    """Maximize ``sum xi log q`` over the free log-rates by Nelder-Mead.

    Starts are ``r_init``, ``r_init`` shifted by +0.5 and -0.5 in log
    space with a small jitter, then uniform draws in ``[log 0.01, log 2]``;
    the first ``num_starts`` of these are run and the best result is kept.
    The returned objective is never below the value at ``r_init``.

    ``weights`` is ``(num_intervals, S, S)`` of pairwise posteriors.
    """
    mask = r_init.structure_mask
    nfree = int(mask.sum())
    if nfree == 0:
        return TransitionStep(r_init, 0.0, 0.0, False)
    weights = np.ascontiguousarray(weights, dtype=float)
    x0 = np.clip(np.log(np.maximum(r_init.free_rates, 1e-300)), LOG_RATE_MIN, LOG_RATE_MAX)
    starts = [x0]
    if num_starts >= 2:
        starts.append(x0 + 0.5 + rng.uniform(-0.1, 0.1, nfree))
    if num_starts >= 3:
        starts.append(x0 - 0.5 + rng.uniform(-0.1, 0.1, nfree))
    while len(starts) < num_starts:
        starts.append(rng.uniform(math.log(0.01), math.log(2.0), nfree))

    def neg(x):
        return -transition_objective(x, weights, mask, transitions)

    f0 = neg(x0)
    best_x, best_f = x0, f0
    for s in starts:
        res = scipy.optimize.minimize(
            neg, s, method="Nelder-Mead", options=dict(maxiter=maxiter, xatol=xatol, fatol=fatol)
        )
        if np.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = np.clip(res.x, LOG_RATE_MIN, LOG_RATE_MAX), float(res.fun)
    improved = best_f < f0
    out = TransitionIntensityMatrix.from_rates(np.exp(best_x), mask) if improved else r_init
    return TransitionStep(out, -best_f, -f0, improved)


def classification_problem(layout: Layout, gamma_rows, basis) -> WeightedClassificationProblem:
    st = layout.st
    return WeightedClassificationProblem(st.times, st.markers, gamma_rows, basis)


def mstep_discriminative(problem: WeightedClassificationProblem, penalty: PenaltyConfig, current: DiscriminativeParams):
    """Weighted multinomial logistic fit warm-started at ``current``.

    With the HMM marginal substituted for the kernel estimate, the
    marginal term does not depend on the logistic coefficients and drops
    out of this step.
    """
    return fit_weighted_multinomial(problem, penalty, current)


# ---------------------------------------------------------------- config / result


@dataclass(frozen=True)
class FitConfig:
    """Settings of the pseudo-EM fit.

    ``structure_mask`` is ``"full"``, ``"progressive"`` or a boolean
    matrix.  ``estep_marginal`` selects the marginal used in the E-step
    ratio (``"nw"`` or ``"hmm_dual"``).  Cross-validation of lambda runs
    at the first iteration only unless ``cv_every_iteration`` is set.
    """

    max_iter: int = 100
    tol: float = 1e-4
    num_starts: int = 5
    num_starts_warm: int = 1
    penalty: PenaltyConfig = NO_PENALTY
    cv: bool = False
    cv_folds: int = 5
    cv_every_iteration: bool = False
    lambda_grid_size: int = 50
    lambda_min_ratio: float = 1e-3
    seed: int = 0
    estep_marginal: str = "nw"
    refresh_marginal: bool = True
    bandwidth: float | None = None
    structure_mask: object = "full"
    spline_order: int = 4
    hmm_max_iter: int = 100

    def __post_init__(self):
        if not (isinstance(self.max_iter, (int, np.integer)) and self.max_iter >= 1):
            raise ConfigError("max_iter must be an integer >= 1")
        if not (self.tol > 0):
            raise ConfigError("tol must be > 0")
        if self.num_starts < 1 or self.num_starts_warm < 1:
            raise ConfigError("num_starts must be >= 1")
        if self.estep_marginal not in ("nw", "hmm_dual"):
            raise ConfigError(f"unknown marginal mode {self.estep_marginal!r}")
        if self.cv and self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be > 0")
        if self.spline_order < 1:
            raise ConfigError("spline_order must be >= 1")

    def mask_for(self, S: int) -> np.ndarray:
        m = self.structure_mask
        if isinstance(m, str):
            if m == "full":
                return full_mask(S)
            if m == "progressive":
                return progressive_mask(S)
            raise ConfigError(f"unknown structure mask {m!r}")
        m = np.asarray(m, dtype=bool)
        if m.shape != (S, S):
            raise ConfigError("structure mask shape does not match the number of states")
        return m & ~np.eye(S, dtype=bool)


@dataclass
class FitResult:
    params: ModelParams
    trace: list
    converged: bool
    iterations: int
    diagnostics: list = field(default_factory=list)
    lam: float | None = None
    cv: object = None
    estep: EStepQuantities | None = field(default=None, repr=False)


TRACE_COLUMNS = (
    "iteration",
    "d_pi",
    "d_rates",
    "d_emission",
    "d_eta",
    "d_beta",
    "loglik",
    "loglik_frozen_after",
    "objective",
    "objective_frozen_after",
    "lambda",
)


def parameter_vector_blocks(params: ModelParams) -> dict:
    return {
        "pi": params.init.pi,
        "rates": params.intensity.free_rates,
        "emission": params.emission.free_entries,
        "eta": params.discrim.eta.ravel() if params.discrim is not None else np.zeros(0),
        "beta": params.discrim.beta.ravel() if params.discrim is not None else np.zeros(0),
    }


def coordinate_changes(old: ModelParams, new: ModelParams) -> dict:
    """Per block, the largest coordinate-wise ``min(|d|, |d| / |old|)``."""
    out = {}
    a, b = parameter_vector_blocks(old), parameter_vector_blocks(new)
    for k in a:
        d = np.abs(b[k] - a[k])
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(d == 0, 0.0, d / np.abs(a[k]))
        out[k] = float(np.max(np.minimum(d, rel), initial=0.0))
    return out


def has_converged(changes: dict, tol: float) -> bool:
    return all(v < tol for v in changes.values())


def _penalty_value(penalty: PenaltyConfig, discrim) -> float:
    if not penalty.active or discrim is None:
        return 0.0
    return penalty.lam * float(np.sum(penalty.weights(discrim.beta.shape[1]) * discrim.group_norms()))


# ---------------------------------------------------------------- driver


def initialize(data: Dataset, cfg: FitConfig, hmm=None) -> ModelParams:
    """Starting values from a surrogate-only HMM and its Viterbi labels.

    The HMM fitted on (T, Z) supplies pi, R and the emission matrix; an
    unpenalized time-varying logistic fit of the decoded labels on the
    markers supplies the discriminative coefficients.  A previously fitted
    ``hmm`` (:class:`gdhmm.hmm_baseline.HmmParams`) is used as is.
    """
    from .hmm_baseline import fit_hmm, viterbi_labels

    st = data.stacked()
    z = st.surrogate[st.surrogate >= 0]
    if len(np.unique(z)) < 2:
        raise ConfigError("surrogate labels take a single value; the model is not identifiable")
    if hmm is None:
        hmm = fit_hmm(data, cfg)
    labels = viterbi_labels(hmm, data)
    basis = build_basis(data.n, data.dims.t_star, cfg.spline_order)
    problem = WeightedClassificationProblem(st.times, st.markers, one_hot(labels, data.dims.num_states), basis)
    disc = fit_weighted_multinomial(problem, NO_PENALTY).params
    return ModelParams(data.dims, hmm.init, hmm.intensity, hmm.emission, disc, {"seed": cfg.seed})


def _marginals(layout, params, cfg, nw):
    hmm = hmm_marginals(params.init.pi, params.intensity.rho, layout.st.times)
    if cfg.estep_marginal == "hmm_dual":
        return hmm
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return nw.marginals(params.discrim, fallback=hmm)


def fit(data: Dataset, cfg: FitConfig = FitConfig(), init: ModelParams | None = None) -> FitResult:
    """Run pseudo-EM from ``init`` (or :func:`initialize`).

    Each iteration computes marginals (kernel estimate by default), runs
    the adaptive E-step, then updates pi and the emission matrix in closed
    form, the intensities by Nelder-Mead and the logistic coefficients by
    weighted (optionally penalized) multinomial regression.  The adaptive
    log-likelihood is recomputed after the M-step with the marginals held
    fixed; this value can only go up, which the trace records.

    Raises
    ------
    FitError
        On a numerical failure; ``result`` holds the last completed state.
    """
    for s in data.subjects:
        if s.num_visits < 2:
            raise DataError(f"subject {s.subject_id} has fewer than two visits")
        if s.surrogate is None:
            raise DataError(f"subject {s.subject_id} has no surrogate labels")
    rng = np.random.default_rng(cfg.seed)
    S = data.dims.num_states
    layout = Layout(data.stacked(), S)
    params = init if init is not None else initialize(data, cfg)
    mask = cfg.mask_for(S)
    if not np.array_equal(params.intensity.structure_mask, mask):
        rho = np.where(mask, params.intensity.rho, 0.0)
        params = params.replace(intensity=TransitionIntensityMatrix.from_rates(rho[mask], mask))
    bw = cfg.bandwidth if cfg.bandwidth is not None else default_bandwidth(data.n, data.dims.t_star)
    nw = NadarayaWatson(layout.st.times, layout.st.markers, layout.st.times, bw) if cfg.estep_marginal == "nw" else None
    result = FitResult(params, [], False, 0, [])
    penalty = cfg.penalty
    lam = penalty.lam if penalty.active or penalty.kind != "none" else None
    cv_res = None
    marg = None
    prev_loglik = None
    try:
        for it in range(1, cfg.max_iter + 1):
            if marg is None or cfg.refresh_marginal:
                marg = _marginals(layout, params, cfg, nw)
            E = estep(layout, params, marg)
            loglik = E.total_log_norm
            # row-major order of the valid cells is the flat visit order
            gamma_rows = E.gamma[layout.valid]

            pi = mstep_initial(E.gamma[:, 0])
            emis = mstep_emission(gamma_rows, layout.st.surrogate, layout.emit_rows, params.emission, result.diagnostics)
            xi_w = E.xi[layout.int_subject, layout.int_visit - 1]
            ts = mstep_transition(xi_w, layout.transitions, params.intensity, cfg.num_starts if it == 1 else cfg.num_starts_warm, rng)
            if not ts.improved and it == 1:
                result.diagnostics.append(f"iteration {it}: no transition start improved on the current intensities")

            problem = classification_problem(layout, gamma_rows, params.discrim.basis)
            it_penalty = NO_PENALTY
            if penalty.kind != "none":
                if it == 1:
                    beta_check = params.discrim.beta
                else:
                    beta_check = fit_weighted_multinomial(problem, NO_PENALTY, params.discrim).params.beta
                w = adaptive_weights_from(beta_check) if penalty.adaptive_weights is None else penalty.adaptive_weights
                if cfg.cv and (cv_res is None or cfg.cv_every_iteration):
                    grid = lambda_grid(problem, w, cfg.lambda_grid_size, cfg.lambda_min_ratio)
                    cv_res = cross_validate_lambda(problem, grid, cfg.cv_folds, rng, w, params.discrim)
                    lam = cv_res.lam
                it_penalty = PenaltyConfig(penalty.kind, float(lam), w)
            mfit = mstep_discriminative(problem, it_penalty, params.discrim)
            if mfit.separated:
                result.diagnostics.append(f"iteration {it}: possible complete separation in the logistic step")

            new = params.replace(init=pi, intensity=ts.intensity, emission=emis, discrim=mfit.params)
            E_after = estep(layout, new, marg)
            ll_after = E_after.total_log_norm
            obj_before = loglik - _penalty_value(it_penalty, params.discrim)
            obj_after = ll_after - _penalty_value(it_penalty, mfit.params)
            if obj_after < obj_before - 1e-8 * max(1.0, abs(obj_before)):
                result.diagnostics.append(
                    f"iteration {it}: frozen-marginal objective decreased by {obj_before - obj_after:.3g}"
                )
            if prev_loglik is not None and loglik < prev_loglik - 1e-4:
                result.diagnostics.append(
                    f"iteration {it}: adaptive log-likelihood fell by {prev_loglik - loglik:.3g} after refreshing marginals"
                )
            prev_loglik = ll_after
            ch = coordinate_changes(params, new)
            result.trace.append(
                {
                    "iteration": it,
                    "d_pi": ch["pi"],
                    "d_rates": ch["rates"],
                    "d_emission": ch["emission"],
                    "d_eta": ch["eta"],
                    "d_beta": ch["beta"],
                    "loglik": loglik,
                    "loglik_frozen_after": ll_after,
                    "objective": obj_before,
                    "objective_frozen_after": obj_after,
                    "lambda": float(lam) if lam is not None else float("nan"),
                }
            )
            params = new
            result.params, result.iterations, result.estep = params, it, E_after
            if has_converged(ch, cfg.tol):
                result.converged = True
                break
    except GdhmmError as exc:
        raise FitError(f"fit failed at iteration {result.iterations + 1}: {exc}", result) from exc
    result.lam = None if lam is None else float(lam)
    result.cv = cv_res
    meta = dict(params.metadata)
    meta.update(seed=cfg.seed, iterations=result.iterations, converged=result.converged)
    if result.lam is not None:
        meta["lambda"] = result.lam
    result.params = params.replace(metadata=meta)
    return result


def adaptive_loglik(data: Dataset, params: ModelParams, marginals=None) -> float:
    """Sum over subjects of ``log sum_d A_m(d)``."""
    layout = Layout(data.stacked(), data.dims.num_states)
    return estep(layout, params, marginals).total_log_norm
