"""Time-varying multinomial logistic model.

``P(D = k | x, t)`` is proportional to ``exp(alpha_k(t) + beta_k @ x)`` for
``k >= 1`` and to 1 for the reference class 0, with ``alpha_k(t) =
eta_k @ B(t)``.  Fitting maximizes the row-weighted log-likelihood minus an
optional adaptive group lasso penalty ``lam * sum_u w_u ||beta_(u)||``,
where ``beta_(u)`` collects marker ``u``'s coefficients over all classes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .core_model import DiscriminativeParams
from .errors import ConfigError, DataError, OptimizationError
from .splines import SplineBasis, evaluate_basis

SEPARATION_THRESHOLD = 30.0


@dataclass(frozen=True)
class ClassProbabilities:
    probs: np.ndarray

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def linear_predictors(discrim: DiscriminativeParams, markers, times) -> np.ndarray:
    """``alpha_k(t) + beta_k @ x`` for k = 1..K, shape ``(N, K)``."""
    markers = np.atleast_2d(np.asarray(markers, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return evaluate_basis(discrim.basis, times) @ discrim.eta.T + markers @ discrim.beta.T


def softmax_with_reference(lin: np.ndarray) -> np.ndarray:
    """Append the zero reference predictor and normalize along the last axis."""
    full = np.concatenate([np.zeros(lin.shape[:-1] + (1,)), lin], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=-1, keepdims=True)
    return full


def class_probability_matrix(discrim: DiscriminativeParams, markers, times) -> np.ndarray:
    """Class probabilities for many (x, t) pairs; shape ``(N, K + 1)``."""
    return softmax_with_reference(linear_predictors(discrim, markers, times))


def class_probabilities(discrim: DiscriminativeParams, x, t: float) -> ClassProbabilities:
    x = np.asarray(x, dtype=float)
    if x.shape != (discrim.beta.shape[1],):
        raise DataError(f"marker vector must have length {discrim.beta.shape[1]}")
    return ClassProbabilities(class_probability_matrix(discrim, x[None], [t])[0])


@dataclass(frozen=True)
class PenaltyConfig:
    kind: str = "none"
    lam: float = 0.0
    adaptive_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "group_adaptive_lasso"):
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("penalty lambda must be finite and >= 0")
        if self.adaptive_weights is not None:
            w = np.array(self.adaptive_weights, dtype=float)
            if not (np.all(np.isfinite(w)) and np.all(w > 0)):
                raise ConfigError("adaptive weights must be finite and > 0")
            w.setflags(write=False)
            object.__setattr__(self, "adaptive_weights", w)

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def weights(self, p: int) -> np.ndarray:
        return np.ones(p) if self.adaptive_weights is None else self.adaptive_weights


NO_PENALTY = PenaltyConfig()


def adaptive_weights_from(beta_check: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """``1 / ||beta_check_(u)||`` per marker, with tiny norms floored."""
    norms = np.linalg.norm(np.atleast_2d(beta_check), axis=0)
    return 1.0 / np.maximum(norms, floor)


@dataclass(frozen=True)
class WeightedClassificationProblem:
    """Rows ``(t, x, w)`` where ``w`` holds nonnegative per-class weights.

    Posterior weights sum to one per row; integer multiples are allowed and
    act as row replication.
    """

    times: np.ndarray
    markers: np.ndarray
    weights: np.ndarray
    basis: SplineBasis = field(compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.markers, dtype=float).reshape(len(t), -1)
        w = np.asarray(self.weights, dtype=float)
        if len(t) == 0:
            raise DataError("classification problem has no rows")
        if w.shape[0] != len(t) or w.ndim != 2:
            raise DataError("weights must have one row per observation")
        if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
            raise DataError("weights must be finite and nonnegative")
        for name, a in (("times", t), ("markers", x), ("weights", w)):
            a = np.array(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def num_rows(self) -> int:
        return len(self.times)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def subset(self, rows) -> "WeightedClassificationProblem":
        return WeightedClassificationProblem(self.times[rows], self.markers[rows], self.weights[rows], self.basis)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class MultinomialFit(NamedTuple):
    params: DiscriminativeParams
    objective: float
    objective_trace: list
    stationarity: float
    iterations: int
    converged: bool
    separated: bool
    rank_deficient: bool


class _Design:
    """Standardized design ``[B(t), (x - mu) / sd]`` with conversions.

    Because the spline basis sums to one, centering the markers only shifts
    the unpenalized intercept coefficients, so the standardized problem is
    an exact reparametrization.
    """

    def __init__(self, problem: WeightedClassificationProblem):
        self.basis = problem.basis
        bmat = evaluate_basis(problem.basis, problem.times)
        x = problem.markers
        self.mu = x.mean(axis=0)
        sd = x.std(axis=0)
        self.sd = np.where(sd > 1e-12, sd, 1.0)
        self.F = np.hstack([bmat, (x - self.mu) / self.sd])
        self.J = bmat.shape[1]
        self.p = x.shape[1]
        self.W = problem.weights
        self.s = self.W.sum(axis=1)
        self.K = problem.num_classes - 1

    def to_std(self, d: DiscriminativeParams) -> np.ndarray:
        beta_s = d.beta * self.sd
        eta_s = d.eta + (d.beta @ self.mu)[:, None]
        return np.hstack([eta_s, beta_s])

    def from_std(self, theta: np.ndarray) -> DiscriminativeParams:
        beta = theta[:, self.J :] / self.sd
        eta = theta[:, : self.J] - (beta @ self.mu)[:, None]
        return DiscriminativeParams(eta, beta, self.basis)

    def lin(self, theta):
        return self.F @ theta.T

    def loglik(self, theta) -> tuple[float, np.ndarray, np.ndarray]:
        lin = self.lin(theta)
        full = np.concatenate([np.zeros((lin.shape[0], 1)), lin], axis=1)
        mx = full.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(full - mx).sum(axis=1))
        logp = full - lse[:, None]
        ll = float(np.sum(self.W * logp))
        return ll, np.exp(logp[:, 1:]), lin

    def gradient(self, P) -> np.ndarray:
        """Gradient of the negative log-likelihood, shape ``(K, F)``."""
        return -((self.W[:, 1:] - self.s[:, None] * P).T @ self.F)

    def hessian(self, P) -> np.ndarray:
        K, nf = self.K, self.F.shape[1]
        H = np.empty((K, nf, K, nf))
        for k in range(K):
            for l in range(k, K):
                c = self.s * ((P[:, k] if k == l else 0.0) - P[:, k] * P[:, l])
                blk = (self.F * c[:, None]).T @ self.F
                H[k, :, l, :] = blk
                H[l, :, k, :] = blk.T
        return H.reshape(K * nf, K * nf)


def _group_norms(theta, J):
    return np.linalg.norm(theta[:, J:], axis=0)


def _penalty_value(theta, J, lamw):
    if lamw is None:
        return 0.0
    return float(np.sum(lamw * _group_norms(theta, J)))


def _prox(theta, J, thresh):
    """Group soft-thresholding of the marker columns (eta untouched)."""
    out = theta.copy()
    norms = _group_norms(theta, J)
    scale = np.where(norms > thresh, 1.0 - thresh / np.where(norms > 0, norms, 1.0), 0.0)
    out[:, J:] = theta[:, J:] * scale
    return out


def _stationarity(g, theta, J, lamw):
    """Sup-norm of the minimal-norm subgradient of the penalized objective."""
    if lamw is None:
        return float(np.abs(g).max())
    res = np.abs(g[:, :J]).max() if J else 0.0
    gb = g[:, J:]
    norms = _group_norms(theta, J)
    for u in range(gb.shape[1]):
        if norms[u] > 0:
            v = gb[:, u] + lamw[u] * theta[:, J + u] / norms[u]
            res = max(res, float(np.abs(v).max()))
        else:
            gn = np.linalg.norm(gb[:, u])
            excess = max(0.0, gn - lamw[u])
            if excess > 0:
                res = max(res, float(np.abs(gb[:, u]).max() * excess / gn))
    return float(res)


def _solve_psd(H, rhs):
    ridge = 1e-10 * max(1.0, float(np.abs(np.diag(H)).max()))
    try:
        return scipy.linalg.solve(H + ridge * np.eye(len(H)), rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return np.linalg.lstsq(H, rhs, rcond=None)[0]


def _prox_newton_direction(H, g, theta, J, lamw):
    """Minimize the local quadratic model plus the group penalty.

    The unpenalized intercept block is eliminated through its Schur
    complement; the reduced marker problem is solved by accelerated
    proximal gradient.
    """
    K, nf = theta.shape
    idx = np.arange(K * nf).reshape(K, nf)
    ie, ib = idx[:, :J].ravel(), idx[:, J:].ravel()
    Hee, Heb, Hbb = H[np.ix_(ie, ie)], H[np.ix_(ie, ib)], H[np.ix_(ib, ib)]
    ge, gb = g.ravel()[ie], g.ravel()[ib]
    ridge = 1e-10 * max(1.0, float(np.abs(np.diag(Hee)).max()))
    cho = scipy.linalg.cho_factor(Hee + ridge * np.eye(len(ie)))
    X = scipy.linalg.cho_solve(cho, np.column_stack([Heb, ge]))
    Hred = Hbb - Heb.T @ X[:, :-1]
    gred = gb - Heb.T @ X[:, -1]
    Hred = 0.5 * (Hred + Hred.T)
    L = float(scipy.linalg.eigvalsh(Hred, subset_by_index=[len(Hred) - 1, len(Hred) - 1])[0])
    L = max(L, 1e-12)
    b0 = theta[:, J:].ravel().copy()
    p = theta.shape[1] - J

    def qgrad(b):
        return gred + Hred @ (b - b0)

    def prox(v):
        m = v.reshape(K, p)
        norms = np.linalg.norm(m, axis=0)
        th = lamw / L
        scale = np.where(norms > th, 1.0 - th / np.where(norms > 0, norms, 1.0), 0.0)
        return (m * scale).ravel()

    x = b0.copy()
    y = x.copy()
    tk = 1.0
    for _ in range(20000):
        x_new = prox(y - qgrad(y) / L)
        if np.max(np.abs(x_new - x)) <= 1e-13 * (1.0 + np.max(np.abs(x_new))):
            x = x_new
            break
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        # gradient-based restart keeps the iteration from oscillating
        if np.dot(y - x_new, x_new - x) > 0:
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + (tk - 1.0) / t_new * (x_new - x)
        x, tk = x_new, t_new
    db = x - b0
    de = -(X[:, -1] + X[:, :-1] @ db)
    d = np.empty(K * nf)
    d[ie], d[ib] = de, db
    return d.reshape(K, nf)


def _newton(design, theta, lamw, tol, max_iter):
    J = design.J
    ll, P, lin = design.loglik(theta)
    f = -ll + _penalty_value(theta, J, lamw)
    trace = [f]
    rank_def = False
    converged = False
    it = 0
    stat = np.inf
    for it in range(1, max_iter + 1):
        g = design.gradient(P)
        stat = _stationarity(g, theta, J, lamw)
        H = design.hessian(P)
        if lamw is None:
            d = -_solve_psd(H, g.ravel()).reshape(theta.shape)
            dec = float(np.sum(g * d))
        else:
            d = _prox_newton_direction(H, g, theta, J, lamw)
            dec = float(np.sum(g * d)) + _penalty_value(theta + d, J, lamw) - _penalty_value(theta, J, lamw)
        step_sup = float(np.abs(d).max())
        if stat <= tol and step_sup <= 1e-8 * (1.0 + np.abs(theta).max()):
            converged = True
            it -= 1
            break
        if dec >= 0:
            # model predicts no decrease: we are at numerical precision
            converged = stat <= tol
            it -= 1
            break
        step = 1.0
        accepted = False
        while step > 1e-12:
            cand = theta + step * d
            ll_c, P_c, lin_c = design.loglik(cand)
            if not np.isfinite(ll_c):
                raise OptimizationError("non-finite objective in multinomial fit", last_iterate=theta)
            f_c = -ll_c + _penalty_value(cand, J, lamw)
            if f_c <= f + 1e-4 * step * dec:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = stat <= tol
            it -= 1
            break
        theta, f, ll, P, lin = cand, f_c, ll_c, P_c, lin_c
        trace.append(f)
    else:
        g = design.gradient(P)
        stat = _stationarity(g, theta, J, lamw)
        converged = stat <= tol
    if it == 0 or not np.isfinite(stat):
        g = design.gradient(P)
        stat = _stationarity(g, theta, J, lamw)
    try:
        ev = np.linalg.eigvalsh(design.hessian(P))
        rank_def = bool(ev[0] <= 1e-10 * max(ev[-1], 1e-300))
    except np.linalg.LinAlgError:
        rank_def = True
    return theta, f, trace, stat, it, converged, rank_def, lin


def _fista(design, theta, lamw, tol, max_iter):
    """Monotone accelerated proximal gradient with backtracking."""
    J = design.J
    thresh_w = np.zeros(design.p) if lamw is None else lamw

    def smooth(th):
        ll, P, _ = design.loglik(th)
        return -ll, P

    f_s, P = smooth(theta)
    f = f_s + _penalty_value(theta, J, lamw)
    trace = [f]
    L = 1.0
    y, tk, x = theta.copy(), 1.0, theta.copy()
    converged = False
    stat = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        fy, Py = smooth(y)
        gy = design.gradient(Py)
        while True:
            z = _prox(y - gy / L, J, thresh_w / L)
            fz, Pz = smooth(z)
            diff = z - y
            if fz <= fy + np.sum(gy * diff) + 0.5 * L * np.sum(diff * diff) + 1e-12 * abs(fy):
                break
            L *= 2.0
        Fz = fz + _penalty_value(z, J, lamw)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        if Fz <= f:
            x_new, f_new = z, Fz
        else:
            x_new, f_new = x, f
        y = x_new + (tk / t_new) * (z - x_new) + ((tk - 1.0) / t_new) * (x_new - x)
        moved = np.abs(x_new - x).max()
        x, f, tk = x_new, f_new, t_new
        trace.append(f)
        L *= 0.9
        if it % 10 == 0 or moved < 1e-12:
            _, P = smooth(x)
            stat = _stationarity(design.gradient(P), x, J, lamw)
            if stat <= tol:
                converged = True
                break
    ll, P, lin = design.loglik(x)
    stat = _stationarity(design.gradient(P), x, J, lamw)
    return x, f, trace, stat, it, converged, False, lin


def fit_weighted_multinomial(
    problem: WeightedClassificationProblem,
    penalty: PenaltyConfig = NO_PENALTY,
    init: DiscriminativeParams | None = None,
    *,
    tol: float = 1e-7,
    max_iter: int = 100,
    solver: str = "auto",
) -> MultinomialFit:
    """Maximize the weighted log-likelihood minus the group penalty.

    Parameters
    ----------
    problem : WeightedClassificationProblem
    penalty : PenaltyConfig
        ``lam`` is on the scale of the summed (not averaged) log-likelihood.
    init : DiscriminativeParams, optional
        Warm start; zeros when omitted.
    tol : float
        Target sup-norm of the minimal subgradient, in standardized
        coordinates.
    solver : {"auto", "newton", "fista"}
        ``newton`` is a proximal Newton method with backtracking and is used
        by ``auto`` up to 400 coefficients; ``fista`` is monotone
        accelerated proximal gradient with backtracking.

    Returns
    -------
    MultinomialFit
        ``objective`` is the penalized negative log-likelihood at the
        returned parameters and ``objective_trace`` its value after every
        accepted iteration (nonincreasing).
    """
    design = _Design(problem)
    K = problem.num_classes - 1
    if init is None:
        init = DiscriminativeParams.zeros(K + 1, design.p, problem.basis)
    if init.eta.shape != (K, design.J) or init.beta.shape != (K, design.p):
        raise DataError("initial coefficients do not match the problem dimensions")
    theta = design.to_std(init)
    lamw = None
    if penalty.active:
        lamw = penalty.lam * penalty.weights(design.p) / design.sd
    if solver == "auto":
        solver = "newton" if K * design.F.shape[1] <= 400 else "fista"
    if solver == "newton":
        out = _newton(design, theta, lamw, tol, max_iter)
    elif solver == "fista":
        out = _fista(design, theta, lamw, tol, max(max_iter, 20000))
    else:
        raise ConfigError(f"unknown solver {solver!r}")
    theta, f, trace, stat, it, converged, rank_def, lin = out
    separated = bool(lin.size and np.abs(lin).max() > SEPARATION_THRESHOLD)
    return MultinomialFit(design.from_std(theta), float(f), trace, float(stat), it, converged, separated, rank_def)


def weighted_loglik(discrim: DiscriminativeParams, problem: WeightedClassificationProblem) -> float:
    P = class_probability_matrix(discrim, problem.markers, problem.times)
    with np.errstate(divide="ignore"):
        logp = np.log(P)
    return float(np.sum(np.where(problem.weights > 0, problem.weights * logp, 0.0)))


def penalized_objective(discrim, problem, penalty: PenaltyConfig) -> float:
    """Weighted log-likelihood minus penalty (to be maximized)."""
    val = weighted_loglik(discrim, problem)
    if penalty.active:
        val -= penalty.lam * float(np.sum(penalty.weights(discrim.beta.shape[1]) * discrim.group_norms()))
    return val


def loglik_gradient(discrim, problem) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the weighted log-likelihood w.r.t. (eta, beta)."""
    P = class_probability_matrix(discrim, problem.markers, problem.times)
    R = problem.weights[:, 1:] - problem.weights.sum(axis=1)[:, None] * P[:, 1:]
    B = evaluate_basis(problem.basis, problem.times)
    return R.T @ B, R.T @ problem.markers


def fit_intercept_only(problem, init=None, tol=1e-7) -> DiscriminativeParams:
    """Best fit with every marker coefficient held at zero."""
    reduced = WeightedClassificationProblem(problem.times, np.zeros((problem.num_rows, 1)), problem.weights, problem.basis)
    K = problem.num_classes - 1
    start = None
    if init is not None:
        start = DiscriminativeParams(init.eta, np.zeros((K, 1)), problem.basis)
    fit = fit_weighted_multinomial(reduced, NO_PENALTY, start, tol=tol)
    return DiscriminativeParams(fit.params.eta, np.zeros((K, problem.markers.shape[1])), problem.basis)


def lambda_max(problem, adaptive_weights=None, intercept_fit=None) -> float:
    """Smallest lambda at which every marker group is zero at the optimum."""
    base = intercept_fit if intercept_fit is not None else fit_intercept_only(problem)
    _, gb = loglik_gradient(base, problem)
    w = np.ones(problem.markers.shape[1]) if adaptive_weights is None else np.asarray(adaptive_weights)
    return float(np.max(np.linalg.norm(gb, axis=0) / w))


def lambda_grid(problem, adaptive_weights=None, num: int = 50, ratio: float = 1e-3) -> np.ndarray:
    """Increasing log-spaced grid from ``ratio * lambda_max`` to ``lambda_max``."""
    lmax = lambda_max(problem, adaptive_weights)
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(ratio * lmax, lmax, num)


class CVResult(NamedTuple):
    lam: float
    grid: np.ndarray
    mean_deviance: np.ndarray
    se_deviance: np.ndarray
    fold_deviance: np.ndarray
    best_index: int
    chosen_index: int


def stratified_folds(weights: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per row, stratified by each row's most heavily weighted class."""
    labels = np.argmax(weights, axis=1)
    fold = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.permutation(len(rows))]
        fold[rows] = (np.arange(len(rows)) + offset) % folds
        offset += len(rows)
    return fold


def cross_validate_lambda(
    problem: WeightedClassificationProblem,
    lambda_grid,
    folds: int,
    rng: np.random.Generator,
    adaptive_weights=None,
    init: DiscriminativeParams | None = None,
) -> CVResult:
    """K-fold cross-validation of lambda with the one-standard-error rule.

    Fold models are fit with lambda scaled by the fold's share of the total
    row weight so that the penalty-to-data balance matches the full fit.
    The held-out score is the weighted deviance per row.  Among all grid
    values whose mean deviance is within one standard error of the
    minimum, the largest is returned.
    """
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ConfigError("lambda grid must be a nonempty vector")
    if np.any(np.diff(grid) < 0):
        raise ConfigError("lambda grid must be sorted increasing")
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if problem.num_rows < folds:
        raise ConfigError(f"{problem.num_rows} rows cannot be split into {folds} folds")
    if len(grid) == 1:
        z = np.zeros(1)
        return CVResult(float(grid[0]), grid, z, z, np.zeros((folds, 1)), 0, 0)
    fold_id = stratified_folds(problem.weights, folds, rng)
    total = problem.weights.sum()
    dev = np.zeros((folds, len(grid)))
    p = problem.markers.shape[1]
    w = np.ones(p) if adaptive_weights is None else np.asarray(adaptive_weights, dtype=float)
    for f in range(folds):
        train = problem.subset(fold_id != f)
        test = problem.subset(fold_id == f)
        share = train.weights.sum() / total
        current = init
        for gi in range(len(grid) - 1, -1, -1):
            pen = PenaltyConfig("group_adaptive_lasso", float(grid[gi]) * share, w)
            current = fit_weighted_multinomial(train, pen, current).params
            dev[f, gi] = -2.0 * weighted_loglik(current, test) / test.num_rows
    mean = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / math.sqrt(folds)
    best = int(np.argmin(mean))
    ok = np.flatnonzero(mean <= mean[best] + se[best])
    chosen = int(ok.max())
    return CVResult(float(grid[chosen]), grid, mean, se, dev, best, chosen)
