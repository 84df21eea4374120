"""Continuous-time Markov chain numerics.

Matrix exponentials use scaling and squaring around a fixed degree-13
Pade approximant.  For the many-interval case the map ``dt -> exp(dt R)``
is additionally interpolated in Chebyshev polynomials of ``dt``, which
needs only a few dozen exponentials per generator instead of one per
interval.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .core_model import InitialDistribution, TransitionIntensityMatrix
from .errors import DomainError

_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152
CLAMP_WARN = 1e-12


class NumericalQualityWarning(UserWarning):
    pass


def _pade13(a: np.ndarray) -> np.ndarray:
    b = _PADE13
    eye = np.eye(a.shape[-1])
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
    # I + 2 (v - u)^-1 u equals (v - u)^-1 (v + u) and is exact at a = 0
    return eye + 2.0 * np.linalg.solve(v - u, u)


def _expm_stack(a: np.ndarray) -> np.ndarray:
    norms = np.abs(a).sum(axis=-2).max(axis=-1)
    s = np.zeros(norms.shape, dtype=np.int64)
    big = norms > _THETA13
    s[big] = np.ceil(np.log2(norms[big] / _THETA13)).astype(np.int64)
    out = np.empty_like(a)
    for sv in np.unique(s):
        sel = s == sv
        r = _pade13(a[sel] / 2.0**sv)
        for _ in range(int(sv)):
            r = r @ r
        out[sel] = r
    return out


def matrix_exponential(m) -> np.ndarray:
    """exp(m) for a square matrix, or a stack of them along leading axes."""
    a = np.asarray(m, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DomainError("matrix_exponential needs square matrices")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix_exponential needs finite entries")
    if a.ndim == 2:
        return _expm_stack(a[None])[0]
    flat = a.reshape(-1, *a.shape[-2:])
    return _expm_stack(flat).reshape(a.shape)


def taylor_exponential(m, terms: int = 50) -> np.ndarray:
    """Truncated power series; only meant as a check for small norms."""
    a = np.asarray(m, dtype=float)
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    return out


def _clamp(q: np.ndarray) -> np.ndarray:
    lo, hi = q.min(), q.max()
    if lo < -CLAMP_WARN or hi > 1 + CLAMP_WARN:
        warnings.warn(
            f"transition probabilities outside [0,1] by {max(-lo, hi - 1):.3g}", NumericalQualityWarning, stacklevel=3
        )
    return np.clip(q, 0.0, 1.0)


@dataclass(frozen=True)
class TransitionProbabilityMatrix:
    q: np.ndarray
    dt: float


def _rho(r) -> np.ndarray:
    return r.rho if isinstance(r, TransitionIntensityMatrix) else np.asarray(r, dtype=float)


def transition_probability(r, dt: float) -> TransitionProbabilityMatrix:
    """Interval transition matrix ``exp(dt R)``."""
    if not np.isfinite(dt) or dt < 0:
        raise DomainError(f"elapsed time must be finite and >= 0, got {dt}")
    q = _clamp(matrix_exponential(dt * _rho(r)))
    q.setflags(write=False)
    return TransitionProbabilityMatrix(q, float(dt))


def transition_stack(r, dts) -> np.ndarray:
    """``exp(dt R)`` for every entry of ``dts``; shape ``(len(dts), S, S)``."""
    dts = np.asarray(dts, dtype=float)
    if np.any(dts < 0) or not np.all(np.isfinite(dts)):
        raise DomainError("elapsed times must be finite and >= 0")
    rho = _rho(r)
    return _clamp(matrix_exponential(dts[:, None, None] * rho))


@lru_cache(maxsize=64)
def _cheb_nodes(deg: int):
    k = np.arange(deg + 1)
    x = np.cos(np.pi * (k + 0.5) / (deg + 1))
    # coefficients c = F @ values, with the usual halving of c_0
    tk = np.cos(np.outer(np.arange(deg + 1), np.pi * (k + 0.5) / (deg + 1)))
    f = 2.0 / (deg + 1) * tk
    f[0] *= 0.5
    return x, f


@numba.njit(cache=True)
def _mm(a, b, out):
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc


@numba.njit(cache=True)
def _solve_inplace(m, rhs):
    """Gaussian elimination with partial pivoting; ``rhs`` is overwritten."""
    n = m.shape[0]
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(m[r, c]) > abs(m[p, c]):
                p = r
        if p != c:
            for j in range(n):
                m[c, j], m[p, j] = m[p, j], m[c, j]
                rhs[c, j], rhs[p, j] = rhs[p, j], rhs[c, j]
        piv = m[c, c]
        for r in range(c + 1, n):
            f = m[r, c] / piv
            if f != 0.0:
                for j in range(c, n):
                    m[r, j] -= f * m[c, j]
                for j in range(n):
                    rhs[r, j] -= f * rhs[c, j]
    for c in range(n - 1, -1, -1):
        for j in range(n):
            acc = rhs[c, j]
            for k in range(c + 1, n):
                acc -= m[c, k] * rhs[k, j]
            rhs[c, j] = acc / m[c, c]


@numba.njit(cache=True)
def _cheb_node_exponentials(rho, tnodes, b):
    """``exp(t R)`` at every node with one scaling exponent (compiled).

    Same degree-13 Pade scheme as :func:`matrix_exponential`, written with
    explicit loops because the matrices are tiny.
    """
    S = rho.shape[0]
    norm = 0.0
    for j in range(S):
        c = 0.0
        for i in range(S):
            c += abs(rho[i, j])
        norm = max(norm, c)
    norm *= tnodes.max()
    s = 0
    if norm > 5.371920351148152:
        s = int(np.ceil(np.log2(norm / 5.371920351148152)))
    out = np.empty((len(tnodes), S, S))
    a = np.empty((S, S))
    a2 = np.empty((S, S))
    a4 = np.empty((S, S))
    a6 = np.empty((S, S))
    t1 = np.empty((S, S))
    t2 = np.empty((S, S))
    u = np.empty((S, S))
    v = np.empty((S, S))
    for k in range(len(tnodes)):
        scale = tnodes[k] / 2.0**s
        for i in range(S):
            for j in range(S):
                a[i, j] = rho[i, j] * scale
        _mm(a, a, a2)
        _mm(a2, a2, a4)
        _mm(a4, a2, a6)
        for i in range(S):
            for j in range(S):
                t1[i, j] = b[13] * a6[i, j] + b[11] * a4[i, j] + b[9] * a2[i, j]
        _mm(a6, t1, t2)
        for i in range(S):
            for j in range(S):
                t2[i, j] += b[7] * a6[i, j] + b[5] * a4[i, j] + b[3] * a2[i, j] + (b[1] if i == j else 0.0)
        _mm(a, t2, u)
        for i in range(S):
            for j in range(S):
                t1[i, j] = b[12] * a6[i, j] + b[10] * a4[i, j] + b[8] * a2[i, j]
        _mm(a6, t1, v)
        for i in range(S):
            for j in range(S):
                v[i, j] += b[6] * a6[i, j] + b[4] * a4[i, j] + b[2] * a2[i, j] + (b[0] if i == j else 0.0)
        for i in range(S):
            for j in range(S):
                t1[i, j] = v[i, j] - u[i, j]
                t2[i, j] = v[i, j] + u[i, j]
        _solve_inplace(t1, t2)
        for _ in range(s):
            _mm(t2, t2, t1)
            t2[:, :] = t1
        out[k] = t2
    return out


_PADE13_ARR = np.array(_PADE13)


class IntervalTransitions:
    """Evaluates ``exp(dt R)`` on a fixed set of intervals for many ``R``.

    The interval lengths are fixed at construction; :meth:`compute`
    interpolates ``dt -> exp(dt R)`` on ``[0, max dt]`` by a Chebyshev
    expansion whose degree grows with ``||R|| * max dt``.  The map is
    entire, so its Chebyshev coefficients decay faster than geometrically;
    the degree is raised until the last two coefficients are below
    ``tail_tol``, which bounds the interpolation error at the same level.
    Small interval sets use direct exponentials.
    """

    direct_below = 48
    tail_tol = 5e-14
    max_degree = 512

    def __init__(self, dts):
        self.dts = np.asarray(dts, dtype=float)
        if np.any(self.dts < 0):
            raise DomainError("elapsed times must be >= 0")
        self.tmax = float(self.dts.max()) if len(self.dts) else 0.0
        self._x = 2.0 * self.dts / self.tmax - 1.0 if self.tmax > 0 else np.zeros_like(self.dts)
        self._vander: dict[int, np.ndarray] = {}

    def _vand(self, deg: int) -> np.ndarray:
        v = self._vander.get(deg)
        if v is None:
            v = np.polynomial.chebyshev.chebvander(self._x, deg)
            self._vander[deg] = v
        return v

    def _coefficients(self, rho):
        """Chebyshev coefficients ``(deg + 1, S * S)`` of ``dt -> exp(dt R)``."""
        c = 0.5 * self.tmax * np.abs(rho).sum(axis=0).max()
        deg = int(min(max(14, np.ceil(1.5 * c + 16)), self.max_degree))
        S = rho.shape[0]
        while True:
            xn, f = _cheb_nodes(deg)
            vals = _cheb_node_exponentials(rho, (xn + 1.0) * 0.5 * self.tmax, _PADE13_ARR)
            coef = f @ vals.reshape(deg + 1, S * S)
            if np.abs(coef[-2:]).max() <= self.tail_tol or deg >= self.max_degree:
                return deg, coef
            deg = min(int(1.5 * deg) + 1, self.max_degree)

    def _direct(self) -> bool:
        return len(self.dts) <= self.direct_below or self.tmax == 0

    def compute(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        S = rho.shape[0]
        if self._direct():
            return np.clip(matrix_exponential(self.dts[:, None, None] * rho), 0.0, 1.0)
        deg, coef = self._coefficients(rho)
        q = (self._vand(deg) @ coef).reshape(-1, S, S)
        return np.clip(q, 0.0, 1.0)

    def weighted_log_sum(self, rho, weights, floor: float = 1e-300) -> float:
        """``sum w * log(max(q, floor))`` over all intervals and entries.

        Same value as reducing the output of :meth:`compute`, with fewer
        temporaries.
        """
        rho = np.asarray(rho, dtype=float)
        S = rho.shape[0]
        w = np.ascontiguousarray(weights, dtype=float).reshape(len(self.dts), S * S)
        if self._direct():
            q = self.compute(rho).reshape(len(self.dts), S * S)
            return float(np.sum(np.where(w != 0, w * np.log(np.maximum(q, floor)), 0.0)))
        deg, coef = self._coefficients(rho)
        q = self._vand(deg) @ coef
        np.clip(q, floor, 1.0, out=q)
        np.log(q, out=q)
        return float(np.vdot(w, q))


def sample_ctmc_states(init: InitialDistribution, r, times, rng: np.random.Generator) -> np.ndarray:
    """Latent states at the given visit times.

    The first state is drawn from ``init``; each later state from the row of
    ``exp((t_j - t_{j-1}) R)`` indexed by the previous state.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise DomainError("times must be a nonempty vector")
    if np.any(np.diff(times) <= 0):
        raise DomainError("times must be strictly increasing")
    pi = np.asarray(init.pi if isinstance(init, InitialDistribution) else init, dtype=float)
    S = len(pi)
    states = np.empty(len(times), dtype=np.int64)
    states[0] = rng.choice(S, p=pi / pi.sum())
    if len(times) > 1:
        qs = transition_stack(r, np.diff(times))
        for j in range(1, len(times)):
            row = qs[j - 1, states[j - 1]]
            states[j] = rng.choice(S, p=row / row.sum())
    return states
