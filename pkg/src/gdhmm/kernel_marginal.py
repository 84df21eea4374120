"""Estimators of the marginal state probabilities ``P(D(t) = k)``.

Two estimators are provided: a Nadaraya-Watson average of the
discriminative class probabilities over all observed markers, and the
HMM form ``pi @ exp(t R)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core_model import Dataset, DiscriminativeParams, InitialDistribution
from .ctmc import IntervalTransitions, NumericalQualityWarning, matrix_exponential
from .discriminative import class_probability_matrix, softmax_with_reference
from .errors import ConfigError, DomainError
from .splines import evaluate_basis

# above this total exponent the factorized NW evaluation could overflow
_FACTOR_LIMIT = 600.0


class EmptyKernelWindowWarning(NumericalQualityWarning):
    pass


@dataclass(frozen=True)
class KernelConfig:
    """Epanechnikov smoothing with a fixed bandwidth in time units."""

    bandwidth: float

    def __post_init__(self):
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ConfigError("bandwidth must be positive and finite")


def default_bandwidth(n: int, t_star: float) -> float:
    """``t_star * n ** (-1/5)``."""
    if n < 1:
        raise ConfigError("sample size must be >= 1")
    return float(t_star) * float(n) ** -0.2


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(out) if out.ndim == 0 else out


def hmm_state_marginal(init, r, t: float) -> np.ndarray:
    """``pi @ exp(t R)``."""
    if not (np.isfinite(t) and t >= 0):
        raise DomainError("time must be finite and >= 0")
    pi = init.pi if isinstance(init, InitialDistribution) else np.asarray(init, dtype=float)
    rho = r.rho if hasattr(r, "rho") else np.asarray(r, dtype=float)
    out = np.clip(pi @ matrix_exponential(t * rho), 0.0, None)
    return out / out.sum()


def hmm_marginals(pi, rho, times, transitions: IntervalTransitions | None = None) -> np.ndarray:
    """HMM marginals at many times; shape ``(len(times), S)``."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise DomainError("times must be >= 0")
    qs = transitions.compute(rho) if transitions is not None else np.clip(
        matrix_exponential(times[:, None, None] * np.asarray(rho)), 0.0, 1.0
    )
    out = np.clip(np.einsum("s,nsk->nk", np.asarray(pi, dtype=float), qs), 0.0, None)
    return out / out.sum(axis=1, keepdims=True)


class NadarayaWatson:
    """Kernel average of class probabilities for fixed observation times.

    For a query time ``t`` the estimate of ``P(D(t) = k)`` is the
    kernel-weighted mean over all observations ``(T', X')`` of
    ``P(k | X', t)``, i.e. the marker part of the linear predictor comes
    from the observation and the intercept from the query time.  Kernel
    weights depend only on times and are computed once.

    Parameters
    ----------
    obs_times, obs_markers : array_like
        Pooled observations, shapes ``(N,)`` and ``(N, p)``.
    query_times : array_like
        Times at which the marginals are wanted.
    bandwidth : float
    chunk : int
        Number of query rows processed at once.
    """

    def __init__(self, obs_times, obs_markers, query_times, bandwidth: float, chunk: int = 1024):
        KernelConfig(bandwidth)
        self.obs_times = np.asarray(obs_times, dtype=float)
        self.obs_markers = np.atleast_2d(np.asarray(obs_markers, dtype=float))
        self.query_times = np.asarray(query_times, dtype=float)
        self.bandwidth = float(bandwidth)
        self.chunk = chunk
        u = (self.query_times[:, None] - self.obs_times[None, :]) / self.bandwidth
        self.kernel = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
        self.weight_sums = self.kernel.sum(axis=1)
        self.empty = self.weight_sums <= 0

    def marginals(self, discrim: DiscriminativeParams, fallback=None) -> np.ndarray:
        """Marginals at every query time, shape ``(Q, K + 1)``.

        Queries with no observation inside the kernel window take the
        matching row of ``fallback`` (a ``(Q, K + 1)`` array, typically HMM
        marginals) and raise :class:`EmptyKernelWindowWarning`.
        """
        alpha = evaluate_basis(discrim.basis, self.query_times) @ discrim.eta.T
        xb = self.obs_markers @ discrim.beta.T
        S = alpha.shape[1] + 1
        out = np.empty((len(self.query_times), S))
        if max(alpha.max(initial=0.0), 0.0) + max(xb.max(initial=0.0), 0.0) <= _FACTOR_LIMIT and min(
            alpha.min(initial=0.0), 0.0
        ) + min(xb.min(initial=0.0), 0.0) >= -_FACTOR_LIMIT:
            # P_k = a_k b_k / (1 + sum_d a_d b_d) with a = exp(alpha), b = exp(x beta)
            a = np.exp(alpha)
            b = np.exp(xb)
            for lo in range(0, len(out), self.chunk):
                hi = min(lo + self.chunk, len(out))
                m = self.kernel[lo:hi] / (1.0 + a[lo:hi] @ b.T)
                out[lo:hi, 0] = m.sum(axis=1)
                out[lo:hi, 1:] = a[lo:hi] * (m @ b)
        else:
            for q in range(len(out)):
                w = self.kernel[q]
                nz = np.flatnonzero(w)
                p = softmax_with_reference(alpha[q][None, :] + xb[nz])
                out[q] = w[nz] @ p
        with np.errstate(invalid="ignore", divide="ignore"):
            out /= self.weight_sums[:, None]
        if np.any(self.empty):
            idx = np.flatnonzero(self.empty)
            if fallback is None:
                raise DomainError(f"no observation within the bandwidth of time {self.query_times[idx[0]]}")
            warnings.warn(
                f"{len(idx)} query times have an empty kernel window; using the fallback marginal",
                EmptyKernelWindowWarning,
                stacklevel=2,
            )
            out[idx] = np.asarray(fallback)[idx]
        out = np.clip(out, 0.0, None)
        return out / out.sum(axis=1, keepdims=True)


def nw_state_marginal(
    data: Dataset, discrim: DiscriminativeParams, cfg: KernelConfig, query_time: float, fallback=None
) -> np.ndarray:
    """Nadaraya-Watson marginal at one query time.

    ``fallback`` is an ``(init, intensity)`` pair used when no observation
    lies within the bandwidth.
    """
    st = data.stacked()
    nw = NadarayaWatson(st.times, st.markers, [query_time], cfg.bandwidth)
    fb = None
    if fallback is not None:
        fb = hmm_state_marginal(fallback[0], fallback[1], query_time)[None, :]
    return nw.marginals(discrim, fb)[0]


def nw_state_marginal_direct(obs_times, obs_markers, discrim, bandwidth, query_time) -> np.ndarray:
    """Straightforward evaluation used to cross-check :class:`NadarayaWatson`."""
    obs_times = np.asarray(obs_times, dtype=float)
    w = epanechnikov((query_time - obs_times) / bandwidth)
    probs = class_probability_matrix(discrim, obs_markers, np.full(len(obs_times), float(query_time)))
    return (w @ probs) / w.sum()
