"""Marker-only prediction: pointwise posterior rule and adaptive Viterbi.

The Viterbi recursion starts from ``log P(d | X_1, t_1)`` and adds
``log P(d | X_j, t_j) - log P_hat(d, t_j)`` plus the best log transition
at each later visit.  ``P_hat`` is the HMM marginal ``pi @ exp(t R)``.
Future visits without markers contribute a zero ratio term.  Ties always go
to the lowest state index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import Dataset, ModelParams
from .ctmc import transition_stack
from .discriminative import ClassProbabilities, class_probabilities, class_probability_matrix
from .errors import DataError, DomainError, NumericalError
from .kernel_marginal import hmm_marginals


@dataclass(frozen=True)
class ViterbiResult:
    """Most probable state sequence.

    ``delta[j, d]`` is the best log score of a path ending in ``d`` at
    visit ``j``; ``psi[j, d]`` is its predecessor state (-1 at the first
    visit).
    """

    path: np.ndarray
    log_prob: float
    delta: np.ndarray
    psi: np.ndarray


def posterior_predict(params: ModelParams, x, t: float) -> tuple[ClassProbabilities, int]:
    """Class probabilities at ``(x, t)`` and their argmax (lowest index on ties)."""
    cp = class_probabilities(params.discrim, x, t)
    return cp, cp.argmax


def posterior_predict_dataset(params: ModelParams, data: Dataset) -> np.ndarray:
    """Class probabilities at every visit, stacked by subject; ``(N, K + 1)``."""
    st = data.stacked()
    return class_probability_matrix(params.discrim, st.markers, st.times)


def viterbi_core(first, log_q, log_g) -> ViterbiResult:
    """Max-product recursion for one sequence.

    Parameters
    ----------
    first : (S,) log score of the first state
    log_q : (m - 1, S, S) log transition matrices
    log_g : (m, S) per-visit log factors (row 0 unused)
    """
    m, S = log_g.shape
    delta = np.empty((m, S))
    psi = np.full((m, S), -1, dtype=np.int64)
    delta[0] = first
    for j in range(1, m):
        cand = delta[j - 1][:, None] + log_q[j - 1]
        psi[j] = np.argmax(cand, axis=0)
        delta[j] = cand[psi[j], np.arange(S)] + log_g[j]
    path = np.empty(m, dtype=np.int64)
    path[-1] = int(np.argmax(delta[-1]))
    for j in range(m - 1, 0, -1):
        path[j - 1] = psi[j, path[j]]
    return ViterbiResult(path, float(delta[-1, path[-1]]), delta, psi)


def viterbi_batch(first, log_q_pad, log_g_pad, lengths) -> np.ndarray:
    """Max-product paths for many padded sequences.

    Padding uses identity transitions (log 0 off the diagonal) and zero
    log factors, so the best state is carried forward unchanged.  Returns
    an ``(n, m_max)`` array of paths; entries past each length repeat the
    last state.
    """
    n, M, S = log_g_pad.shape
    delta = first.copy()
    psi = np.zeros((n, M, S), dtype=np.int64)
    for j in range(1, M):
        cand = delta[:, :, None] + log_q_pad[:, j - 1]
        arg = np.argmax(cand, axis=1)
        psi[:, j] = arg
        delta = np.take_along_axis(cand, arg[:, None, :], axis=1)[:, 0, :] + log_g_pad[:, j]
    path = np.empty((n, M), dtype=np.int64)
    path[:, -1] = np.argmax(delta, axis=1)
    rows = np.arange(n)
    for j in range(M - 1, 0, -1):
        path[:, j - 1] = psi[rows, j, path[:, j]]
    return path


def _check_times(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise DomainError("need at least one visit time")
    if not np.all(np.isfinite(times)) or np.any(times < 0):
        raise DomainError("visit times must be finite and >= 0")
    if np.any(np.diff(times) <= 0):
        raise DomainError("visit times must be strictly increasing")
    return times


def _log_ratio(params, times, markers):
    probs = class_probability_matrix(params.discrim, markers, times)
    marg = hmm_marginals(params.init.pi, params.intensity.rho, times)
    bad = (marg <= 0) & (probs > 0)
    if np.any(bad[1:]):
        j = int(np.argwhere(bad[1:])[0, 0]) + 1
        raise NumericalError(f"zero marginal state probability at time {times[j]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.where(probs > 0, np.log(probs) - np.log(marg), -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(probs), lr


def adaptive_viterbi(params: ModelParams, times, markers) -> ViterbiResult:
    """Most probable latent path from markers alone."""
    times = _check_times(times)
    markers = np.atleast_2d(np.asarray(markers, dtype=float))
    if markers.shape != (len(times), params.dims.num_markers):
        raise DataError(f"markers must have shape ({len(times)}, {params.dims.num_markers})")
    logp, lr = _log_ratio(params, times, markers)
    S = params.dims.num_states
    with np.errstate(divide="ignore"):
        lq = np.log(transition_stack(params.intensity, np.diff(times))) if len(times) > 1 else np.zeros((0, S, S))
    return viterbi_core(logp[0], lq, lr)


def forecast(params: ModelParams, history_times, history_markers, future_times) -> ViterbiResult:
    """Extend the adaptive Viterbi path over future times without markers.

    Future visits contribute only transition terms.
    """
    history_times = np.asarray(history_times, dtype=float)
    if history_times.ndim != 1 or len(history_times) == 0:
        raise DomainError("forecasting needs at least one history visit")
    future = np.asarray(future_times, dtype=float)
    if future.ndim != 1:
        raise DomainError("future times must be a vector")
    if len(future) and (future[0] <= history_times[-1] or np.any(np.diff(future) <= 0)):
        raise DomainError("future times must be increasing and after the last history visit")
    times = _check_times(np.concatenate([history_times, future]))
    markers = np.atleast_2d(np.asarray(history_markers, dtype=float))
    if markers.shape != (len(history_times), params.dims.num_markers):
        raise DataError("history markers do not match the history times")
    logp, lr = _log_ratio(params, history_times, markers)
    S = params.dims.num_states
    lg = np.vstack([lr, np.zeros((len(future), S))])
    with np.errstate(divide="ignore"):
        lq = np.log(transition_stack(params.intensity, np.diff(times))) if len(times) > 1 else np.zeros((0, S, S))
    return viterbi_core(logp[0], lq, lg)


def adaptive_viterbi_dataset(params: ModelParams, data: Dataset) -> np.ndarray:
    """Adaptive Viterbi paths for every subject, stacked like ``data.stacked()``."""
    from .em import Layout, safe_log

    S = params.dims.num_states
    layout = Layout(data.stacked(), S)
    st = layout.st
    logp, lr = _log_ratio_rows(params, st, layout)
    first = logp[layout.first_rows]
    lg = layout.pad_rows(lr, 0.0)
    eye_log = np.where(np.eye(S, dtype=bool), 0.0, -np.inf)
    q = layout.transitions.compute(params.intensity.rho) if len(layout.dts) else np.zeros((0, S, S))
    lq = layout.pad_intervals(safe_log(q), eye_log)
    paths = viterbi_batch(first, lq, lg, layout.lengths)
    return paths[layout.valid]


def _log_ratio_rows(params, st, layout):
    probs = class_probability_matrix(params.discrim, st.markers, st.times)
    marg = hmm_marginals(params.init.pi, params.intensity.rho, st.times)
    later = np.ones(len(st.times), dtype=bool)
    later[layout.first_rows] = False
    bad = (marg <= 0) & (probs > 0) & later[:, None]
    if np.any(bad):
        r = int(np.argwhere(bad)[0, 0])
        raise NumericalError(f"zero marginal state probability at time {st.times[r]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.where(probs > 0, np.log(probs) - np.log(marg), -np.inf)
        return np.log(probs), lr


def filtered_distribution(params: ModelParams, times, markers) -> np.ndarray:
    """``P(D_m = d | X_1, .., X_m)`` from the marker-only adaptive forward pass."""
    times = _check_times(times)
    markers = np.atleast_2d(np.asarray(markers, dtype=float))
    if markers.shape != (len(times), params.dims.num_markers):
        raise DataError(f"markers must have shape ({len(times)}, {params.dims.num_markers})")
    logp, lr = _log_ratio(params, times, markers)
    with np.errstate(divide="ignore"):
        lq = np.log(transition_stack(params.intensity, np.diff(times))) if len(times) > 1 else None
    a = logp[0]
    for j in range(1, len(times)):
        top = a.max()
        with np.errstate(divide="ignore"):
            a = np.log(np.exp(a - top) @ np.exp(lq[j - 1])) + top + lr[j]
    a = np.exp(a - a.max())
    return a / a.sum()


def forecast_probabilities(params: ModelParams, history_times, history_markers, future_times) -> np.ndarray:
    """State probabilities at future times given the marker history.

    The filtered distribution at the last visit is propagated by the
    fitted transition matrices; shape ``(len(future_times), S)``.
    """
    history_times = np.asarray(history_times, dtype=float)
    future = np.asarray(future_times, dtype=float)
    if len(future) and (future[0] <= history_times[-1] or np.any(np.diff(future) <= 0)):
        raise DomainError("future times must be increasing and after the last history visit")
    p = filtered_distribution(params, history_times, history_markers)
    out = np.empty((len(future), len(p)))
    prev = history_times[-1]
    for k, t in enumerate(future):
        p = np.clip(p @ transition_stack(params.intensity, [t - prev])[0], 0.0, None)
        p = p / p.sum()
        out[k] = p
        prev = t
    return out
