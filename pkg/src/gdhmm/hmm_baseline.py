"""Classical continuous-time HMM on surrogate labels only.

Used to initialize the pseudo-EM fit and as the surrogate-only comparator.
It runs the same recursions and M-steps as :mod:`gdhmm.em` with the marker
ratio term removed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_model import (
    Dataset,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    ModelParams,
    TransitionIntensityMatrix,
)
from .em import (
    FitConfig,
    Layout,
    coordinate_changes,
    estep,
    has_converged,
    log_emission_terms,
    mstep_emission,
    mstep_initial,
    mstep_transition,
    safe_log,
)
from .errors import ConfigError, DataError
from .predict import viterbi_batch, viterbi_core
from .ctmc import transition_stack


@dataclass(frozen=True)
class HmmParams:
    init: InitialDistribution
    intensity: TransitionIntensityMatrix
    emission: EmissionMatrix
    loglik_trace: tuple = field(default=(), compare=False)

    def as_model(self, dims: ModelDims) -> ModelParams:
        return ModelParams(dims, self.init, self.intensity, self.emission, None)


def default_start(data: Dataset, mask: np.ndarray, diag: float = 0.8, rate: float = 0.1) -> HmmParams:
    """Empirical first-visit label frequencies, a diagonal-heavy emission
    matrix and a common rate on every feasible transition."""
    S = data.dims.num_states
    st = data.stacked()
    z1 = st.surrogate[st.index[:, 0]]
    counts = np.bincount(z1[z1 >= 0], minlength=S) + 0.5
    e = np.full((S, S), (1.0 - diag) / (S - 1))
    np.fill_diagonal(e, diag)
    intensity = TransitionIntensityMatrix.from_rates(np.full(int(mask.sum()), rate), mask)
    return HmmParams(InitialDistribution(counts / counts.sum()), intensity, EmissionMatrix(e))


def fit_hmm(data: Dataset, cfg: FitConfig = FitConfig(), start: HmmParams | None = None) -> HmmParams:
    """Baum-Welch for the CTMC hidden Markov model of the surrogate labels.

    Markers are ignored.  The stopping rule and transition optimizer are
    those of the main fit; the observed log-likelihood of each iteration is
    kept in ``loglik_trace``.
    """
    S = data.dims.num_states
    st = data.stacked()
    if np.any(st.surrogate < 0):
        raise DataError("every visit needs a surrogate label to fit the HMM")
    mask = cfg.mask_for(S)
    cur = start if start is not None else default_start(data, mask)
    layout = Layout(st, S)
    rng = np.random.default_rng([cfg.seed, 1])
    trace = []
    model = cur.as_model(data.dims)
    for it in range(1, cfg.hmm_max_iter + 1):
        E = estep(layout, model, None)
        trace.append(E.total_log_norm)
        gamma_rows = E.gamma[layout.valid]
        pi = mstep_initial(E.gamma[:, 0])
        emis = mstep_emission(gamma_rows, st.surrogate, layout.emit_rows, model.emission)
        xi_w = E.xi[layout.int_subject, layout.int_visit - 1]
        ts = mstep_transition(xi_w, layout.transitions, model.intensity, cfg.num_starts if it == 1 else cfg.num_starts_warm, rng)
        new = model.replace(init=pi, intensity=ts.intensity, emission=emis)
        done = has_converged(coordinate_changes(model, new), cfg.tol)
        model = new
        if done:
            break
    trace.append(estep(layout, model, None).total_log_norm)
    return HmmParams(model.init, model.intensity, model.emission, tuple(trace))


class HmmDecoding(NamedTuple):
    posterior: np.ndarray
    path: np.ndarray
    log_prob: float


def hmm_decode(params: HmmParams, times, z, final_state: int | None = None) -> HmmDecoding:
    """Smoothed posteriors and Viterbi path of one subject from its labels.

    When ``final_state`` is given the final visit is pinned to that state.
    """
    from .core_model import SubjectRecord

    times = np.asarray(times, dtype=float)
    S = params.init.pi.shape[0]
    rec = SubjectRecord("_", times, np.zeros((len(times), 1)), z, final_state is not None, final_state)
    from .em import layout_for

    lay = layout_for([rec], S)
    model = params.as_model(ModelDims(S, 1, float(times[-1]) if times[-1] > 0 else 1.0))
    q = transition_stack(params.intensity, lay.dts) if len(lay.dts) else np.zeros((0, S, S))
    E = estep(lay, model, None, q_intervals=q)
    lg = log_emission_terms(lay, params.emission.e)
    v = viterbi_core(safe_log(params.init.pi) + lg[0], safe_log(q), lg)
    return HmmDecoding(E.gamma[0, : len(times)], v.path, v.log_prob)


def hmm_decode_dataset(params: HmmParams, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Posteriors ``(N, S)`` and Viterbi labels ``(N,)`` for every visit.

    Subjects with a known final state are pinned to it at the last visit.
    """
    S = data.dims.num_states
    layout = Layout(data.stacked(), S)
    model = params.as_model(data.dims)
    q = layout.transitions.compute(params.intensity.rho) if len(layout.dts) else np.zeros((0, S, S))
    E = estep(layout, model, None, q_intervals=q)
    lg = log_emission_terms(layout, params.emission.e)
    first = safe_log(params.init.pi)[None, :] + lg[layout.first_rows]
    eye_log = np.where(np.eye(S, dtype=bool), 0.0, -np.inf)
    paths = viterbi_batch(first, layout.pad_intervals(safe_log(q), eye_log), layout.pad_rows(lg, 0.0), layout.lengths)
    return E.gamma[layout.valid], paths[layout.valid]


def viterbi_labels(params: HmmParams, data: Dataset) -> np.ndarray:
    return hmm_decode_dataset(params, data)[1]
