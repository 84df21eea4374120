"""Model parameters, subject records and structural validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .splines import SplineBasis

PROB_TOL = 1e-12
IDENT_TOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def full_mask(num_states: int) -> np.ndarray:
    """All off-diagonal entries feasible."""
    return ~np.eye(num_states, dtype=bool)


def progressive_mask(num_states: int) -> np.ndarray:
    """Upper-triangular mask: no transition back to a lower state code."""
    return np.triu(np.ones((num_states, num_states), dtype=bool), k=1)


@dataclass(frozen=True)
class ModelDims:
    num_states: int
    num_markers: int
    t_star: float

    @property
    def K(self) -> int:
        """Index of the last state (states are 0..K)."""
        return self.num_states - 1


@dataclass(frozen=True)
class InitialDistribution:
    pi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", _frozen(self.pi))

    def normalized(self) -> "InitialDistribution":
        return InitialDistribution(self.pi / self.pi.sum())


@dataclass(frozen=True)
class TransitionIntensityMatrix:
    """Generator matrix of the latent chain.

    ``structure_mask[k, l]`` marks the feasible jumps ``k -> l``; the
    diagonal of the mask is ignored.
    """

    rho: np.ndarray
    structure_mask: np.ndarray = None

    def __post_init__(self):
        rho = _frozen(self.rho)
        mask = full_mask(rho.shape[0]) if self.structure_mask is None else np.array(self.structure_mask, dtype=bool)
        mask = mask & ~np.eye(mask.shape[0], dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "structure_mask", mask)

    @property
    def num_states(self) -> int:
        return self.rho.shape[0]

    @classmethod
    def from_rates(cls, rates, structure_mask) -> "TransitionIntensityMatrix":
        """Build from a vector of free off-diagonal rates in row-major mask order."""
        mask = np.array(structure_mask, dtype=bool) & ~np.eye(len(structure_mask), dtype=bool)
        rho = np.zeros(mask.shape)
        rho[mask] = rates
        np.fill_diagonal(rho, -rho.sum(axis=1))
        return cls(rho, mask)

    @property
    def free_rates(self) -> np.ndarray:
        return self.rho[self.structure_mask]


@dataclass(frozen=True)
class EmissionMatrix:
    """Surrogate-label emission; ``e[d, k] = P(Z = k | D = d)``."""

    e: np.ndarray
    feasible_mask: np.ndarray = None

    def __post_init__(self):
        e = _frozen(self.e)
        mask = np.ones(e.shape, dtype=bool) if self.feasible_mask is None else np.array(self.feasible_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "feasible_mask", mask)

    @property
    def free_entries(self) -> np.ndarray:
        return self.e[self.feasible_mask]


@dataclass(frozen=True)
class DiscriminativeParams:
    """Coefficients of the time-varying multinomial logistic model.

    Row ``k - 1`` of ``eta`` and ``beta`` belongs to class ``k``; class 0
    is the reference with implicit zero coefficients.
    """

    eta: np.ndarray
    beta: np.ndarray
    basis: SplineBasis = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "eta", _frozen(np.atleast_2d(self.eta)))
        object.__setattr__(self, "beta", _frozen(np.atleast_2d(self.beta)))

    @property
    def num_classes(self) -> int:
        return self.eta.shape[0] + 1

    @classmethod
    def zeros(cls, num_states: int, num_markers: int, basis: SplineBasis) -> "DiscriminativeParams":
        return cls(np.zeros((num_states - 1, basis.dim)), np.zeros((num_states - 1, num_markers)), basis)

    def intercepts(self, t) -> np.ndarray:
        """alpha_k(t) for k = 1..K; shape ``(len(t), K)`` or ``(K,)``."""
        from .splines import evaluate_basis

        return evaluate_basis(self.basis, t) @ self.eta.T

    def group_norms(self) -> np.ndarray:
        """Euclidean norm of each marker's coefficient group across classes."""
        return np.linalg.norm(self.beta, axis=0)


@dataclass(frozen=True)
class ModelParams:
    dims: ModelDims
    init: InitialDistribution
    intensity: TransitionIntensityMatrix
    emission: EmissionMatrix
    discrim: DiscriminativeParams | None
    metadata: dict = field(default_factory=dict, compare=False)

    def replace(self, **changes) -> "ModelParams":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's visits.

    ``surrogate`` may be None for subjects used only for prediction.
    """

    subject_id: str
    times: np.ndarray
    markers: np.ndarray
    surrogate: np.ndarray | None
    final_state_known: bool = False
    final_state: int | None = None

    def __post_init__(self):
        times = _frozen(self.times)
        markers = _frozen(np.asarray(self.markers, dtype=float).reshape(len(times), -1))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "markers", markers)
        if self.surrogate is not None:
            object.__setattr__(self, "surrogate", _frozen(self.surrogate, dtype=np.int64))
        problems = subject_problems(self)
        if problems:
            raise DataError(f"subject {self.subject_id}: " + "; ".join(problems))

    @property
    def num_visits(self) -> int:
        return len(self.times)


def subject_problems(s: SubjectRecord) -> list[str]:
    out = []
    t = s.times
    if t.ndim != 1 or len(t) < 1:
        return ["times must be a nonempty vector"]
    if not np.all(np.isfinite(t)):
        out.append("non-finite visit time")
    if t[0] != 0:
        out.append("first visit time must be 0")
    if np.any(np.diff(t) <= 0):
        out.append("visit times must be strictly increasing")
    if s.markers.shape[0] != len(t):
        out.append("marker rows must match visit count")
    if not np.all(np.isfinite(s.markers)):
        out.append("non-finite marker value")
    if s.surrogate is not None and len(s.surrogate) != len(t):
        out.append("surrogate length must match visit count")
    if s.final_state_known:
        if s.final_state is None:
            out.append("final state flagged known but missing")
        elif s.surrogate is not None and s.surrogate[-1] != s.final_state:
            out.append("surrogate at final visit must equal the known final state")
    return out


@dataclass(frozen=True)
class Dataset:
    subjects: tuple
    dims: ModelDims

    def __post_init__(self):
        subs = tuple(self.subjects)
        object.__setattr__(self, "subjects", subs)
        for s in subs:
            if s.markers.shape[1] != self.dims.num_markers:
                raise DataError(f"subject {s.subject_id}: expected {self.dims.num_markers} markers")
            if s.times[-1] > self.dims.t_star:
                raise DataError(f"subject {s.subject_id}: visit after t_star={self.dims.t_star}")
            if s.surrogate is not None and (s.surrogate.min() < 0 or s.surrogate.max() >= self.dims.num_states):
                raise DataError(f"subject {s.subject_id}: surrogate label out of range")

    def __len__(self):
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    def stacked(self) -> "StackedData":
        return StackedData.from_subjects(self.subjects, self.dims.num_states)


class StackedData(NamedTuple):
    """Flattened view of all visits plus a padded (subject, visit) layout.

    ``index[i, j]`` is the flat row of visit ``j`` of subject ``i`` (or -1
    past the subject's last visit).
    """

    times: np.ndarray
    markers: np.ndarray
    surrogate: np.ndarray
    subject: np.ndarray
    visit: np.ndarray
    lengths: np.ndarray
    index: np.ndarray
    final_known: np.ndarray
    final_state: np.ndarray

    @classmethod
    def from_subjects(cls, subjects, num_states: int) -> "StackedData":
        lengths = np.array([s.num_visits for s in subjects], dtype=np.int64)
        n, m_max = len(subjects), int(lengths.max())
        times = np.concatenate([s.times for s in subjects])
        markers = np.vstack([s.markers for s in subjects])
        surrogate = np.concatenate(
            [s.surrogate if s.surrogate is not None else np.full(s.num_visits, -1) for s in subjects]
        ).astype(np.int64)
        subject = np.repeat(np.arange(n), lengths)
        visit = np.concatenate([np.arange(m) for m in lengths])
        index = np.full((n, m_max), -1, dtype=np.int64)
        index[subject, visit] = np.arange(len(times))
        final_known = np.array([bool(s.final_state_known) for s in subjects])
        final_state = np.array([s.final_state if s.final_state_known else -1 for s in subjects], dtype=np.int64)
        return cls(times, markers, surrogate, subject, visit, lengths, index, final_known, final_state)


class Violation(NamedTuple):
    code: str
    where: str
    detail: str


def _check_simplex(v, where, out, tol=PROB_TOL):
    if not np.all(np.isfinite(v)):
        out.append(Violation("non_finite", where, "non-finite probability"))
        return
    if np.any(v < 0):
        out.append(Violation("negative_probability", where, f"min entry {v.min():.3g}"))
    if abs(v.sum() - 1.0) > tol:
        out.append(Violation("sum_not_one", where, f"sum {v.sum():.17g}"))


def validate_model(params: ModelParams) -> list[Violation]:
    """List every violated structural invariant of ``params``.

    Returns an empty list when the model is usable; never raises for
    invalid values.
    """
    out: list[Violation] = []
    d = params.dims
    S = d.num_states
    if S < 2:
        out.append(Violation("too_few_states", "dims", f"num_states={S}"))
    if d.num_markers < 1:
        out.append(Violation("too_few_markers", "dims", f"num_markers={d.num_markers}"))
    if not (np.isfinite(d.t_star) and d.t_star > 0):
        out.append(Violation("t_star_nonpositive", "dims", f"t_star={d.t_star}"))

    pi = params.init.pi
    if pi.shape != (S,):
        out.append(Violation("dimension_mismatch", "pi", f"shape {pi.shape}"))
    else:
        _check_simplex(pi, "pi", out)

    rho = params.intensity.rho
    mask = params.intensity.structure_mask
    if rho.shape != (S, S):
        out.append(Violation("dimension_mismatch", "rho", f"shape {rho.shape}"))
    elif not np.all(np.isfinite(rho)):
        out.append(Violation("non_finite", "rho", "non-finite rate"))
    else:
        off = ~np.eye(S, dtype=bool)
        if np.any(rho[off] < 0):
            out.append(Violation("negative_rate", "rho", f"min off-diagonal {rho[off].min():.3g}"))
        if np.any(rho[off & ~mask] != 0):
            out.append(Violation("rate_outside_mask", "rho", "nonzero rate on an infeasible transition"))
        diag_err = np.abs(np.diag(rho) + (rho * off).sum(axis=1))
        if np.any(diag_err > PROB_TOL):
            out.append(Violation("diagonal_mismatch", "rho", f"max error {diag_err.max():.3g}"))

    e = params.emission.e
    emask = params.emission.feasible_mask
    if e.shape != (S, S):
        out.append(Violation("dimension_mismatch", "emission", f"shape {e.shape}"))
    else:
        for k in range(S):
            _check_simplex(e[k], f"emission[{k}]", out)
        if np.any(e[~emask] != 0):
            out.append(Violation("emission_outside_mask", "emission", "nonzero infeasible emission"))
        for a in range(S):
            for b in range(a + 1, S):
                if np.all(np.abs(e[a] - e[b]) <= IDENT_TOL):
                    out.append(Violation("identifiability_rows_equal", "emission", f"rows {a} and {b}"))

    disc = params.discrim
    if disc is not None:
        if disc.eta.shape != (S - 1, disc.basis.dim):
            out.append(Violation("coefficient_length_mismatch", "eta", f"shape {disc.eta.shape}"))
        if disc.beta.shape != (S - 1, d.num_markers):
            out.append(Violation("coefficient_length_mismatch", "beta", f"shape {disc.beta.shape}"))
        if not (np.all(np.isfinite(disc.eta)) and np.all(np.isfinite(disc.beta))):
            out.append(Violation("non_finite", "discrim", "non-finite coefficient"))
        if disc.basis.t_star != d.t_star:
            out.append(Violation("dimension_mismatch", "basis", "basis domain differs from t_star"))
    return out


def violation_codes(params: ModelParams) -> set[str]:
    return {v.code for v in validate_model(params)}
