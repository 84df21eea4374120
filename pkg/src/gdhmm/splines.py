"""Clamped B-spline bases with equidistant interior knots.

The time-varying class intercepts are expansions ``eta_k @ B(t)`` in the
basis built here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

DEFAULT_ORDER = 4


@dataclass(frozen=True)
class SplineBasis:
    """Order-``order`` B-spline basis on ``[0, t_star]``.

    Attributes
    ----------
    order : int
        Spline order r (degree r - 1); 4 gives cubic splines.
    interior_knots : int
        Number of equidistant interior knots J.
    t_star : float
        Right end of the domain.
    knot_vector : ndarray
        Full clamped knot sequence of length ``J + 2 * order``.
    """

    order: int
    interior_knots: int
    t_star: float
    knot_vector: np.ndarray = field(repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.interior_knots + self.order

    def __eq__(self, other):
        if not isinstance(other, SplineBasis):
            return NotImplemented
        return (
            self.order == other.order
            and self.interior_knots == other.interior_knots
            and self.t_star == other.t_star
            and np.array_equal(self.knot_vector, other.knot_vector)
        )

    def __hash__(self):
        return hash((self.order, self.interior_knots, self.t_star))


def interior_knot_count(n: int) -> int:
    """Number of interior knots for ``n`` subjects: ``ceil(n ** (1/9))``."""
    if n < 1:
        raise DomainError("sample size must be >= 1")
    j = math.ceil(n ** (1.0 / 9.0))
    # guard against n ** (1/9) landing a hair above an integer
    if (j - 1) ** 9 >= n:
        j -= 1
    return max(j, 1)


def make_basis(interior_knots: int, t_star: float, order: int = DEFAULT_ORDER) -> SplineBasis:
    if order < 1:
        raise DomainError("spline order must be >= 1")
    if interior_knots < 0:
        raise DomainError("interior knot count must be >= 0")
    if not (t_star > 0 and np.isfinite(t_star)):
        raise DomainError("t_star must be positive and finite")
    inner = np.linspace(0.0, t_star, interior_knots + 2)
    knots = np.concatenate([np.zeros(order - 1), inner, np.full(order - 1, float(t_star))])
    knots.setflags(write=False)
    return SplineBasis(order=order, interior_knots=interior_knots, t_star=float(t_star), knot_vector=knots)


def build_basis(n: int, t_star: float, order: int = DEFAULT_ORDER) -> SplineBasis:
    """Basis sized for a sample of ``n`` subjects."""
    return make_basis(interior_knot_count(n), t_star, order)


def knot_vector_from(knots, order: int) -> SplineBasis:
    """Rebuild a basis from a serialized knot vector."""
    knots = np.asarray(knots, dtype=float)
    j = len(knots) - 2 * order
    basis = make_basis(j, float(knots[-1]), order)
    if not np.allclose(basis.knot_vector, knots, rtol=0, atol=1e-12 * max(1.0, basis.t_star)):
        raise DomainError("knot vector is not an equidistant clamped sequence")
    return basis


def evaluate_basis(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate all basis functions at ``t`` by the Cox-de Boor recursion.

    Parameters
    ----------
    basis : SplineBasis
    t : float or array_like
        Evaluation points in ``[0, t_star]``.

    Returns
    -------
    ndarray
        Shape ``(dim,)`` for scalar ``t``, otherwise ``(len(t), dim)``.
        Intervals are closed on the left; ``t_star`` itself belongs to the
        last interval so the final basis function equals one there.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not np.all(np.isfinite(t)):
        raise DomainError("evaluation points must be finite")
    if np.any(t < 0) or np.any(t > basis.t_star):
        raise DomainError(f"evaluation points must lie in [0, {basis.t_star}]")
    knots = basis.knot_vector
    r = basis.order
    n_int = len(knots) - 1
    # order-1 indicators on [k_i, k_{i+1}); the last nondegenerate span is closed
    span = np.searchsorted(knots, t, side="right") - 1
    last = basis.interior_knots + r - 1
    span = np.minimum(span, last)
    b = np.zeros((len(t), n_int))
    b[np.arange(len(t)), span] = 1.0
    for q in range(2, r + 1):
        nxt = np.zeros((len(t), n_int - q + 1))
        for i in range(n_int - q + 1):
            left_den = knots[i + q - 1] - knots[i]
            right_den = knots[i + q] - knots[i + 1]
            term = 0.0
            if left_den > 0:
                term = (t - knots[i]) / left_den * b[:, i]
            if right_den > 0:
                term = term + (knots[i + q] - t) / right_den * b[:, i + 1]
            nxt[:, i] = term
        b = nxt
    return b[0] if scalar else b
