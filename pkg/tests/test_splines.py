import numpy as np
import pytest
import scipy.interpolate
from hypothesis import given, settings
from hypothesis import strategies as st

from gdhmm.errors import DomainError
from gdhmm.splines import build_basis, evaluate_basis, interior_knot_count, knot_vector_from, make_basis


@pytest.mark.parametrize("n,J,dim", [(200, 2, 6), (500, 2, 6), (1, 1, 5), (512, 2, 6), (513, 3, 7)])
def test_knot_count_and_dimension(n, J, dim):
    b = build_basis(n, 10.0, 4)
    assert interior_knot_count(n) == J
    assert b.interior_knots == J and b.dim == dim
    assert len(b.knot_vector) == J + 8


def test_clamped_endpoints():
    b = build_basis(200, 10.0)
    np.testing.assert_array_equal(evaluate_basis(b, 0.0), np.eye(b.dim)[0])
    np.testing.assert_array_equal(evaluate_basis(b, 10.0), np.eye(b.dim)[-1])


@settings(max_examples=200, deadline=None)
@given(
    t=st.floats(0.0, 1.0, allow_nan=False),
    J=st.integers(0, 6),
    order=st.integers(1, 5),
    t_star=st.floats(0.5, 50.0),
)
def test_partition_of_unity_and_local_support(t, J, order, t_star):
    b = make_basis(J, t_star, order)
    v = evaluate_basis(b, t * t_star)
    assert abs(v.sum() - 1.0) < 1e-12
    assert np.all(v >= -1e-15)
    assert np.count_nonzero(v) <= order


def test_matches_scipy_bspline_inside_domain(rng):
    b = make_basis(3, 10.0, 4)
    t = rng.uniform(0, 10, 300)
    ref = np.column_stack(
        [scipy.interpolate.BSpline(b.knot_vector, np.eye(b.dim)[i], 3, extrapolate=False)(t) for i in range(b.dim)]
    )
    np.testing.assert_allclose(evaluate_basis(b, t), ref, atol=1e-13)


def test_cubic_reproduction():
    b = make_basis(2, 10.0, 4)
    grid = np.linspace(0, 10, 100)
    B = evaluate_basis(b, grid)
    y = 0.3 - 1.2 * grid + 0.05 * grid**2 - 0.01 * grid**3
    coef = np.linalg.lstsq(B, y, rcond=None)[0]
    assert np.max(np.abs(B @ coef - y)) < 1e-8


def test_right_continuous_at_interior_knot():
    b = make_basis(1, 10.0, 1)
    # piecewise constant: at the knot t = 5 the right piece is active
    np.testing.assert_array_equal(evaluate_basis(b, 5.0), [0.0, 1.0])
    np.testing.assert_array_equal(evaluate_basis(b, 5.0 - 1e-12), [1.0, 0.0])


def test_domain_errors():
    b = make_basis(1, 10.0)
    with pytest.raises(DomainError):
        evaluate_basis(b, 10.5)
    with pytest.raises(DomainError):
        evaluate_basis(b, -0.1)
    with pytest.raises(DomainError):
        build_basis(0, 10.0)
    with pytest.raises(DomainError):
        make_basis(1, 10.0, 0)


def test_knot_vector_round_trip():
    b = build_basis(200, 7.5)
    assert knot_vector_from(b.knot_vector, 4) == b
    with pytest.raises(DomainError):
        knot_vector_from(np.array([0, 0, 0, 0, 1, 4, 10, 10, 10, 10.0]), 4)
