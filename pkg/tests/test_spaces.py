import numpy as np
import pytest
from hypothesis import given, strategies as st

from goalfem.mesh import build_interval_mesh, build_square_mesh
from goalfem.spaces import SpaceError, build_space


def _space(dim, n, degree, bc="none", split="crisscross"):
    mesh = build_interval_mesh(n) if dim == 1 else build_square_mesh(n, split)
    return build_space(mesh, degree, bc)


def test_single_trial_function_is_x():
    V = _space(1, 1, 1, "left_dirichlet")
    assert V.ndofs == 1
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(V.evaluate([1.0], x), x, atol=1e-15)


def test_left_dirichlet_dof_count():
    assert _space(1, 4, 1, "left_dirichlet").ndofs == 4


def test_one_interior_dof_2d():
    V = _space(2, 2, 1, "full_dirichlet", "diagonal")
    assert V.ndofs == 1
    np.testing.assert_allclose(V.dof_coords, [[0.5, 0.5]])


def test_p2_full_dirichlet_counts():
    # interior vertices 15^2 + 16^2 = 481; Euler: edges = 545 + 1024 - 1 = 1568,
    # of which 64 lie on the boundary
    V = _space(2, 16, 2, "full_dirichlet")
    assert V.ndofs == 481 + 1568 - 64
    assert np.all((V.dof_coords > 0) & (V.dof_coords < 1))
    Vfree = _space(2, 16, 2)
    on_bnd = np.any(np.isclose(Vfree.dof_coords, 0) | np.isclose(Vfree.dof_coords, 1), axis=1)
    assert V.ndofs == int((~on_bnd).sum())


def test_p1_hat_at_own_node_and_midpoint():
    V = _space(1, 4, 1)
    vals, _ = V.eval_basis(1, [[0.0], [0.5], [1.0]])
    np.testing.assert_allclose(vals, [[1, 0.5, 0], [0, 0.5, 1]])


def test_eval_basis_rejects_bad_element():
    with pytest.raises(IndexError):
        _space(1, 2, 1).eval_basis(5, [[0.5]])


@pytest.mark.parametrize("bad", [dict(degree=3), dict(bc="periodic"), dict(bc="left_dirichlet")])
def test_build_space_rejects(bad):
    args = dict(degree=1, bc="none") | bad
    with pytest.raises(SpaceError):
        build_space(build_square_mesh(2), args["degree"], args["bc"])


def test_dofs_lexicographic():
    V = _space(2, 3, 2, "full_dirichlet", "diagonal")
    keys = [tuple(np.round(p, 12)) for p in V.dof_coords]
    assert keys == sorted(keys)
    assert sorted(set(V.dof_map[V.dof_map >= 0].ravel().tolist())) == list(range(V.ndofs))


CASES = [(1, 3, 1), (1, 3, 2), (2, 2, 1), (2, 2, 2)]


@pytest.mark.parametrize("dim, n, degree", CASES)
def test_lagrange_property(dim, n, degree):
    V = _space(dim, n, degree)
    np.testing.assert_allclose(V.basis_matrix(V.dof_coords), np.eye(V.ndofs), atol=1e-13)


@pytest.mark.parametrize("dim, n, degree", CASES)
def test_partition_of_unity(dim, n, degree, rng):
    V = _space(dim, n, degree)
    pts = rng.random((50, dim))
    np.testing.assert_allclose(V.basis_matrix(pts).sum(1), 1.0, atol=1e-13)


@pytest.mark.parametrize("dim, n, degree", CASES)
def test_gradients_match_finite_differences(dim, n, degree, rng):
    V = _space(dim, n, degree)
    h = 1e-6
    for e in rng.integers(0, V.num_elements, 5):
        xi = rng.random((1, dim))
        if dim == 2:
            xi *= 0.5  # stay inside the reference triangle
        _, grads = V.eval_basis(int(e), xi)
        x = V.to_physical([e], xi)
        for k in range(dim):
            dx = np.zeros(dim)
            dx[k] = h
            xp = V.reference_coords([e], x + dx)
            xm = V.reference_coords([e], x - dx)
            fd = (V.eval_basis(int(e), xp)[0] - V.eval_basis(int(e), xm)[0]) / (2 * h)
            np.testing.assert_allclose(grads[:, 0, k], fd[:, 0], rtol=1e-6, atol=1e-6)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([1, 2]))
def test_linear_interpolation_exact(a, b, c, degree):
    V = _space(2, 3, degree)
    f = lambda p: a + b * p[:, 0] + c * p[:, 1]
    coeffs = V.interpolate(f)
    xq, _ = V.element_quadrature(6)
    pts = xq.reshape(-1, 2)
    assert np.max(np.abs(V.evaluate(coeffs, pts) - f(pts))) < 1e-12


def test_p2_reproduces_quadratics(rng):
    V = _space(2, 2, 2, split="diagonal")
    f = lambda p: 1 + p[:, 0] ** 2 - 3 * p[:, 0] * p[:, 1] + 0.5 * p[:, 1] ** 2
    pts = rng.random((40, 2))
    np.testing.assert_allclose(V.evaluate(V.interpolate(f), pts), f(pts), atol=1e-12)


def test_locate_outside_raises():
    with pytest.raises(ValueError):
        _space(2, 2, 1).locate([[1.5, 0.5]])
    with pytest.raises(ValueError):
        _space(1, 2, 1).locate([[-0.1]])
