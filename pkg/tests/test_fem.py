"""Q1 corner-node matrices, quadrature oracles, and nodal/element transfers."""

import numpy as np

from nldenoise.fem import (
    build_fe_matrices,
    corner_spread,
    element_average,
)


def _bilinear_on_nodes(node_shape, coeffs):
    """Values of a + b*x + c*y + d*x*y on the unit-spaced node grid."""
    nh, nw = node_shape
    yy, xx = np.mgrid[0:nh, 0:nw].astype(np.float64)  # y = row, x = col
    a, b, c, d = coeffs
    return a + b * xx + c * yy + d * xx * yy


def _gauss_integrals(height, width, u_nodes, v_nodes):
    """2x2 Gauss quadrature oracle for (u, v) and (grad u, grad v).

    Exact for products of bilinear shape functions, evaluated element by
    element straight from the nodal values.
    """
    g = 0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)
    mass = 0.0
    stiff = 0.0
    for er in range(height):
        for ec in range(width):
            uc = u_nodes[er : er + 2, ec : ec + 2]
            vc = v_nodes[er : er + 2, ec : ec + 2]
            for gx in g:
                for gy in g:
                    # shape functions at (gx, gy) in corner order
                    # (0,0), (0,1), (1,0), (1,1) = (row, col) offsets
                    sh = np.array(
                        [
                            (1 - gx) * (1 - gy),
                            gx * (1 - gy),
                            (1 - gx) * gy,
                            gx * gy,
                        ]
                    )
                    dx = np.array([-(1 - gy), (1 - gy), -gy, gy])
                    dy = np.array([-(1 - gx), -gx, (1 - gx), gx])
                    uv = np.array([uc[0, 0], uc[0, 1], uc[1, 0], uc[1, 1]])
                    vv = np.array([vc[0, 0], vc[0, 1], vc[1, 0], vc[1, 1]])
                    wq = 0.25
                    mass += wq * (sh @ uv) * (sh @ vv)
                    stiff += wq * (
                        (dx @ uv) * (dx @ vv) + (dy @ uv) * (dy @ vv)
                    )
    return mass, stiff


def test_stiffness_annihilates_constants():
    fe = build_fe_matrices(5, 7)
    ones = np.ones(fe.n_nodes)
    assert np.abs(fe.stiffness @ ones).max() <= 1e-14


def test_mass_row_sums_are_basis_integrals():
    # sum_j B_ij = integral of basis function i = (adjacent elements) / 4
    fe = build_fe_matrices(3, 4)
    sums = np.asarray(fe.mass.sum(axis=1)).ravel().reshape(fe.node_shape)
    expected = corner_spread(np.ones((3, 4)))
    np.testing.assert_allclose(sums, expected, atol=1e-15)
    assert sums[0, 0] == 0.25 and sums[1, 1] == 1.0 and sums[0, 1] == 0.5
    # total mass equals the domain area
    np.testing.assert_allclose(fe.mass.sum(), 12.0, rtol=1e-14)


def test_matrices_match_quadrature_oracle():
    rng = np.random.default_rng(0)
    fe = build_fe_matrices(3, 3)
    for _ in range(4):
        u = _bilinear_on_nodes(fe.node_shape, rng.uniform(-2, 2, size=4))
        v = _bilinear_on_nodes(fe.node_shape, rng.uniform(-2, 2, size=4))
        mass_q, stiff_q = _gauss_integrals(3, 3, u, v)
        mass_m = float(u.ravel() @ (fe.mass @ v.ravel()))
        stiff_m = float(u.ravel() @ (fe.stiffness @ v.ravel()))
        assert abs(mass_m - mass_q) <= 1e-12 * max(1.0, abs(mass_q))
        assert abs(stiff_m - stiff_q) <= 1e-12 * max(1.0, abs(stiff_q))


def test_matrices_match_quadrature_on_random_nodal_fields():
    # general nodal fields: piecewise bilinear interpolants, still exact
    rng = np.random.default_rng(1)
    fe = build_fe_matrices(4, 2)
    u = rng.normal(size=fe.node_shape)
    v = rng.normal(size=fe.node_shape)
    mass_q, stiff_q = _gauss_integrals(4, 2, u, v)
    np.testing.assert_allclose(u.ravel() @ (fe.mass @ v.ravel()), mass_q, rtol=1e-12)
    np.testing.assert_allclose(
        u.ravel() @ (fe.stiffness @ v.ravel()), stiff_q, rtol=1e-12
    )


def test_matrices_symmetric():
    fe = build_fe_matrices(6, 5)
    assert (fe.stiffness != fe.stiffness.T).nnz == 0
    assert (fe.mass != fe.mass.T).nnz == 0


def test_h1_product_and_riesz_solve():
    fe = build_fe_matrices(5, 5)
    rng = np.random.default_rng(2)
    a = rng.normal(size=fe.n_nodes)
    b = rng.normal(size=fe.n_nodes)
    expected = a @ (fe.stiffness @ b) + a @ (fe.mass @ b)
    assert fe.h1_product(a, b) == expected
    assert fe.h1_norm_sq(a) > 0.0
    y = fe.riesz_solve(b)
    resid = (fe.stiffness + fe.mass) @ y - b
    assert np.linalg.norm(resid) <= 1e-10 * np.linalg.norm(b)
    # the Riesz map reproduces the functional through the H1 product
    assert abs(fe.h1_product(y, a) - b @ a) <= 1e-10 * np.linalg.norm(b) * np.linalg.norm(a)


def test_element_average_known_values():
    nodal = np.array([[0.0, 4.0, 8.0], [2.0, 6.0, 10.0]])
    avg = element_average(nodal)
    np.testing.assert_array_equal(avg, [[3.0, 7.0]])


def test_corner_spread_is_exact_transpose_of_average():
    rng = np.random.default_rng(3)
    for h, w in [(1, 1), (2, 3), (5, 4)]:
        x = rng.normal(size=(h + 1, w + 1))
        y = rng.normal(size=(h, w))
        lhs = float(element_average(x).ravel() @ y.ravel())
        rhs = float(x.ravel() @ corner_spread(y).ravel())
        assert abs(lhs - rhs) <= 1e-13 * max(1.0, abs(lhs))


def test_constant_fields_are_fixed_points():
    c = 3.75
    nodal = np.full((5, 6), c)
    np.testing.assert_array_equal(element_average(nodal), np.full((4, 5), c))
    spread = corner_spread(np.ones((4, 5)))
    assert spread.sum() == 20.0  # total deposit preserves element mass
