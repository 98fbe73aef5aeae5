"""Bilinear (Q1) finite elements on the interior pixel grid.

A spatially varying fidelity weight lives on the (h+1) x (w+1) grid of pixel
corners and is continuous piecewise bilinear; the image itself is piecewise
constant, one value per pixel/element.  This module provides the stiffness
and mass matrices of the nodal space (unit square elements, exact local
integrals), the H1 inner product they induce, and the two transfer maps
between nodal fields and element fields:

* ``element_average`` evaluates a nodal field on elements (mean of the four
  corner values), which is how a nodal fidelity weight enters the pixel
  state equation;
* ``corner_spread`` is its exact transpose, depositing a quarter of each
  element value to each corner -- the same coefficients as the exact
  integral of a piecewise-constant field against the Q1 basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "FEMatrices",
    "build_fe_matrices",
    "element_average",
    "corner_spread",
]

# Local matrices on the unit square, corner order
# (0,0), (0,1), (1,0), (1,1) in (row, col) offsets.
_LOCAL_STIFFNESS = (1.0 / 6.0) * np.array(
    [
        [4.0, -1.0, -1.0, -2.0],
        [-1.0, 4.0, -2.0, -1.0],
        [-1.0, -2.0, 4.0, -1.0],
        [-2.0, -1.0, -1.0, 4.0],
    ]
)
_LOCAL_MASS = (1.0 / 36.0) * np.array(
    [
        [4.0, 2.0, 2.0, 1.0],
        [2.0, 4.0, 1.0, 2.0],
        [2.0, 1.0, 4.0, 2.0],
        [1.0, 2.0, 2.0, 4.0],
    ]
)


@dataclass
class FEMatrices:
    """Stiffness and mass matrices of the corner-node Q1 space.

    ``node_shape`` is (h+1, w+1) for an h x w pixel interior.  ``ritz``
    lazily factorises stiffness + mass (symmetric positive definite) for the
    H1-Riesz solves of the spatial gradient.
    """

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    node_shape: tuple
    _factor: object = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return self.stiffness.shape[0]

    def h1_product(self, a, b):
        """H1 inner product (a, b) + (grad a, grad b) of nodal fields."""
        a = np.asarray(a).ravel()
        b = np.asarray(b).ravel()
        return float(a @ (self.stiffness @ b) + a @ (self.mass @ b))

    def h1_norm_sq(self, a):
        return self.h1_product(a, a)

    def riesz_solve(self, rhs):
        """Solve (stiffness + mass) y = rhs with a cached direct factor."""
        if self._factor is None:
            self._factor = spla.splu((self.stiffness + self.mass).tocsc())
        return self._factor.solve(np.asarray(rhs, dtype=np.float64).ravel())


def build_fe_matrices(height, width):
    """Assemble Q1 stiffness/mass for an ``height x width`` pixel interior."""
    nh, nw = height + 1, width + 1
    rows_e, cols_e = np.mgrid[0:height, 0:width]
    base = (rows_e * nw + cols_e).ravel()
    # Global node ids of the four corners of every element.
    corners = np.stack([base, base + 1, base + nw, base + nw + 1], axis=1)
    ii = np.repeat(corners, 4, axis=1).ravel()
    jj = np.tile(corners, (1, 4)).ravel()
    n = nh * nw
    stiff = sp.coo_matrix(
        (np.tile(_LOCAL_STIFFNESS.ravel(), base.size), (ii, jj)), shape=(n, n)
    ).tocsr()
    mass = sp.coo_matrix(
        (np.tile(_LOCAL_MASS.ravel(), base.size), (ii, jj)), shape=(n, n)
    ).tocsr()
    stiff.sum_duplicates()
    mass.sum_duplicates()
    return FEMatrices(stiffness=stiff, mass=mass, node_shape=(nh, nw))


def element_average(nodal):
    """Evaluate a nodal field on elements: mean of the four corner values."""
    g = np.asarray(nodal, dtype=np.float64)
    return 0.25 * (g[:-1, :-1] + g[:-1, 1:] + g[1:, :-1] + g[1:, 1:])


def corner_spread(element_values):
    """Transpose of :func:`element_average`: quarter deposits per corner."""
    e = np.asarray(element_values, dtype=np.float64)
    out = np.zeros((e.shape[0] + 1, e.shape[1] + 1))
    q = 0.25 * e
    out[:-1, :-1] += q
    out[:-1, 1:] += q
    out[1:, :-1] += q
    out[1:, 1:] += q
    return out
