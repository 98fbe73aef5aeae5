"""Patch dissimilarity and nonlocal kernel matrices.

The kernel weight between pixels i and j is ``gamma_ij = exp(-w * D_ij)``
where ``D_ij`` is the squared l2 distance between the two image patches of
radius ``rho`` centred at i and j, restricted to pairs within an l-infinity
interaction ball of radius ``eps``.  ``D`` is assembled once per image with
the patch-measure identity

    D_ij = px_i(f^2) + px_j(f^2) - 2 * sum_t Patch_i(t) * Patch_j(t)

computed per interaction offset over the whole grid, lower triangle only and
mirrored, which keeps the patch-level multiply-add count within the
``|P| * [N*M*(1 + E) - E]`` budget (``|P| = (2*rho+1)^2`` patch pixels,
``E = (2*eps+1)^2`` ball size).  Entries with ``gamma <= iota`` are masked
(stored as explicit zeros); the sparsity pattern itself never changes, so a
kernel can be re-weighted in place via ``gamma_new = gamma_old**(w_new/w_old)``
without touching the image again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "PatchConfig",
    "DissimilarityMatrix",
    "KernelMatrix",
    "LinearizedKernel",
    "default_interaction_radius",
    "patch_op_budget",
    "build_dissimilarity",
    "assemble_kernel",
    "reweight",
    "linearized_kernel",
    "dump_dissimilarity",
    "load_dissimilarity",
]


@dataclass(frozen=True)
class PatchConfig:
    """Patch radius rho, interaction radius eps and mask threshold iota."""

    patch_radius: int = 5
    interaction_radius: int = 10
    threshold: float = 1e-9

    def __post_init__(self):
        if self.patch_radius < 0 or self.interaction_radius < 0:
            raise ValueError("radii must be non-negative")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")


def default_interaction_radius(height, width):
    """Largest eps whose ball keeps at most ~5*min(N, M) neighbours per pixel.

    Solves (2*eps+1)^2 <= 5*min(N, M) for integer eps.
    """
    n = min(int(height), int(width))
    return max(1, int((np.sqrt(5.0 * n) - 1.0) // 2))


def patch_op_budget(height, width, rho, eps):
    """Reference multiply-add budget for one dissimilarity assembly."""
    patch = (2 * rho + 1) ** 2
    ball = (2 * eps + 1) ** 2
    return patch * (height * width * (1 + ball) - ball)


@dataclass(frozen=True)
class DissimilarityMatrix:
    """Symmetric squared patch distances on the padded pixel grid.

    ``matrix`` is CSR over all padded-grid pixels (row-major indexing) with
    one entry per pixel pair within the interaction ball, the diagonal kept
    at exactly 0.  ``op_count`` is the number of patch-level multiply-adds
    spent building it.
    """

    matrix: sp.csr_matrix
    grid_shape: tuple
    pad: int
    patch_radius: int
    interaction_radius: int
    op_count: int

    @property
    def n(self):
        return self.matrix.shape[0]

    def max_entry(self):
        return float(self.matrix.data.max()) if self.matrix.nnz else 0.0


def _half_ball_offsets(eps):
    # Lexicographically positive offsets: one representative per {(d),(-d)}.
    offs = []
    for dy in range(eps + 1):
        for dx in range(-eps, eps + 1):
            if dy == 0 and dx <= 0:
                continue
            offs.append((dy, dx))
    return offs


def build_dissimilarity(image, config):
    """Assemble the squared patch-distance matrix for one padded image.

    Parameters
    ----------
    image : imaging.Image
        Padded image; the padding ring must be at least as wide as the
        interaction radius (it is zero-extended further for patch overlap).
    config : PatchConfig

    Returns
    -------
    DissimilarityMatrix
    """
    rho = config.patch_radius
    eps = config.interaction_radius
    if image.pad < eps:
        raise ValueError(
            f"image pad {image.pad} smaller than interaction radius {eps}"
        )
    grid = image.values  # padded grid, the index set of the matrix
    hp, wp = grid.shape
    n = hp * wp

    # Zero-extend by rho so every patch read is in bounds.
    work = np.zeros((hp + 2 * rho, wp + 2 * rho))
    work[rho : rho + hp, rho : rho + wp] = grid
    work2 = work * work

    patch = (2 * rho + 1) ** 2
    ops = 0

    # Patch measure of f^2 at every grid pixel: |P| adds per pixel.
    px2 = np.zeros((hp, wp))
    for tr in range(2 * rho + 1):
        for tc in range(2 * rho + 1):
            px2 += work2[tr : tr + hp, tc : tc + wp]
    ops += patch * n

    rows, cols, vals = [], [], []
    for dy, dx in _half_ball_offsets(eps):
        # Valid anchor pixels: both i and i+(dy,dx) inside the padded grid.
        r0, r1 = 0, hp - dy
        c0, c1 = max(0, -dx), wp - max(0, dx)
        nr, nc = r1 - r0, c1 - c0
        if nr <= 0 or nc <= 0:
            continue
        # Cross term sum_t f(i+t) f(i+d+t): |P| fused multiply-adds per pair.
        cross = np.zeros((nr, nc))
        for tr in range(2 * rho + 1):
            for tc in range(2 * rho + 1):
                a = work[r0 + tr : r0 + tr + nr, c0 + tc : c0 + tc + nc]
                b = work[
                    r0 + dy + tr : r0 + dy + tr + nr,
                    c0 + dx + tc : c0 + dx + tc + nc,
                ]
                cross += a * b
        ops += patch * nr * nc

        d = px2[r0:r1, c0:c1] + px2[r0 + dy : r1 + dy, c0 + dx : c1 + dx] - 2.0 * cross
        np.maximum(d, 0.0, out=d)  # clip tiny negative rounding residue

        rr, cc = np.mgrid[r0:r1, c0:c1]
        i = (rr * wp + cc).ravel()
        j = ((rr + dy) * wp + (cc + dx)).ravel()
        v = d.ravel()
        rows.append(i)
        cols.append(j)
        vals.append(v)
        rows.append(j)  # mirror: exact symmetry by construction
        cols.append(i)
        vals.append(v)

    diag = np.arange(n)
    rows.append(diag)
    cols.append(diag)
    vals.append(np.zeros(n))

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    mat.sort_indices()
    return DissimilarityMatrix(
        matrix=mat,
        grid_shape=(hp, wp),
        pad=image.pad,
        patch_radius=rho,
        interaction_radius=eps,
        op_count=ops,
    )


@dataclass(frozen=True)
class KernelMatrix:
    """Thresholded kernel gamma = exp(-w * D) on a frozen sparsity pattern.

    ``mask`` marks the entries that survived the threshold when the kernel
    was first assembled; masked entries are stored as explicit zeros and stay
    zero under re-weighting.  ``row_sums`` is eta_i = sum_j gamma_ij over the
    stored row (the diagonal gamma_ii = 1 included).
    """

    matrix: sp.csr_matrix
    mask: np.ndarray
    weight: float
    threshold: float
    row_sums: np.ndarray
    dissimilarity: DissimilarityMatrix

    @property
    def n(self):
        return self.matrix.shape[0]


def assemble_kernel(dissimilarity, weight, threshold):
    """Evaluate gamma = exp(-w * D) and mask entries not exceeding iota."""
    if weight < 0:
        raise ValueError("kernel weight must be non-negative")
    dmat = dissimilarity.matrix
    data = np.exp(-weight * dmat.data)
    mask = data > threshold
    data[~mask] = 0.0
    mat = sp.csr_matrix((data, dmat.indices, dmat.indptr), shape=dmat.shape)
    return KernelMatrix(
        matrix=mat,
        mask=mask,
        weight=float(weight),
        threshold=float(threshold),
        row_sums=np.asarray(mat.sum(axis=1)).ravel(),
        dissimilarity=dissimilarity,
    )


def reweight(kernel, new_weight):
    """Re-evaluate a kernel at a new weight without touching the image.

    Uses ``gamma_new = gamma_old ** (w_new / w_old)`` entrywise on the
    unmasked entries; the mask, and hence the sparsity pattern, is frozen at
    whatever the original assembly produced.  Falls back to a fresh
    evaluation of exp(-w * D) when the stored weight is zero (the power path
    is undefined there).
    """
    if new_weight < 0:
        raise ValueError("kernel weight must be non-negative")
    old = kernel.matrix
    if kernel.weight == 0.0:
        base = kernel.dissimilarity.matrix.data
        data = np.zeros_like(old.data)
        data[kernel.mask] = np.exp(-new_weight * base[kernel.mask])
    else:
        ratio = new_weight / kernel.weight
        data = np.zeros_like(old.data)
        data[kernel.mask] = old.data[kernel.mask] ** ratio
    mat = sp.csr_matrix((data, old.indices, old.indptr), shape=old.shape)
    return KernelMatrix(
        matrix=mat,
        mask=kernel.mask,
        weight=float(new_weight),
        threshold=kernel.threshold,
        row_sums=np.asarray(mat.sum(axis=1)).ravel(),
        dissimilarity=kernel.dissimilarity,
    )


@dataclass(frozen=True)
class LinearizedKernel:
    """Entrywise derivative of the kernel in w: gamma_hat = -D o gamma.

    Shares the kernel's sparsity pattern; ``row_sums`` is eta_hat.
    """

    matrix: sp.csr_matrix
    row_sums: np.ndarray


def linearized_kernel(kernel, dissimilarity=None):
    """d(gamma)/dw on the kernel's frozen pattern: -D_ij * gamma_ij."""
    dis = dissimilarity if dissimilarity is not None else kernel.dissimilarity
    dmat = dis.matrix
    kmat = kernel.matrix
    if dmat.shape != kmat.shape or len(dmat.data) != len(kmat.data):
        raise ValueError("kernel and dissimilarity patterns do not match")
    data = -dmat.data * kmat.data  # masked kernel entries are 0 -> stay 0
    mat = sp.csr_matrix((data, kmat.indices, kmat.indptr), shape=kmat.shape)
    return LinearizedKernel(matrix=mat, row_sums=np.asarray(mat.sum(axis=1)).ravel())


# ---------------------------------------------------------------------------
# Binary cache for the dissimilarity matrix
# ---------------------------------------------------------------------------

_MAGIC = b"NLDM"
_VERSION = 1
_HEADER = struct.Struct("<4sIqqqqqq")  # magic, version, hp, wp, pad, rho, eps, nnz


def dump_dissimilarity(path, dissimilarity):
    """Write D to a binary cache: header, row offsets, columns, entries."""
    mat = dissimilarity.matrix
    hp, wp = dissimilarity.grid_shape
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                hp,
                wp,
                dissimilarity.pad,
                dissimilarity.patch_radius,
                dissimilarity.interaction_radius,
                mat.nnz,
            )
        )
        fh.write(np.asarray(mat.indptr, dtype="<i8").tobytes())
        fh.write(np.asarray(mat.indices, dtype="<i8").tobytes())
        fh.write(np.asarray(mat.data, dtype="<f8").tobytes())


def load_dissimilarity(path):
    """Read a matrix written by :func:`dump_dissimilarity`."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, hp, wp, pad, rho, eps, nnz = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a dissimilarity cache")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        n = hp * wp
        indptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<i8")
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
        data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    mat = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(n, n))
    return DissimilarityMatrix(
        matrix=mat,
        grid_shape=(hp, wp),
        pad=pad,
        patch_radius=rho,
        interaction_radius=eps,
        op_count=0,
    )
