"""Scikit-learn style estimators around the denoiser and its training loops.

``fit`` learns a parameter (fidelity weight, fidelity field, or kernel
weight) from one or more (noisy, clean) image pairs by minimising the
reconstruction loss of the lower-level denoiser; ``transform`` applies the
lower-level denoiser with the learned parameter to noisy input.  All
estimators follow the usual conventions: constructor arguments are stored
verbatim, learned attributes carry a trailing underscore, ``fit`` returns
``self`` and ``get_params``/``set_params``/``clone`` work out of the box.

Images are plain 2-d arrays (or ``imaging.Image``); sequences of images are
accepted where batches make sense.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import gradients as gr
from .fem import build_fe_matrices
from .imaging import Image
from .kernel import (
    PatchConfig,
    assemble_kernel,
    build_dissimilarity,
    default_interaction_radius,
)
from .optimizer import Box, TrustRegionConfig, minimize

__all__ = [
    "NonlocalMeansDenoiser",
    "ScalarFidelityDenoiser",
    "SpatialFidelityDenoiser",
    "KernelWeightDenoiser",
    "as_image",
    "as_image_list",
]

#: Reference weight at which the kernel mask is frozen for weight learning.
REFERENCE_WEIGHT = 1e-6


# ---------------------------------------------------------------------------
# Input validation helpers
# ---------------------------------------------------------------------------


def as_image(x, pad):
    """Coerce a 2-d array (or Image) to a padded Image with ring ``pad``."""
    if isinstance(x, Image):
        if x.pad != pad:
            return Image.from_interior(x.interior, pad)
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return Image.from_interior(arr, pad)


def as_image_list(x, pad):
    """Coerce input to a list of padded Images (singletons allowed)."""
    if isinstance(x, Image) or (hasattr(x, "ndim") and np.asarray(x).ndim == 2):
        return [as_image(x, pad)]
    items = list(x)
    if not items:
        raise ValueError("empty image collection")
    return [as_image(item, pad) for item in items]


def _paired(x, y, pad):
    noisy = as_image_list(x, pad)
    clean = as_image_list(y, pad)
    if len(noisy) != len(clean):
        raise ValueError(f"{len(noisy)} noisy images but {len(clean)} references")
    for a, b in zip(noisy, clean):
        if (a.height, a.width) != (b.height, b.width):
            raise ValueError("noisy/reference image shapes differ")
    return list(zip(noisy, clean))


class _KernelMixin:
    """Shared kernel configuration and assembly for the estimators."""

    def _patch_config(self, image):
        eps = self.interaction_radius
        if eps is None:
            eps = default_interaction_radius(image.height, image.width)
        return PatchConfig(
            patch_radius=self.patch_radius,
            interaction_radius=eps,
            threshold=self.threshold,
        )

    def _pad_for(self, image_like):
        first = image_like
        if not isinstance(first, Image) and not (
            hasattr(first, "ndim") and getattr(first, "ndim", 0) == 2
        ):
            first = list(image_like)[0]  # batch input: size from first element
        if isinstance(first, Image):
            h, w = first.height, first.width
        else:
            h, w = np.asarray(first).shape
        if self.interaction_radius is not None:
            return self.interaction_radius
        return default_interaction_radius(h, w)

    def _kernel_for(self, image, weight):
        cfg = self._patch_config(image)
        dis = build_dissimilarity(image, cfg)
        return assemble_kernel(dis, weight, cfg.threshold)

    def _optimizer_config(self):
        return TrustRegionConfig(tol=self.tol, max_iter=self.max_iter)


class NonlocalMeansDenoiser(_KernelMixin, TransformerMixin, BaseEstimator):
    """Nonlocal-means denoiser with fixed fidelity and kernel weights.

    Solves the volume-constrained diffusion-reaction system
    ``(diag(lam) + diag(eta) - Gamma) u = lam * f`` where the kernel Gamma is
    built from the input image's own patches.

    Parameters
    ----------
    lam : float
        Fidelity weight balancing data fit against nonlocal smoothing.
    weight : float
        Kernel decay weight w in gamma = exp(-w * D); for noise of scale
        delta use w = delta**-2.
    patch_radius, interaction_radius : int
        Patch half-width rho and search half-width eps (l-inf ball).
        ``interaction_radius=None`` picks the largest ball with about
        5*min(height, width) neighbours.
    threshold : float
        Kernel entries not exceeding this are dropped from the stencil.
    solver_tol : float
        Relative residual target of the linear solves.
    """

    def __init__(self, lam=36.0, weight=1e-4, patch_radius=5,
                 interaction_radius=None, threshold=1e-9, mu=0.5,
                 solver_tol=1e-10):
        self.lam = lam
        self.weight = weight
        self.patch_radius = patch_radius
        self.interaction_radius = interaction_radius
        self.threshold = threshold
        self.mu = mu
        self.solver_tol = solver_tol

    def fit(self, X, y=None):
        """Validate parameters; this denoiser has nothing to learn."""
        as_image_list(X, self._pad_for(X))
        if self.lam < 0 or self.weight < 0:
            raise ValueError("lam and weight must be non-negative")
        self.n_features_in_ = 0
        return self

    def transform(self, X):
        """Denoise one image or a sequence of images."""
        pad = self._pad_for(X)
        images = as_image_list(X, pad)
        out = []
        for img in images:
            kern = self._kernel_for(img, self.weight)
            den, _ = gr.denoise_image(img, kern, self.lam, mu=self.mu,
                                      tol=self.solver_tol)
            out.append(den.interior.copy())
        single = isinstance(X, Image) or (hasattr(X, "ndim") and np.asarray(X).ndim == 2)
        return out[0] if single else out

    def predict(self, X):
        return self.transform(X)


class ScalarFidelityDenoiser(_KernelMixin, TransformerMixin, BaseEstimator):
    """Denoiser whose scalar fidelity weight is learned from examples.

    ``fit(X, y)`` takes noisy images ``X`` and the matching clean images
    ``y`` and minimises the mean half squared reconstruction error over the
    box [0, upper] with a projected trust-region method driven by
    adjoint-based gradients.

    Attributes
    ----------
    lam_ : float              learned fidelity weight
    n_iter_ : int             trust-region iterations
    result_ : TrustRegionResult
    """

    def __init__(self, lam0=100.0, upper=1e5, weight=1e-4, patch_radius=5,
                 interaction_radius=None, threshold=1e-9, mu=0.5,
                 solver_tol=1e-10, tol=1e-8, max_iter=100):
        self.lam0 = lam0
        self.upper = upper
        self.weight = weight
        self.patch_radius = patch_radius
        self.interaction_radius = interaction_radius
        self.threshold = threshold
        self.mu = mu
        self.solver_tol = solver_tol
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        pad = self._pad_for(X)
        pairs = _paired(X, y, pad)
        kernels = [self._kernel_for(noisy, self.weight) for noisy, _ in pairs]
        warm = gr.WarmStart()

        def fun_grad(z):
            rg = gr.batch_fidelity_gradient(pairs, kernels, z[0], mu=self.mu,
                                            tol=self.solver_tol, warm=warm)
            return rg.objective, np.array([rg.value])

        def fun(z):
            return gr.batch_objective(pairs, kernels, z[0], mu=self.mu,
                                      tol=self.solver_tol, warm=warm)

        res = minimize(fun_grad, np.array([self.lam0]), Box(0.0, self.upper, n=1),
                       config=self._optimizer_config(), fun=fun)
        self.lam_ = float(res.x[0])
        self.n_iter_ = res.iterations
        self.result_ = res
        return self

    def transform(self, X):
        return NonlocalMeansDenoiser(
            lam=self.lam_, weight=self.weight, patch_radius=self.patch_radius,
            interaction_radius=self.interaction_radius, threshold=self.threshold,
            mu=self.mu, solver_tol=self.solver_tol,
        ).transform(X)

    def predict(self, X):
        return self.transform(X)


class SpatialFidelityDenoiser(_KernelMixin, TransformerMixin, BaseEstimator):
    """Denoiser with a spatially varying fidelity field on pixel corners.

    The field lives on the (h+1) x (w+1) corner grid, is box-constrained to
    [0, upper], regularised by (beta/2) * ||lam||_H1^2, and optimised with
    H1-Riesz gradients so that smooth descent directions are taken.

    Attributes
    ----------
    lam_map_ : ndarray of shape (h+1, w+1)
    n_iter_, result_
    """

    def __init__(self, lam0=200.0, upper=255.0, beta=1e-4, weight=1e-4,
                 patch_radius=5, interaction_radius=None, threshold=1e-9,
                 mu=0.5, solver_tol=1e-10, tol=1e-8, max_iter=100):
        self.lam0 = lam0
        self.upper = upper
        self.beta = beta
        self.weight = weight
        self.patch_radius = patch_radius
        self.interaction_radius = interaction_radius
        self.threshold = threshold
        self.mu = mu
        self.solver_tol = solver_tol
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        pad = self._pad_for(X)
        pairs = _paired(X, y, pad)
        if len(pairs) != 1:
            raise ValueError("the spatial fidelity field is learned from one image pair")
        noisy, clean = pairs[0]
        kern = self._kernel_for(noisy, self.weight)
        fe = build_fe_matrices(noisy.height, noisy.width)
        warm = gr.WarmStart()
        shape = (noisy.height + 1, noisy.width + 1)

        def fun_grad(z):
            rg = gr.spatial_fidelity_gradient(noisy, clean, kern, z.reshape(shape),
                                              self.beta, fe=fe, mu=self.mu,
                                              tol=self.solver_tol, warm=warm)
            return rg.objective, rg.value.ravel()

        def fun(z):
            return gr.spatial_objective(noisy, clean, kern, z.reshape(shape),
                                        self.beta, fe=fe, mu=self.mu,
                                        tol=self.solver_tol, warm=warm)

        x0 = np.full(shape[0] * shape[1], float(self._initial_value()))
        res = minimize(fun_grad, x0, Box(0.0, self.upper, n=x0.size),
                       config=self._optimizer_config(), fun=fun)
        self.lam_map_ = res.x.reshape(shape)
        self.n_iter_ = res.iterations
        self.result_ = res
        self._fit_kernel_ = kern
        self._fit_shape_ = (noisy.height, noisy.width)
        return self

    def _initial_value(self):
        return self.lam0

    def transform(self, X):
        """Denoise images of the fitted shape with the learned field."""
        from .fem import element_average

        pad = self._pad_for(X)
        images = as_image_list(X, pad)
        lam_elems = element_average(self.lam_map_).ravel()
        out = []
        for img in images:
            if (img.height, img.width) != self._fit_shape_:
                raise ValueError("image shape differs from the fitted field")
            kern = self._kernel_for(img, self.weight)
            den, _ = gr.denoise_image(img, kern, lam_elems, mu=self.mu,
                                      tol=self.solver_tol)
            out.append(den.interior.copy())
        single = isinstance(X, Image) or (hasattr(X, "ndim") and np.asarray(X).ndim == 2)
        return out[0] if single else out

    def predict(self, X):
        return self.transform(X)


class KernelWeightDenoiser(_KernelMixin, TransformerMixin, BaseEstimator):
    """Denoiser whose kernel decay weight is learned from one image pair.

    The optimiser works on the rescaled variable s = w / kappa inside
    [0, W / kappa]; the default upper bound W = guard * max(300 / max(D),
    (5 / kappa) * 1e-5) protects the exponential from degenerating at either
    end.  The kernel mask is frozen once at a small reference weight so the
    objective stays smooth in w.

    Attributes
    ----------
    weight_ : float           learned kernel weight
    n_iter_, result_
    """

    def __init__(self, w0=1.1e-6, lam=0.5, kappa=1e-6, guard=9.0, upper=None,
                 patch_radius=5, interaction_radius=None, threshold=1e-10,
                 mu=0.5, solver_tol=1e-10, tol=1e-8, max_iter=100):
        self.w0 = w0
        self.lam = lam
        self.kappa = kappa
        self.guard = guard
        self.upper = upper
        self.patch_radius = patch_radius
        self.interaction_radius = interaction_radius
        self.threshold = threshold
        self.mu = mu
        self.solver_tol = solver_tol
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        pad = self._pad_for(X)
        pairs = _paired(X, y, pad)
        if len(pairs) != 1:
            raise ValueError("the kernel weight is learned from one image pair")
        noisy, clean = pairs[0]
        cfg = self._patch_config(noisy)
        dis = build_dissimilarity(noisy, cfg)
        ref = assemble_kernel(dis, REFERENCE_WEIGHT, cfg.threshold)
        upper = self.upper
        if upper is None:
            upper = self.guard * max(300.0 / dis.max_entry(),
                                     (5.0 / self.kappa) * 1e-5)
        warm = gr.WarmStart()

        def fun_grad(z):
            w = self.kappa * z[0]
            rg = gr.kernel_weight_gradient(noisy, clean, ref, w, self.lam,
                                           kappa=self.kappa, mu=self.mu,
                                           tol=self.solver_tol, warm=warm)
            return rg.objective, np.array([rg.value])

        def fun(z):
            return gr.weight_objective(noisy, clean, ref, self.kappa * z[0],
                                       self.lam, mu=self.mu,
                                       tol=self.solver_tol, warm=warm)

        res = minimize(fun_grad, np.array([self.w0 / self.kappa]),
                       Box(0.0, upper / self.kappa, n=1),
                       config=self._optimizer_config(), fun=fun)
        self.weight_ = float(self.kappa * res.x[0])
        self.upper_ = float(upper)
        self.n_iter_ = res.iterations
        self.result_ = res
        self._reference_ = ref
        return self

    def transform(self, X):
        return NonlocalMeansDenoiser(
            lam=self.lam, weight=self.weight_, patch_radius=self.patch_radius,
            interaction_radius=self.interaction_radius, threshold=self.threshold,
            mu=self.mu, solver_tol=self.solver_tol,
        ).transform(X)

    def predict(self, X):
        return self.transform(X)
