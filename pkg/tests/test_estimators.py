"""Estimator API: validation, fit/transform contracts, learned attributes."""

import numpy as np
import pytest
from sklearn.base import clone

from nldenoise.estimators import (
    REFERENCE_WEIGHT,
    KernelWeightDenoiser,
    NonlocalMeansDenoiser,
    ScalarFidelityDenoiser,
    SpatialFidelityDenoiser,
    as_image,
    as_image_list,
)
from nldenoise.imaging import Image, NoiseSpec, add_gaussian_noise, textured_image

FAST = dict(patch_radius=1, interaction_radius=2)


def make_pair(height=12, width=12, variance=100.0, seed=3):
    clean = textured_image(height, width, pad=2, seed=seed)
    noisy = add_gaussian_noise(clean, NoiseSpec(variance, seed=seed))
    return noisy.interior.copy(), clean.interior.copy()


# ---------------------------------------------------------------------------
# Scikit-learn plumbing
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("estimator", [
    NonlocalMeansDenoiser(lam=12.0, interaction_radius=3),
    ScalarFidelityDenoiser(lam0=7.0, upper=400.0, max_iter=5),
    SpatialFidelityDenoiser(beta=1e-3, lam0=50.0),
    KernelWeightDenoiser(w0=2e-6, guard=6.0),
])
def test_clone_and_get_params_roundtrip(estimator):
    params = estimator.get_params()
    twin = clone(estimator)
    assert twin.get_params() == params
    assert twin is not estimator


def test_set_params_updates_attributes():
    est = NonlocalMeansDenoiser()
    est.set_params(lam=5.0, weight=2e-4)
    assert est.lam == 5.0
    assert est.weight == 2e-4
    with pytest.raises(ValueError):
        est.set_params(no_such_parameter=1)


# ---------------------------------------------------------------------------
# Input validation helpers
# ---------------------------------------------------------------------------


def test_as_image_wraps_arrays_and_repads_images():
    arr = np.arange(12.0).reshape(3, 4)
    img = as_image(arr, pad=2)
    assert isinstance(img, Image)
    assert img.pad == 2
    np.testing.assert_array_equal(img.interior, arr)
    # an Image with the wrong ring is re-padded, preserving the interior
    repadded = as_image(img, pad=1)
    assert repadded.pad == 1
    np.testing.assert_array_equal(repadded.interior, arr)
    assert as_image(img, pad=2) is img


def test_as_image_rejects_bad_input():
    with pytest.raises(ValueError, match="2-d"):
        as_image(np.zeros(5), pad=1)
    with pytest.raises(ValueError, match="non-finite"):
        as_image(np.full((3, 3), np.nan), pad=1)


def test_as_image_list_singletons_and_batches():
    arr = np.ones((4, 4))
    assert len(as_image_list(arr, pad=1)) == 1
    assert len(as_image_list([arr, arr, arr], pad=1)) == 3
    with pytest.raises(ValueError, match="empty"):
        as_image_list([], pad=1)


# ---------------------------------------------------------------------------
# Fixed-parameter denoiser
# ---------------------------------------------------------------------------


def test_denoiser_transform_shapes():
    noisy, _ = make_pair()
    est = NonlocalMeansDenoiser(lam=30.0, **FAST).fit(noisy)
    out = est.transform(noisy)
    assert isinstance(out, np.ndarray)
    assert out.shape == noisy.shape
    batch = est.transform([noisy, noisy])
    assert isinstance(batch, list) and len(batch) == 2
    np.testing.assert_array_equal(batch[0], out)
    np.testing.assert_array_equal(est.predict(noisy), out)


def test_denoiser_accepts_image_objects():
    noisy, _ = make_pair()
    est = NonlocalMeansDenoiser(lam=30.0, **FAST)
    from_image = est.fit(noisy).transform(Image.from_interior(noisy, 2))
    np.testing.assert_allclose(from_image, est.transform(noisy), rtol=1e-12)


def test_denoiser_rejects_negative_parameters():
    noisy, _ = make_pair()
    with pytest.raises(ValueError, match="non-negative"):
        NonlocalMeansDenoiser(lam=-1.0, **FAST).fit(noisy)


def test_denoiser_large_lambda_returns_input():
    noisy, _ = make_pair()
    out = NonlocalMeansDenoiser(lam=1e9, **FAST).fit(noisy).transform(noisy)
    np.testing.assert_allclose(out, noisy, atol=1e-5)


# ---------------------------------------------------------------------------
# Scalar fidelity learning
# ---------------------------------------------------------------------------


def test_scalar_fit_learns_positive_lambda():
    noisy, clean = make_pair()
    est = ScalarFidelityDenoiser(lam0=10.0, upper=1e4, tol=1e-6, max_iter=40,
                                 **FAST)
    est.fit(noisy, clean)
    assert 0.0 < est.lam_ <= 1e4
    assert est.n_iter_ == est.result_.iterations
    assert est.result_.trace
    denoised = est.transform(noisy)
    assert np.linalg.norm(denoised - clean) < np.linalg.norm(noisy - clean)


def test_scalar_fit_accepts_batches():
    n1, c1 = make_pair(seed=3)
    n2, c2 = make_pair(seed=4)
    est = ScalarFidelityDenoiser(lam0=10.0, tol=1e-5, max_iter=25, **FAST)
    est.fit([n1, n2], [c1, c2])
    assert np.isfinite(est.lam_)
    assert est.lam_ > 0


def test_scalar_fit_rejects_mismatched_pairs():
    n1, c1 = make_pair()
    with pytest.raises(ValueError, match="noisy images but"):
        ScalarFidelityDenoiser(**FAST).fit([n1, n1], [c1])
    with pytest.raises(ValueError, match="shapes differ"):
        ScalarFidelityDenoiser(**FAST).fit([n1], [c1[:-1, :-1]])


# ---------------------------------------------------------------------------
# Spatial fidelity learning
# ---------------------------------------------------------------------------


def test_spatial_fit_learns_corner_field():
    noisy, clean = make_pair(height=10, width=11)
    est = SpatialFidelityDenoiser(lam0=30.0, upper=255.0, beta=1e-4, tol=1e-5,
                                  max_iter=12, **FAST)
    est.fit(noisy, clean)
    assert est.lam_map_.shape == (11, 12)
    assert est.lam_map_.min() >= 0.0
    assert est.lam_map_.max() <= 255.0
    assert est.lam_map_.std() > 0  # the field actually moved off the constant
    denoised = est.transform(noisy)
    assert denoised.shape == noisy.shape
    assert np.linalg.norm(denoised - clean) < np.linalg.norm(noisy - clean)


def test_spatial_fit_requires_single_pair():
    noisy, clean = make_pair()
    with pytest.raises(ValueError, match="one image pair"):
        SpatialFidelityDenoiser(**FAST).fit([noisy, noisy], [clean, clean])


def test_spatial_transform_enforces_fitted_shape():
    noisy, clean = make_pair(height=10, width=10)
    est = SpatialFidelityDenoiser(lam0=30.0, tol=1e-4, max_iter=3, **FAST)
    est.fit(noisy, clean)
    with pytest.raises(ValueError, match="fitted"):
        est.transform(np.zeros((12, 12)))


# ---------------------------------------------------------------------------
# Kernel weight learning
# ---------------------------------------------------------------------------


def test_weight_fit_stays_inside_guarded_box():
    noisy, clean = make_pair()
    est = KernelWeightDenoiser(w0=1.1e-6, lam=0.5, tol=1e-6, max_iter=30,
                               **FAST)
    est.fit(noisy, clean)
    assert 0.0 < est.weight_ <= est.upper_
    assert est.n_iter_ == est.result_.iterations
    assert est._reference_.weight == REFERENCE_WEIGHT


def test_weight_fit_default_upper_bound_formula():
    noisy, clean = make_pair()
    est = KernelWeightDenoiser(guard=9.0, kappa=1e-6, tol=1e-4, max_iter=2,
                               **FAST)
    est.fit(noisy, clean)
    from nldenoise.kernel import PatchConfig, build_dissimilarity

    cfg = PatchConfig(patch_radius=1, interaction_radius=2, threshold=est.threshold)
    dis = build_dissimilarity(as_image(noisy, 2), cfg)
    expected = 9.0 * max(300.0 / dis.max_entry(), (5.0 / 1e-6) * 1e-5)
    assert est.upper_ == pytest.approx(expected, rel=1e-12)


def test_weight_fit_explicit_upper_bound():
    noisy, clean = make_pair()
    est = KernelWeightDenoiser(upper=5e-4, tol=1e-4, max_iter=2, **FAST)
    est.fit(noisy, clean)
    assert est.upper_ == 5e-4
    assert est.weight_ <= 5e-4


def test_weight_fit_requires_single_pair():
    noisy, clean = make_pair()
    with pytest.raises(ValueError, match="one image pair"):
        KernelWeightDenoiser(**FAST).fit([noisy, noisy], [clean, clean])
