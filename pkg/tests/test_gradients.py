"""Adjoint-based reduced gradients against central-difference oracles."""

import numpy as np
import pytest

from nldenoise import gradients as gr
from nldenoise.fem import build_fe_matrices
from nldenoise.imaging import NoiseSpec, add_gaussian_noise, textured_image
from nldenoise.kernel import PatchConfig, assemble_kernel, build_dissimilarity, reweight

SOLVER_TOL = 1e-12


def make_instance(height=12, width=12, *, rho=1, eps=2, weight=1e-4,
                  iota=1e-9, seed=0):
    clean = textured_image(height, width, pad=eps, seed=seed)
    noisy = add_gaussian_noise(clean, NoiseSpec(100.0, seed))
    dis = build_dissimilarity(noisy, PatchConfig(rho, eps, iota))
    kern = assemble_kernel(dis, weight, iota)
    return noisy, clean, kern


def central_difference(fun, x, h):
    return (fun(x + h) - fun(x - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# Scalar fidelity weight
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("lam", [0.5, 5.0, 36.0])
def test_scalar_gradient_matches_central_differences(lam):
    noisy, clean, kern = make_instance(seed=1)
    rg = gr.scalar_fidelity_gradient(noisy, clean, kern, lam, tol=SOLVER_TOL)

    def objective(value):
        return gr.batch_objective([(noisy, clean)], [kern], value, tol=SOLVER_TOL)

    fd = central_difference(objective, lam, 1e-4 * max(1.0, lam))
    assert abs(rg.value - fd) <= 1e-5 * max(1.0, abs(fd))


def test_scalar_objective_matches_gradient_report():
    noisy, clean, kern = make_instance(seed=2)
    rg = gr.scalar_fidelity_gradient(noisy, clean, kern, 12.0, tol=SOLVER_TOL)
    direct = gr.batch_objective([(noisy, clean)], [kern], 12.0, tol=SOLVER_TOL)
    assert rg.objective == direct


def test_denoise_image_shape_and_report():
    noisy, _, kern = make_instance(seed=3)
    den, report = gr.denoise_image(noisy, kern, 25.0)
    assert (den.height, den.width, den.pad) == (noisy.height, noisy.width, noisy.pad)
    assert report.converged
    assert not den.values[: noisy.pad].any()  # ring still zero


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


def test_batch_of_one_is_the_scalar_gradient():
    noisy, clean, kern = make_instance(seed=4)
    a = gr.scalar_fidelity_gradient(noisy, clean, kern, 9.0, tol=SOLVER_TOL)
    b = gr.batch_fidelity_gradient([(noisy, clean)], [kern], 9.0, tol=SOLVER_TOL)
    assert a.value == b.value
    assert a.objective == b.objective


def test_duplicated_pair_reproduces_single_image_values_exactly():
    # averaging scales are powers of two, so a duplicated image must give
    # bit-identical gradient and objective
    noisy, clean, kern = make_instance(seed=5)
    single = gr.scalar_fidelity_gradient(noisy, clean, kern, 14.0, tol=SOLVER_TOL)
    double = gr.batch_fidelity_gradient(
        [(noisy, clean), (noisy, clean)], [kern, kern], 14.0, tol=SOLVER_TOL
    )
    assert double.value == single.value
    assert double.objective == single.objective


def test_two_image_batch_gradient_matches_central_differences():
    n1, c1, k1 = make_instance(seed=6)
    n2, c2, k2 = make_instance(seed=7)
    pairs = [(n1, c1), (n2, c2)]
    kernels = [k1, k2]
    lam = 18.0
    rg = gr.batch_fidelity_gradient(pairs, kernels, lam, tol=SOLVER_TOL)

    def objective(value):
        return gr.batch_objective(pairs, kernels, value, tol=SOLVER_TOL)

    fd = central_difference(objective, lam, 1e-4 * lam)
    assert abs(rg.value - fd) <= 1e-5 * max(1.0, abs(fd))
    assert rg.diagnostics["batch_size"] == 2


def test_batch_validation():
    noisy, clean, kern = make_instance()
    with pytest.raises(ValueError, match="empty"):
        gr.batch_fidelity_gradient([], [], 1.0)
    with pytest.raises(ValueError, match="kernel"):
        gr.batch_fidelity_gradient([(noisy, clean)], [], 1.0)


def test_warm_start_caches_solutions():
    noisy, clean, kern = make_instance(seed=8)
    warm = gr.WarmStart()
    first = gr.scalar_fidelity_gradient(noisy, clean, kern, 21.0,
                                        tol=SOLVER_TOL, warm=warm)
    assert 0 in warm.state and 0 in warm.adjoint
    again = gr.scalar_fidelity_gradient(noisy, clean, kern, 21.0,
                                        tol=SOLVER_TOL, warm=warm)
    cold_iters = first.diagnostics["images"][0]["state"].iterations
    warm_iters = again.diagnostics["images"][0]["state"].iterations
    assert warm_iters <= cold_iters
    assert abs(again.value - first.value) <= 1e-8 * max(1.0, abs(first.value))


# ---------------------------------------------------------------------------
# Spatial fidelity field
# ---------------------------------------------------------------------------


def test_spatial_gradient_matches_directional_differences():
    noisy, clean, kern = make_instance(height=10, width=10, seed=9)
    h, w = noisy.height, noisy.width
    fe = build_fe_matrices(h, w)
    rng = np.random.default_rng(0)
    lam = rng.uniform(20.0, 60.0, size=(h + 1, w + 1))
    beta = 1e-4
    rg = gr.spatial_fidelity_gradient(noisy, clean, kern, lam, beta, fe=fe,
                                      tol=SOLVER_TOL)
    for trial in range(3):
        direction = rng.normal(size=(h + 1, w + 1))
        direction /= np.linalg.norm(direction)
        analytic = fe.h1_product(rg.value.ravel(), direction.ravel())

        def objective(step):
            return gr.spatial_objective(noisy, clean, kern,
                                        lam + step * direction, beta,
                                        fe=fe, tol=SOLVER_TOL)

        fd = central_difference(objective, 0.0, 1e-3)
        assert abs(analytic - fd) <= 1e-4 * max(1.0, abs(fd))


def test_spatial_constant_field_reduces_to_scalar_gradient():
    # with beta = 0 and a constant nodal field, the total force equals the
    # scalar derivative and the objectives coincide exactly
    noisy, clean, kern = make_instance(seed=10)
    h, w = noisy.height, noisy.width
    fe = build_fe_matrices(h, w)
    c = 33.0
    lam = np.full((h + 1, w + 1), c)
    spatial = gr.spatial_fidelity_gradient(noisy, clean, kern, lam, 0.0,
                                           fe=fe, tol=SOLVER_TOL)
    scalar = gr.scalar_fidelity_gradient(noisy, clean, kern, c, tol=SOLVER_TOL)
    total_force = float(spatial.diagnostics["force"].sum())
    assert abs(total_force - scalar.value) <= 1e-10 * max(1.0, abs(scalar.value))
    assert spatial.objective == scalar.objective


def test_spatial_objective_includes_tikhonov_term():
    noisy, clean, kern = make_instance(seed=11)
    h, w = noisy.height, noisy.width
    fe = build_fe_matrices(h, w)
    lam = np.full((h + 1, w + 1), 15.0)
    beta = 0.25
    with_reg = gr.spatial_objective(noisy, clean, kern, lam, beta, fe=fe,
                                    tol=SOLVER_TOL)
    without = gr.spatial_objective(noisy, clean, kern, lam, 0.0, fe=fe,
                                   tol=SOLVER_TOL)
    expected = 0.5 * beta * fe.h1_norm_sq(lam.ravel())
    assert with_reg - without == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# Kernel weight
# ---------------------------------------------------------------------------


def test_weight_gradient_matches_central_differences():
    noisy, clean, _ = make_instance(seed=12)
    dis = build_dissimilarity(noisy, PatchConfig(1, 2, 1e-10))
    ref = assemble_kernel(dis, 1e-6, 1e-10)
    lam = 0.5
    for w in (1e-6, 2e-6, 8e-6):
        rg = gr.kernel_weight_gradient(noisy, clean, ref, w, lam, tol=SOLVER_TOL)

        def objective(value):
            return gr.weight_objective(noisy, clean, ref, value, lam,
                                       tol=SOLVER_TOL)

        fd = central_difference(objective, w, 1e-4 * w)
        assert abs(rg.value - fd) <= 1e-4 * max(1.0, abs(fd))


def test_weight_gradient_kappa_chain_rule():
    noisy, clean, _ = make_instance(seed=13)
    dis = build_dissimilarity(noisy, PatchConfig(1, 2, 1e-10))
    ref = assemble_kernel(dis, 1e-6, 1e-10)
    plain = gr.kernel_weight_gradient(noisy, clean, ref, 3e-6, 0.5, tol=SOLVER_TOL)
    scaled = gr.kernel_weight_gradient(noisy, clean, ref, 3e-6, 0.5,
                                       kappa=1e-6, tol=SOLVER_TOL)
    assert scaled.value == plain.value * 1e-6
    assert scaled.objective == plain.objective


def test_weight_objective_uses_frozen_reference_mask():
    noisy, clean, _ = make_instance(seed=14)
    dis = build_dissimilarity(noisy, PatchConfig(1, 2, 1e-10))
    ref = assemble_kernel(dis, 1e-6, 1e-10)
    direct = gr.weight_objective(noisy, clean, ref, 5e-6, 0.5, tol=SOLVER_TOL)
    kern = reweight(ref, 5e-6)
    via_kernel = gr.batch_objective([(noisy, clean)], [kern], 0.5, tol=SOLVER_TOL)
    assert direct == via_kernel


# ---------------------------------------------------------------------------
# Loss surface
# ---------------------------------------------------------------------------


def test_loss_surface_matches_pointwise_evaluations():
    noisy, clean, _ = make_instance(seed=15)
    dis = build_dissimilarity(noisy, PatchConfig(1, 2, 1e-10))
    ref = assemble_kernel(dis, 1e-6, 1e-10)
    lambdas = np.array([0.2, 1.0, 5.0])
    weights = np.array([1e-6, 4e-6])
    surface = gr.loss_surface(noisy, clean, ref, lambdas, weights, tol=1e-10)
    assert surface.shape == (2, 3)
    for iw, w in enumerate(weights):
        for il, lam in enumerate(lambdas):
            direct = gr.weight_objective(noisy, clean, ref, w, lam, tol=1e-10)
            assert surface[iw, il] == pytest.approx(direct, rel=1e-8)
