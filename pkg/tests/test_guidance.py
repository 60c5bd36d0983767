import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from sketchforge import guidance as vg
from sketchforge import render as vrender
from sketchforge import schedule as vsched
from sketchforge import trainer as vtrainer

from helpers import fixed_pose, make_random_grid


@pytest.fixture(scope="module")
def sched():
    return vsched.linear_schedule(T=1000)


# --- classifier-free guidance combination ---

def test_cfg_scale_zero_is_conditional(sched):
    rng = np.random.default_rng(0)
    resp = vg.GuidanceResponse(rng.standard_normal((3, 3, 3)),
                               rng.standard_normal((3, 3, 3)))
    np.testing.assert_array_equal(vg.cfg_combine(resp, 0.0), resp.eps_cond)


def test_cfg_equal_predictions_fixed_point(sched):
    e = np.random.default_rng(1).standard_normal((2, 2, 3))
    resp = vg.GuidanceResponse(e, e.copy())
    for s in (0.0, 1.0, 100.0):
        np.testing.assert_array_equal(vg.cfg_combine(resp, s), e)


def test_cfg_scalar_case():
    resp = vg.GuidanceResponse(np.array([1.0]), np.array([0.0]))
    assert vg.cfg_combine(resp, 2.0)[0] == 3.0


def test_cfg_shape_mismatch():
    resp = vg.GuidanceResponse(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        vg.cfg_combine(resp, 1.0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), s=st.floats(0, 50))
def test_cfg_is_affine(a, b, s):
    rng = np.random.default_rng(17)
    r1 = vg.GuidanceResponse(rng.standard_normal(4), rng.standard_normal(4))
    r2 = vg.GuidanceResponse(rng.standard_normal(4), rng.standard_normal(4))
    combo = vg.GuidanceResponse(a * r1.eps_cond + b * r2.eps_cond,
                                a * r1.eps_uncond + b * r2.eps_uncond)
    lhs = vg.cfg_combine(combo, s)
    rhs = a * vg.cfg_combine(r1, s) + b * vg.cfg_combine(r2, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# --- the Dirac oracle provider ---

def test_dirac_recovers_true_noise(sched):
    rng = np.random.default_rng(2)
    target = rng.uniform(-1, 1, (4, 4, 3))
    provider = vg.DiracGuidanceProvider(sched, target)
    eps = rng.standard_normal(target.shape)
    t = 317
    x_t = vsched.add_noise(sched, target, t, eps)
    resp = provider.predict(vg.GuidanceRequest(x_t, t, "", None, 0.0, 0))
    np.testing.assert_allclose(resp.eps_cond, eps, atol=1e-9)


def test_dirac_matched_render_gives_zero_residual(sched):
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (5, 5, 3))
    provider = vg.DiracGuidanceProvider(sched, x)
    for t in (5, 400, 990):
        eps = rng.standard_normal(x.shape)
        x_t = vsched.add_noise(sched, x, t, eps)
        resp = provider.predict(vg.GuidanceRequest(x_t, t, "", None, 0.0, 0))
        np.testing.assert_allclose(resp.eps_cond - eps, 0.0, atol=1e-9)


def test_dirac_residual_closed_form(sched):
    # eps_pred - eps = sqrt(ab/(1-ab)) * (x - x*) in the guidance domain
    rng = np.random.default_rng(4)
    target = rng.uniform(-1, 1, (3, 3, 3))
    x = rng.uniform(-1, 1, (3, 3, 3))
    provider = vg.DiracGuidanceProvider(sched, target)
    t = 123
    eps = rng.standard_normal(x.shape)
    x_t = vsched.add_noise(sched, x, t, eps)
    resp = provider.predict(vg.GuidanceRequest(x_t, t, "", None, 0.0, 0))
    ab = sched.alpha_bar_t(t)
    np.testing.assert_allclose(
        resp.eps_cond - eps, np.sqrt(ab / (1 - ab)) * (x - target), atol=1e-9
    )


def test_dirac_lambda_zero_ignores_sketch_target(sched):
    rng = np.random.default_rng(5)
    text = rng.uniform(-1, 1, (4, 4, 3))
    p1 = vg.DiracGuidanceProvider(sched, text, target_sketch=rng.uniform(-1, 1, (4, 4, 3)))
    p2 = vg.DiracGuidanceProvider(sched, text, target_sketch=rng.uniform(-1, 1, (4, 4, 3)))
    x_t = rng.standard_normal((4, 4, 3))
    r1 = p1.predict(vg.GuidanceRequest(x_t, 50, "", None, 0.0, 0))
    r2 = p2.predict(vg.GuidanceRequest(x_t, 50, "", None, 0.0, 0))
    np.testing.assert_array_equal(r1.eps_cond, r2.eps_cond)


def test_dirac_lambda_blends_targets(sched):
    rng = np.random.default_rng(6)
    text = rng.uniform(-1, 1, (2, 2, 3))
    sk = rng.uniform(-1, 1, (2, 2, 3))
    provider = vg.DiracGuidanceProvider(sched, text, target_sketch=sk)
    x_t = rng.standard_normal((2, 2, 3))
    t = 200
    lam = 0.3
    resp = provider.predict(vg.GuidanceRequest(x_t, t, "", None, lam, 0))
    expected = vg.dirac_eps(x_t, (1 - lam) * text + lam * sk, t, sched)
    np.testing.assert_allclose(resp.eps_cond, expected, atol=1e-12)


# --- the distillation image gradient ---

def test_sds_grad_zero_when_prediction_matches(sched):
    eps = np.random.default_rng(7).standard_normal((3, 3, 3))
    np.testing.assert_array_equal(vg.sds_grad_image(eps, eps, 10, sched), 0.0)


def test_sds_grad_scales_with_weighting():
    const = vsched.linear_schedule(T=100, weighting="constant")
    omab = vsched.linear_schedule(T=100, weighting="one_minus_alpha_bar")
    rng = np.random.default_rng(8)
    eps_hat = rng.standard_normal((2, 2, 3))
    eps = rng.standard_normal((2, 2, 3))
    t = 30
    g1 = vg.sds_grad_image(eps_hat, eps, t, const)
    g2 = vg.sds_grad_image(eps_hat, eps, t, omab)
    np.testing.assert_allclose(g2, g1 * (1 - omab.alpha_bar_t(t)), atol=1e-12)


def test_sds_grad_includes_domain_remap_chain():
    s = vsched.linear_schedule(T=100, weighting="constant")
    eps_hat = np.array([[[1.0, 0.0, 0.0]]])
    eps = np.zeros_like(eps_hat)
    g = vg.sds_grad_image(eps_hat, eps, 10, s)
    assert g[0, 0, 0] == vsched.GUIDANCE_DOMAIN_SCALE  # w(t)=1 times d(2x-1)/dx


def test_dirac_sds_gradient_symbolic_scalar(sched):
    # end-to-end scalar derivation: render value x (in [0,1]), target x*
    t = 250
    x_val, target_val = 0.63, 0.22
    eps_val = 0.4
    target_g = vsched.to_guidance_domain(np.full((1, 1, 3), target_val))
    provider = vg.DiracGuidanceProvider(sched, target_g)
    x = np.full((1, 1, 3), x_val)
    eps = np.full((1, 1, 3), eps_val)
    x_t = vsched.add_noise(sched, vsched.to_guidance_domain(x), t, eps)
    resp = provider.predict(vg.GuidanceRequest(x_t, t, "", None, 0.0, 0))
    eps_hat = vg.cfg_combine(resp, 0.0)
    g = vg.sds_grad_image(eps_hat, eps, t, sched)

    ab, w = sympy.symbols("ab w", positive=True)
    xs, ts_, es = sympy.symbols("x xstar eps")
    xg, tg = 2 * xs - 1, 2 * ts_ - 1
    xt = sympy.sqrt(ab) * xg + sympy.sqrt(1 - ab) * es
    eps_pred = (xt - sympy.sqrt(ab) * tg) / sympy.sqrt(1 - ab)
    grad = w * (eps_pred - es) * 2  # times d(guidance)/d(image)
    expected = grad.subs({
        ab: sched.alpha_bar_t(t), w: vsched.weight(sched, t),
        xs: x_val, ts_: target_val, es: eps_val,
    })
    assert g[0, 0, 0] == pytest.approx(float(expected), rel=1e-10)
    # and the closed-form coefficient on (x - x*)
    coeff = vsched.weight(sched, t) * np.sqrt(
        sched.alpha_bar_t(t) / (1 - sched.alpha_bar_t(t))) * 4.0
    assert g[0, 0, 0] == pytest.approx(coeff * (x_val - target_val), rel=1e-10)


def test_conditioned_gradient_reduces_to_unconditioned(sched):
    # s = 0, lambda = 0, sketch-blind provider: bitwise equality
    rng = np.random.default_rng(9)
    text = rng.uniform(-1, 1, (4, 4, 3))
    plain = vg.DiracGuidanceProvider(sched, text)  # never sees a sketch
    conditioned = vg.DiracGuidanceProvider(sched, text,
                                           target_sketch=rng.uniform(-1, 1, (4, 4, 3)))
    t = 77
    eps = rng.standard_normal((4, 4, 3))
    x_t = rng.standard_normal((4, 4, 3))
    sketch = rng.random((8, 8))
    r_plain = plain.predict(vg.GuidanceRequest(x_t, t, "p", None, 0.0, 0))
    r_cond = conditioned.predict(vg.GuidanceRequest(x_t, t, "p", sketch, 0.0, 0))
    g_plain = vg.sds_grad_image(vg.cfg_combine(r_plain, 0.0), eps, t, sched)
    g_cond = vg.sds_grad_image(vg.cfg_combine(r_cond, 0.0), eps, t, sched)
    assert np.array_equal(g_plain, g_cond)


def test_descent_decreases_distance_to_target(sched):
    # Dirac provider, fixed view, s=0: smoothed ||x - x*||^2 decreases
    cfg = vtrainer.TrainConfig(
        iterations=200, seed=21, render_size=24, n_samples=16,
        grid_resolution=16, camera_mode="fixed", guidance_scale=0.0,
        weight_sketch=0.0, weight_emptiness=0.0, weight_center_depth=0.0,
        probe_every=1,
    )
    pose = vrender.turntable_pose(cfg.sketch_azimuth, cfg.sketch_elevation,
                                  2.75, 24, cfg.fov_y)
    target_grid = make_random_grid(77, resolution=(16, 16, 16), logit_loc=0.0)
    target = vrender.render(target_grid, pose, n_samples=16).rgb
    provider = vg.DiracGuidanceProvider(sched, vsched.to_guidance_domain(target))
    grid = cfg.make_grid()
    tr = vtrainer.Trainer(grid, cfg, sched, provider,
                          probe_pose=pose, probe_target=target)
    dists = []
    for i in range(200):
        tr.train_step(i)
        out = vrender.render(grid, pose, n_samples=16)
        dists.append(float(((out.rgb - target) ** 2).sum()))
    smoothed = np.convolve(dists, np.ones(25) / 25, mode="valid")
    assert smoothed[-1] < 0.5 * smoothed[0]
    assert np.mean(smoothed[-20:]) < np.mean(smoothed[:20])


# --- lambda policy ---

def test_lambda_policy_exact_view():
    assert vg.lambda_policy(0.5, 0.5, np.radians(15)) == 1.0


def test_lambda_policy_opposite_view():
    assert vg.lambda_policy(np.pi, 0.0, np.radians(15)) == 0.0


def test_lambda_policy_boundary_closed():
    tol = np.radians(15)
    assert vg.lambda_policy(tol, 0.0, tol) == 1.0
    assert vg.lambda_policy(np.nextafter(tol, 1.0), 0.0, tol) == 0.0


def test_lambda_policy_wraps_circle():
    assert vg.lambda_policy(np.radians(359), np.radians(1), np.radians(15)) == 1.0


def test_lambda_policy_binary_image():
    rng = np.random.default_rng(10)
    vals = {vg.lambda_policy(rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi),
                             np.radians(20)) for _ in range(500)}
    assert vals <= {0.0, 1.0}


# --- view-dependent prompting ---

@pytest.mark.parametrize("azimuth_deg,suffix", [
    (0, "front view"), (30, "front view"), (-30, "front view"), (45, "front view"),
    (46, "side view"), (90, "side view"), (-90, "side view"), (135, "side view"),
    (136, "back view"), (180, "back view"), (225, "side view"), (320, "front view"),
])
def test_view_prompt_bins(azimuth_deg, suffix):
    out = vg.view_prompt("a ripe strawberry", np.radians(azimuth_deg))
    assert out == f"a ripe strawberry, {suffix}"


def test_view_prompt_side_symmetry():
    left = vg.view_prompt("p", np.radians(90))
    right = vg.view_prompt("p", np.radians(-90))
    assert left == right


def test_request_validation():
    with pytest.raises(ValueError):
        vg.GuidanceRequest(np.zeros((2, 2, 3)), 1, "", None, 1.5, 0)
    with pytest.raises(ValueError):
        vg.GuidanceRequest(np.full((2, 2, 3), np.nan), 1, "", None, 0.5, 0)


def test_view_bank_selects_nearest(sched):
    rng = np.random.default_rng(11)
    t0 = rng.uniform(-1, 1, (2, 2, 3))
    t1 = rng.uniform(-1, 1, (2, 2, 3))
    bank = vg.DiracViewBank(sched, [(0.0, 0.0, t0), (np.pi, 0.0, t1)])
    x_t = rng.standard_normal((2, 2, 3))
    near0 = bank.predict(vg.GuidanceRequest(x_t, 40, "", None, 0.0, 0, azimuth=0.2, elevation=0.0))
    near1 = bank.predict(vg.GuidanceRequest(x_t, 40, "", None, 0.0, 0, azimuth=np.pi - 0.2, elevation=0.0))
    np.testing.assert_array_equal(near0.eps_cond, vg.dirac_eps(x_t, t0, 40, sched))
    np.testing.assert_array_equal(near1.eps_cond, vg.dirac_eps(x_t, t1, 40, sched))
