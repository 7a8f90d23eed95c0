import numpy as np
import pytest

from sparselgs.rasterizer import Gradients, project, render, render_backward
from sparselgs.scene import Camera, Gaussian3D, GaussianCloud, Granularity, inverse_sigmoid, quat_normalize

EXACT = dict(cutoff_sigma=None, transmittance_floor=0.0)


def simple_camera(size=16, f=40.0, z=0.0):
    c = (size - 1) / 2.0
    return Camera(f, f, c, c, size, size, np.eye(3), np.array([0.0, 0.0, z]), near=0.05)


def make_cloud(rows, sem=None):
    means, log_scales, rots, logits, colors = [], [], [], [], []
    for r in rows:
        means.append(r["mean"])
        log_scales.append(r.get("log_scale", (0.0, 0.0, 0.0)))
        rots.append(r.get("rotation", (1.0, 0.0, 0.0, 0.0)))
        logits.append(r.get("opacity_logit", 0.0))
        colors.append(r.get("color", (1.0, 1.0, 1.0)))
    return GaussianCloud(means, log_scales, rots, logits, colors, sem)


def random_cloud(rng, n, d=2, z_range=(3.0, 6.0)):
    means = np.column_stack(
        [rng.uniform(-0.8, 0.8, n), rng.uniform(-0.8, 0.8, n), rng.uniform(*z_range, n)]
    )
    log_scales = rng.uniform(np.log(0.05), np.log(0.4), (n, 3))
    rots = rng.normal(size=(n, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    logits = inverse_sigmoid(rng.uniform(0.15, 0.93, n))
    colors = rng.uniform(0.05, 0.95, (n, 3))
    sem = {Granularity.whole: rng.uniform(-1, 1, (n, d))}
    return GaussianCloud(means, log_scales, rots, logits, colors, sem)


class TestProjection:
    def test_on_axis_projection(self):
        cam = Camera(100, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3))
        cloud = make_cloud([{"mean": (0.0, 0.0, 5.0)}])
        (p,) = project(cloud, cam)
        np.testing.assert_allclose(p.mean2d, [32.0, 32.0])
        assert p.depth == pytest.approx(5.0)

    def test_isotropic_covariance_value(self):
        cam = Camera(100, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3))
        s = np.log(0.1)
        cloud = make_cloud([{"mean": (0.0, 0.0, 5.0), "log_scale": (s, s, s)}])
        (p,) = project(cloud, cam)
        np.testing.assert_allclose(p.cov2d, 4.0 * np.eye(2) + 0.3 * np.eye(2), atol=1e-9)

    def test_behind_camera_culled(self):
        cam = simple_camera()
        cloud = make_cloud([{"mean": (0.0, 0.0, -1.0)}, {"mean": (0.0, 0.0, 4.0)}])
        projected = project(cloud, cam)
        assert [p.parent for p in projected] == [1]

    def test_sorted_by_depth(self):
        cam = simple_camera()
        cloud = make_cloud([{"mean": (0, 0, 6.0)}, {"mean": (0, 0, 2.0)}, {"mean": (0, 0, 4.0)}])
        depths = [p.depth for p in project(cloud, cam)]
        assert depths == sorted(depths)


class TestRenderForward:
    def test_empty_cloud(self):
        cam = simple_camera()
        out = render(GaussianCloud.from_gaussians([]), cam)
        assert np.all(out.color == 0) and np.all(out.alpha == 0)

    def test_single_gaussian_at_center(self):
        cam = simple_camera(size=17, f=40.0)
        cloud = make_cloud(
            [{"mean": (0.0, 0.0, 4.0), "opacity_logit": 45.0, "color": (0.2, 0.5, 0.9)}],
            sem={Granularity.whole: [[0.3, -0.7]]},
        )
        out = render(cloud, cam, [Granularity.whole], alpha_clamp=1.0, **EXACT)
        center = (8, 8)
        np.testing.assert_allclose(out.color[center], [0.2, 0.5, 0.9], atol=1e-9)
        np.testing.assert_allclose(out.features[Granularity.whole][center], [0.3, -0.7], atol=1e-9)
        # default clamp caps the same pixel at 0.99
        out2 = render(cloud, cam, **EXACT)
        np.testing.assert_allclose(out2.color[center], np.array([0.2, 0.5, 0.9]) * 0.99, atol=1e-9)

    def test_two_coincident_gaussians_blend(self):
        cam = simple_camera(size=17)
        rows = [
            {"mean": (0.0, 0.0, 4.0), "opacity_logit": 0.0, "color": (1.0, 0.0, 0.0)},
            {"mean": (0.0, 0.0, 4.0), "opacity_logit": 0.0, "color": (0.0, 1.0, 0.0)},
        ]
        out = render(make_cloud(rows), cam, **EXACT)
        np.testing.assert_allclose(out.color[8, 8], [0.5, 0.25, 0.0], atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        cam = simple_camera()
        cloud = random_cloud(rng, 8)
        out = render(cloud, cam, [Granularity.whole])
        perm = rng.permutation(len(cloud))
        shuffled = GaussianCloud(
            cloud.means[perm],
            cloud.log_scales[perm],
            cloud.rotations[perm],
            cloud.opacity_logits[perm],
            cloud.colors[perm],
            {g: c[perm] for g, c in cloud.sem_codes.items()},
        )
        out2 = render(shuffled, cam, [Granularity.whole])
        np.testing.assert_allclose(out2.color, out.color, atol=1e-12)
        np.testing.assert_allclose(out2.alpha, out.alpha, atol=1e-12)

    def test_zero_opacity_renders_nothing(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 6)
        cloud.opacity_logits[:] = -40.0
        out = render(cloud, simple_camera())
        assert np.abs(out.color).max() < 1e-12
        assert np.abs(out.alpha).max() < 1e-12

    def test_blend_weight_conservation(self):
        rng = np.random.default_rng(123)
        cam = simple_camera()
        for _ in range(100):
            cloud = random_cloud(rng, int(rng.integers(1, 9)))
            cloud.colors[:] = 1.0  # white colors turn the color sum into the weight sum
            out = render(cloud, cam)
            np.testing.assert_allclose(out.color[:, :, 0], out.alpha, atol=1e-9)


def loss_and_grads(cloud, cam, up_color, up_feat, up_alpha=None, pose_delta=None, want_pose=False):
    out, ctx = render(
        cloud, cam, list(up_feat), pose_delta=pose_delta, want_context=True, **EXACT
    )
    val = float(np.sum(out.color * up_color))
    for g, u in up_feat.items():
        val += float(np.sum(out.features[g] * u))
    if up_alpha is not None:
        val += float(np.sum(out.alpha * up_alpha))
    grads = render_backward(ctx, up_color, up_feat, up_alpha, want_pose=want_pose)
    return val, grads


def loss_only(cloud, cam, up_color, up_feat, up_alpha=None, pose_delta=None):
    out = render(cloud, cam, list(up_feat), pose_delta=pose_delta, **EXACT)
    val = float(np.sum(out.color * up_color))
    for g, u in up_feat.items():
        val += float(np.sum(out.features[g] * u))
    if up_alpha is not None:
        val += float(np.sum(out.alpha * up_alpha))
    return val


def relative_group_error(analytic, fd):
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-9)
    return np.abs(analytic - fd).max() / scale


def finite_difference_check(seed, n, want_pose=True, h=1e-6):
    rng = np.random.default_rng(seed)
    cam = simple_camera()
    cloud = random_cloud(rng, n)
    up_color = rng.normal(size=(cam.height, cam.width, 3))
    up_feat = {Granularity.whole: rng.normal(size=(cam.height, cam.width, 2))}
    up_alpha = rng.normal(size=(cam.height, cam.width))
    _, grads = loss_and_grads(cloud, cam, up_color, up_feat, up_alpha, want_pose=want_pose)

    errors = {}
    groups = {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors,
        "sem": cloud.sem_codes[Granularity.whole],
    }
    for name, arr in groups.items():
        fd = np.zeros_like(arr)
        it = np.ndindex(arr.shape)
        for i in it:
            orig = arr[i]
            arr[i] = orig + h
            fp = loss_only(cloud, cam, up_color, up_feat, up_alpha)
            arr[i] = orig - h
            fm = loss_only(cloud, cam, up_color, up_feat, up_alpha)
            arr[i] = orig
            fd[i] = (fp - fm) / (2 * h)
        analytic = {
            "means": grads.means,
            "log_scales": grads.log_scales,
            "rotations": grads.rotations,
            "opacity_logits": grads.opacity_logits,
            "colors": grads.colors,
            "sem": grads.sem_codes[Granularity.whole],
        }[name]
        errors[name] = relative_group_error(analytic, fd)
    if want_pose:
        fd = np.zeros(6)
        for i in range(6):
            xi = np.zeros(6)
            xi[i] = h
            fp = loss_only(cloud, cam, up_color, up_feat, up_alpha, pose_delta=xi)
            xi[i] = -h
            fm = loss_only(cloud, cam, up_color, up_feat, up_alpha, pose_delta=xi)
            fd[i] = (fp - fm) / (2 * h)
        errors["pose"] = relative_group_error(grads.pose, fd)
    return errors


class TestRenderBackward:
    def test_zero_residual_gives_zero_gradients(self):
        rng = np.random.default_rng(2)
        cam = simple_camera()
        cloud = random_cloud(rng, 4)
        out, ctx = render(cloud, cam, [Granularity.whole], want_context=True)
        zero = np.zeros_like(out.color)
        grads = render_backward(ctx, zero, {Granularity.whole: np.zeros_like(out.features[Granularity.whole])})
        for arr in (grads.means, grads.log_scales, grads.rotations, grads.opacity_logits, grads.colors):
            assert np.all(arr == 0)

    def test_invisible_gaussian_gets_no_color_gradient(self):
        cam = simple_camera()
        rows = [
            {"mean": (0.0, 0.0, 4.0), "opacity_logit": 3.0, "color": (1, 0, 0)},
            # far off screen and small, so its truncated footprint misses the frame
            {"mean": (50.0, 50.0, 4.0), "log_scale": (-3.0, -3.0, -3.0), "opacity_logit": 3.0, "color": (0, 1, 0)},
        ]
        cloud = make_cloud(rows)
        out, ctx = render(cloud, cam, want_context=True)
        grads = render_backward(ctx, np.ones_like(out.color), {})
        assert np.all(grads.colors[1] == 0)
        assert np.abs(grads.colors[0]).max() > 0

    def test_stale_context_rejected(self):
        rng = np.random.default_rng(3)
        cam = simple_camera()
        cloud = random_cloud(rng, 3)
        out, ctx = render(cloud, cam, want_context=True)
        cloud.means[0, 0] += 0.1
        cloud.bump_version()
        with pytest.raises(ValueError, match="forward/backward mismatch"):
            render_backward(ctx, np.zeros_like(out.color), {})

    def test_gradient_check_small_scene(self):
        errors = finite_difference_check(seed=0, n=3)
        for name, err in errors.items():
            assert err < 1e-4, f"{name}: {err:.2e}"

    def test_gradient_check_opacity_example(self):
        # single-Gaussian scene, matches the documented finite-difference oracle
        errors = finite_difference_check(seed=9, n=1, want_pose=False)
        assert errors["opacity_logits"] < 1e-4
