"""Unit tests for frustum encodings, ray generation and volume rendering."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from posefield.core import diff
from posefield.core.field import (
    ConicalFrustum,
    EncodingConfig,
    FieldConfig,
    GaussianRegion,
    RadianceField,
    anneal_weights,
    annealed_encode,
    camera_rays,
    coarse_edges,
    composite,
    encoding_at,
    fine_edges,
    frustum_moments,
    frustum_to_gaussian,
    ipe_encode,
    loss_rgb,
    pixel_centers,
    pose_rays,
    posed_rays,
    positional_encode,
    render_image,
    render_ray,
    render_rays,
)
from posefield.core.geom import CameraIntrinsics, look_at


@pytest.fixture
def small_cfg():
    return FieldConfig(levels=3, dir_levels=1, hidden=8, depth=2, coarse_samples=8, fine_samples=8, chunk=16)


@pytest.fixture
def field(small_cfg):
    return RadianceField(small_cfg, np.random.default_rng(0))


@pytest.fixture
def camera():
    return look_at(np.array([2.0, 0.5, 1.0]), np.zeros(3))


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(8.0, 8.0, 4.0, 4.0)


def _integrate(f, t0, t1):
    return quad(f, t0, t1, epsabs=0.0, epsrel=1e-12)[0]


# ---------------------------------------------------------------------------
# Frustum moments and encodings
# ---------------------------------------------------------------------------

class TestFrustumMoments:

    @pytest.mark.parametrize('t0, t1', [(1.0, 1.5), (0.2, 3.0), (2.0, 2.01)])
    def test_moments_match_quadrature(self, t0, t1):
        """A cone section has density proportional to t^2 and disc radius r t."""
        r = 0.05
        mass = _integrate(lambda t: t ** 2, t0, t1)
        mean = _integrate(lambda t: t ** 3, t0, t1) / mass
        var = _integrate(lambda t: (t - mean) ** 2 * t ** 2, t0, t1) / mass
        radial = _integrate(lambda t: (r * t) ** 2 / 4.0 * t ** 2, t0, t1) / mass
        mean_t, var_t, var_r = frustum_moments(t0, t1, r)
        assert mean_t == pytest.approx(mean, rel=1e-6)
        assert var_t == pytest.approx(var, rel=1e-3, abs=1e-12)
        assert var_r == pytest.approx(radial, rel=1e-6)

    def test_frustum_validation(self):
        with pytest.raises(ValueError):
            ConicalFrustum(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.1, 2.0, 1.0)
        with pytest.raises(ValueError):
            ConicalFrustum(np.zeros(3), np.array([0.0, 0.0, 1.0]), -0.1, 1.0, 2.0)

    def test_gaussian_lies_on_axis(self):
        d = np.array([0.0, 0.0, 1.0])
        region = frustum_to_gaussian(ConicalFrustum(np.array([1.0, 2.0, 0.0]), d, 0.01, 1.0, 2.0))
        mean_t, var_t, var_r = frustum_moments(1.0, 2.0, 0.01)
        assert np.allclose(region.mean, [1.0, 2.0, mean_t])
        assert np.allclose(region.cov_diag, [var_r, var_r, var_t])


class TestEncodings:

    def test_zero_variance_is_plain_sinusoids(self):
        x = np.array([[0.3, -0.2, 0.7]])
        out = ipe_encode(GaussianRegion(x, np.zeros_like(x)), EncodingConfig(levels=2))
        expected = np.concatenate([np.sin(x), np.cos(x), np.sin(2 * x), np.cos(2 * x)], axis=-1)
        assert np.allclose(out, expected)

    @pytest.mark.slow
    def test_matches_monte_carlo_expectation(self):
        """Closed-form encoding equals the sample mean of sinusoids under the frustum Gaussian."""
        rng = np.random.default_rng(11)
        cfg = EncodingConfig(levels=4)
        freq = 2.0 ** np.arange(cfg.levels)
        for _ in range(20):
            direction = rng.normal(size=3)
            t0 = rng.uniform(0.5, 2.5)
            frustum = ConicalFrustum(rng.uniform(-1.0, 1.0, size=3), direction / np.linalg.norm(direction),
                                     rng.uniform(0.01, 0.2), t0, t0 + rng.uniform(0.05, 1.0))
            region = frustum_to_gaussian(frustum)
            x = region.mean + np.sqrt(region.cov_diag) * rng.standard_normal((1_000_000, 3))
            expected = np.concatenate([np.concatenate([np.sin(f * x).mean(axis=0), np.cos(f * x).mean(axis=0)])
                                       for f in freq])
            assert np.max(np.abs(ipe_encode(region, cfg).ravel() - expected)) <= 1e-2

    def test_zero_variance_is_exact(self, rng):
        x = rng.normal(size=(20, 3))
        out = ipe_encode(GaussianRegion(x, np.zeros_like(x)), EncodingConfig(levels=3))
        expected = np.concatenate([np.concatenate([np.sin(f * x), np.cos(f * x)], axis=-1) for f in (1, 2, 4)], axis=-1)
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_large_variance_suppresses_high_octaves(self):
        x = np.array([[0.3, -0.2, 0.7]])
        out = ipe_encode(GaussianRegion(x, np.full_like(x, 4.0)), EncodingConfig(levels=4))
        assert np.max(np.abs(out[..., 18:])) < 1e-6
        assert np.max(np.abs(out[..., :6])) > 0.05

    def test_positional_encode_width(self):
        out = positional_encode(np.zeros((5, 3)), 2)
        assert out.shape == (5, 3 + 12)
        assert positional_encode(np.zeros((5, 3)), 0).shape == (5, 3)

    def test_anneal_weights(self):
        assert np.allclose(anneal_weights(EncodingConfig(levels=4)), 1.0)
        w = anneal_weights(EncodingConfig(levels=4, progress=1.0, slope=1.0))
        assert np.allclose(w, [1.0, 1.0, math.exp(-1.0), math.exp(-2.0)])

    def test_annealed_encode_scales_octaves(self):
        x = np.array([[0.3, -0.2, 0.7]])
        region = GaussianRegion(x, np.full_like(x, 0.01))
        full = ipe_encode(region, EncodingConfig(levels=3))
        assert np.allclose(annealed_encode(region, EncodingConfig(levels=3)), full)
        partial = annealed_encode(region, EncodingConfig(levels=3, progress=0.0, slope=1.0))
        weights = np.repeat([1.0, math.exp(-1.0), math.exp(-2.0)], 6)
        assert np.allclose(partial, full * weights)

    def test_encoding_schedule(self):
        assert encoding_at(FieldConfig(levels=8), 5).progress == math.inf
        cfg = FieldConfig(levels=8, anneal_steps=100)
        assert encoding_at(cfg, 50).progress == pytest.approx(4.0)
        assert encoding_at(cfg, 500).progress == pytest.approx(8.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FieldConfig(coarse_samples=1)
        with pytest.raises(ValueError):
            EncodingConfig(levels=0)


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------

class TestRays:

    def test_pixel_centers(self):
        uv = pixel_centers(2, 3)
        assert uv.shape == (6, 2)
        assert np.allclose(uv[0], [0.5, 0.5])
        assert np.allclose(uv[-1], [2.5, 1.5])

    def test_origin_is_camera_center(self, camera, intrinsics):
        rays = pose_rays(pixel_centers(2, 2), camera, intrinsics)
        assert np.allclose(rays.origins.data, camera.center)

    def test_directions_have_unit_camera_z(self, camera, intrinsics):
        rays = pose_rays(pixel_centers(3, 3), camera, intrinsics)
        cam = rays.directions.data @ camera.R.T
        assert np.allclose(cam[:, 2], 1.0)

    def test_principal_ray_hits_target(self, camera, intrinsics):
        rays = pose_rays(np.array([[intrinsics.cx, intrinsics.cy]]), camera, intrinsics)
        d = rays.directions.data[0]
        assert np.allclose(np.cross(d, -camera.center), 0.0, atol=1e-9)

    def test_posed_rays_match_single_pose(self, camera, intrinsics):
        pixels = pixel_centers(2, 3)
        n = len(pixels)
        single = pose_rays(pixels, camera, intrinsics)
        batched = posed_rays(pixels, np.tile(camera.R, (n, 1, 1)), np.tile(camera.t, (n, 1)),
                             np.full(n, intrinsics.fx), np.full(n, intrinsics.fy),
                             np.full(n, intrinsics.cx), np.full(n, intrinsics.cy))
        assert np.allclose(batched.origins.data, single.origins.data)
        assert np.allclose(batched.directions.data, single.directions.data)
        assert np.allclose(batched.radius, single.radius)

    def test_radius_scales_with_focal(self, camera):
        a = pose_rays(np.zeros((1, 2)), camera, CameraIntrinsics(10.0, 10.0, 0.0, 0.0))
        b = pose_rays(np.zeros((1, 2)), camera, CameraIntrinsics(20.0, 20.0, 0.0, 0.0))
        assert a.radius[0] == pytest.approx(2.0 * b.radius[0])


# ---------------------------------------------------------------------------
# Sampling and compositing
# ---------------------------------------------------------------------------

class TestSampling:

    def test_coarse_edges_span_bounds(self):
        edges = coarse_edges(4, 8, 1.0, 4.0, None)
        assert edges.shape == (4, 9)
        assert np.allclose(edges[:, 0], 1.0)
        assert np.allclose(edges[:, -1], 4.0)
        assert np.all(np.diff(edges, axis=1) > 0)

    def test_jittered_edges_stay_sorted(self, rng):
        edges = coarse_edges(16, 8, 1.0, 4.0, rng)
        assert np.all(np.diff(edges, axis=1) >= 0)
        assert np.all((edges >= 1.0) & (edges <= 4.0))

    def test_fine_edges_concentrate_on_weight(self):
        edges = coarse_edges(1, 4, 1.0, 2.0, None)
        weights = np.array([[0.0, 0.0, 1.0, 0.0]])
        fine = fine_edges(edges, weights, 16, None)
        assert fine.shape == (1, 5 + 16)
        assert np.all(np.diff(fine, axis=1) >= 0)
        inside = (fine[0] >= edges[0, 2]) & (fine[0] <= edges[0, 3])
        assert inside.sum() >= 16

    def test_no_fine_samples(self):
        edges = coarse_edges(2, 4, 1.0, 2.0, None)
        assert fine_edges(edges, np.ones((2, 4)), 0, None) is edges


class TestComposite:

    def test_empty_ray(self):
        edges = coarse_edges(2, 4, 1.0, 3.0, None)
        out = composite(diff.Tensor(np.zeros((2, 4))), diff.Tensor(np.zeros((2, 4, 3))), edges,
                        diff.Tensor(np.tile([0.0, 0.0, 1.0], (2, 1))), np.ones(3), 3.0)
        assert np.all(out.empty)
        assert np.allclose(out.color.data, 1.0)
        assert np.allclose(out.depth.data, 3.0)

    def test_opaque_interval_sets_depth_and_color(self):
        edges = np.array([[1.0, 1.5, 2.0, 2.5]])
        sigma = diff.Tensor(np.array([[0.0, 1e4, 0.0]]))
        rgb = diff.Tensor(np.tile([0.2, 0.4, 0.6], (1, 3, 1)))
        out = composite(sigma, rgb, edges, diff.Tensor(np.array([[0.0, 0.0, 1.0]])), np.ones(3), 2.5)
        assert out.acc.data[0] == pytest.approx(1.0)
        assert out.depth.data[0] == pytest.approx(1.75)
        assert np.allclose(out.color.data[0], [0.2, 0.4, 0.6])

    def test_weights_sum_below_one(self, rng):
        edges = coarse_edges(3, 6, 1.0, 3.0, None)
        sigma = diff.Tensor(rng.uniform(0.0, 2.0, size=(3, 6)))
        rgb = diff.Tensor(rng.uniform(size=(3, 6, 3)))
        out = composite(sigma, rgb, edges, diff.Tensor(np.tile([0.1, 0.0, 1.0], (3, 1))), np.ones(3), 3.0)
        assert np.all(out.acc.data <= 1.0 + 1e-12)
        assert np.all(out.color.data >= 0.0) and np.all(out.color.data <= 1.0 + 1e-12)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

class TestRendering:

    def test_render_rays_shapes(self, field, camera, intrinsics):
        rays = pose_rays(pixel_centers(2, 3), camera, intrinsics)
        out = render_rays(field, rays, 1.0, 4.0, EncodingConfig(levels=3))
        assert out.color.shape == (6, 3)
        assert out.depth.shape == (6,)
        assert out.edges.shape == (6, 8 + 1 + 8)
        assert out.coarse_color.shape == (6, 3)

    def test_deterministic_without_rng(self, field, camera, intrinsics):
        a = render_image(field, camera, intrinsics, 3, 3, 1.0, 4.0, EncodingConfig(levels=3))
        b = render_image(field, camera, intrinsics, 3, 3, 1.0, 4.0, EncodingConfig(levels=3))
        assert np.array_equal(a[0], b[0])
        assert a[0].shape == (3, 3, 3) and a[1].shape == (3, 3)

    def test_chunking_does_not_change_output(self, small_cfg, camera, intrinsics):
        big = RadianceField(small_cfg, np.random.default_rng(0))
        tiny = RadianceField(FieldConfig(**{**small_cfg.__dict__, 'chunk': 2}), np.random.default_rng(0))
        a = render_image(big, camera, intrinsics, 3, 3, 1.0, 4.0, EncodingConfig(levels=3))
        b = render_image(tiny, camera, intrinsics, 3, 3, 1.0, 4.0, EncodingConfig(levels=3))
        assert np.allclose(a[0], b[0])

    def test_render_ray_matches_image(self, field, camera, intrinsics):
        color, depth = render_image(field, camera, intrinsics, 2, 2, 1.0, 4.0, EncodingConfig(levels=3))
        c, d, _ = render_ray(field, np.array([1.5, 0.5]), camera, intrinsics, 1.0, 4.0, EncodingConfig(levels=3))
        assert np.allclose(c, color[0, 1])
        assert d == pytest.approx(depth[0, 1])

    def test_invalid_bounds(self, field, camera, intrinsics):
        rays = pose_rays(pixel_centers(1, 1), camera, intrinsics)
        with pytest.raises(ValueError):
            render_rays(field, rays, 2.0, 1.0, EncodingConfig(levels=3))

    def test_loss_rgb(self):
        colors = diff.Tensor(np.array([[0.0, 0.5, 1.0], [1.0, 1.0, 1.0]]))
        assert loss_rgb(colors, np.zeros((2, 3))).item() == pytest.approx(0.25 + 1.0 + 3.0)
        with pytest.raises(ValueError):
            loss_rgb(colors, np.zeros((3, 3)))

    def test_pose_gradient(self, camera, intrinsics):
        """Colors are differentiable in the camera rotation and translation."""
        cfg = FieldConfig(levels=2, dir_levels=1, hidden=8, depth=2, coarse_samples=8, fine_samples=0)
        radiance = RadianceField(cfg, np.random.default_rng(3))
        R = diff.Parameter(camera.R)
        t = diff.Parameter(camera.t)
        pixels = pixel_centers(2, 2)
        target = np.full((4, 3), 0.5)

        def fn():
            rays = camera_rays(pixels, R, t, intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)
            return loss_rgb(render_rays(radiance, rays, 1.0, 4.0, EncodingConfig(levels=2)).color, target)
        assert diff.gradcheck(fn, [R, t], probes=20, rng=np.random.default_rng(4)) < 1e-3
