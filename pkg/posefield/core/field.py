"""
Multi-scale radiance field.

Every pixel casts a cone; the section of the cone between two ray
parameters is a conical frustum, approximated by a Gaussian and encoded by
the expected sinusoidal features under that Gaussian (IPE). Rays use
camera-space directions with unit z, so ray parameters are z-depths.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union
from posefield.core import diff
from posefield.core.diff import Tensor
from posefield.core.diff import AutoParams
from posefield.core.diff import Linear
from posefield.core.geom import CameraIntrinsics
from posefield.core.geom import RigidTransform

logger = logging.getLogger(__name__)

Array = Union[Tensor, np.ndarray]

PIXEL_RADIUS = 2.0 / math.sqrt(12.0)
EMPTY_ACC    = 1e-6


@dataclass(frozen=True)
class FieldConfig:
    levels:         int                        = 10
    dir_levels:     int                        = 4
    hidden:         int                        = 128
    depth:          int                        = 4
    coarse_samples: int                        = 32
    fine_samples:   int                        = 32
    anneal_slope:   float                      = 10.0
    anneal_steps:   int                        = 0
    coarse_weight:  float                      = 0.1
    background:     Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lr:             float                      = 5e-4
    lr_end:         float                      = 5e-5
    chunk:          int                        = 1024
    seed:           int                        = 0

    def __post_init__(self) -> None:
        if self.levels < 1 or self.dir_levels < 0:
            raise ValueError(f'Invalid encoding levels: {self.levels}, {self.dir_levels}')
        if self.coarse_samples < 2:
            raise ValueError(f'At least two coarse samples are needed, got {self.coarse_samples}')
        if self.anneal_slope <= 0:
            raise ValueError(f'Anneal slope must be positive, got {self.anneal_slope}')


@dataclass(frozen=True)
class EncodingConfig:
    levels:   int   = 10
    progress: float = math.inf
    slope:    float = 10.0

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError(f'levels must be >= 1, got {self.levels}')
        if self.slope <= 0:
            raise ValueError(f'slope must be positive, got {self.slope}')


@dataclass(frozen=True, eq=False)
class ConicalFrustum:
    origin:    np.ndarray
    direction: np.ndarray
    radius:    float
    t0:        float
    t1:        float

    def __post_init__(self) -> None:
        if not np.all(np.asarray(self.t1) >= np.asarray(self.t0)) or np.any(np.asarray(self.t0) < 0):
            raise ValueError(f'Frustum interval must satisfy 0 <= t0 <= t1, got [{self.t0}, {self.t1}]')
        if np.any(np.asarray(self.radius) < 0):
            raise ValueError(f'Frustum radius must be non-negative, got {self.radius}')


@dataclass(frozen=True, eq=False)
class GaussianRegion:
    mean:     Array
    cov_diag: Array


# ------------------------------------------------------------------------------
# frustum moments and encodings
def frustum_moments(t0: np.ndarray, t1: np.ndarray, radius: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ Along-axis mean and variance, radial variance of a conical frustum """
    t0, t1 = np.asarray(t0, dtype=np.float64), np.asarray(t1, dtype=np.float64)
    t_mu    = 0.5 * (t0 + t1)
    t_delta = 0.5 * (t1 - t0)
    denom   = np.maximum(3.0 * t_mu ** 2 + t_delta ** 2, 1e-300)
    mean_t  = t_mu + 2.0 * t_mu * t_delta ** 2 / denom
    var_t   = t_delta ** 2 / 3.0 - 4.0 * t_delta ** 4 * (12.0 * t_mu ** 2 - t_delta ** 2) / (15.0 * denom ** 2)
    var_r   = np.asarray(radius) ** 2 * (t_mu ** 2 / 4.0 + 5.0 * t_delta ** 2 / 12.0 - 4.0 * t_delta ** 4 / (15.0 * denom))
    return mean_t, np.maximum(var_t, 0.0), np.maximum(var_r, 0.0)


def lift_gaussian(origin: Array, direction: Array, mean_t: np.ndarray, var_t: np.ndarray,
                  var_r: np.ndarray) -> GaussianRegion:
    """ Mean o + mu_t d and diagonal covariance var_t d^2 + var_r (|d|^2 - d^2)

    `origin` and `direction` are (..., 3); the moments are (..., S) and the
    region is (..., S, 3).
    """
    o  = diff.as_tensor(origin)
    d  = diff.as_tensor(direction)
    shape = d.shape[:-1] + (1, 3)
    o, d  = o.reshape(o.shape[:-1] + (1, 3)), d.reshape(shape)
    d2    = d * d
    mean  = o + d * np.asarray(mean_t)[..., None]
    cov   = d2 * np.asarray(var_t)[..., None] + (diff.tsum(d2, axis=-1, keepdims=True) - d2) * np.asarray(var_r)[..., None]
    return GaussianRegion(mean, cov)


def frustum_to_gaussian(f: ConicalFrustum) -> GaussianRegion:
    origin    = np.asarray(f.origin, dtype=np.float64)
    direction = np.asarray(f.direction, dtype=np.float64)
    lead      = np.broadcast_shapes(origin.shape[:-1], direction.shape[:-1], np.shape(f.t0), np.shape(f.t1))
    moments   = [np.broadcast_to(m, lead).reshape(lead + (1,)) for m in frustum_moments(f.t0, f.t1, f.radius)]
    region    = lift_gaussian(np.broadcast_to(origin, lead + (3,)), np.broadcast_to(direction, lead + (3,)), *moments)
    return GaussianRegion(region.mean.data[..., 0, :], region.cov_diag.data[..., 0, :])


def anneal_weights(cfg: EncodingConfig) -> np.ndarray:
    """ exp(min((t - k) / b, 0)) for octaves k = 0..L-1 """
    k = np.arange(cfg.levels, dtype=np.float64)
    return np.exp(np.minimum((cfg.progress - k) / cfg.slope, 0.0))


def _encode(region: GaussianRegion, levels: int, weights: Optional[np.ndarray]) -> Tensor:
    mean  = diff.as_tensor(region.mean)
    var   = diff.as_tensor(region.cov_diag)
    lead  = mean.shape[:-1]
    freq  = (2.0 ** np.arange(levels))[:, None]
    m     = mean.reshape(lead + (1, 3)) * freq
    v     = var.reshape(lead + (1, 3)) * (freq ** 2)
    damp  = diff.exp(v * -0.5)
    block = diff.concat([diff.sin(m) * damp, diff.cos(m) * damp], axis=-1)
    if weights is not None:
        block = block * weights[:, None]
    return block.reshape(lead + (6 * levels,))


def ipe_encode(region: GaussianRegion, cfg: EncodingConfig) -> Array:
    """ Per octave k: [sin(2^k mu) exp(-4^k var / 2), cos(2^k mu) exp(-4^k var / 2)] """
    out = _encode(region, cfg.levels, None)
    return out if isinstance(region.mean, Tensor) else out.data


def annealed_encode(region: GaussianRegion, cfg: EncodingConfig) -> Array:
    """ ipe_encode with octave k scaled by exp(min((t - k) / b, 0)) """
    out = _encode(region, cfg.levels, anneal_weights(cfg))
    return out if isinstance(region.mean, Tensor) else out.data


def positional_encode(x: Array, levels: int) -> Tensor:
    """ [x, sin(2^k x), cos(2^k x)] without damping or annealing """
    x = diff.as_tensor(x)
    if levels == 0:
        return x
    zero = GaussianRegion(x, np.zeros(x.shape))
    return diff.concat([x, _encode(zero, levels, None)], axis=-1)


# ------------------------------------------------------------------------------
class RadianceField(AutoParams):
    """ Encoded position -> (density, feature); feature + encoded direction -> color """
    def __init__(self, cfg: FieldConfig, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        pos_dim = 6 * cfg.levels
        dir_dim = 3 + 6 * cfg.dir_levels
        sizes   = [pos_dim] + [cfg.hidden] * cfg.depth
        self.cfg     = cfg
        self.trunk   = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.density = Linear(cfg.hidden, 1, rng, gain=1.0)
        self.feature = Linear(cfg.hidden, cfg.hidden, rng, gain=1.0)
        self.color   = [Linear(cfg.hidden + dir_dim, cfg.hidden // 2, rng),
                        Linear(cfg.hidden // 2, 3, rng, gain=1.0)]

    def __call__(self, encoded: Tensor, dir_encoded: Tensor) -> Tuple[Tensor, Tensor]:
        h = encoded
        for layer in self.trunk:
            h = diff.relu(layer(h))
        sigma = diff.softplus(self.density(h) - 1.0)
        feat  = self.feature(h)
        dirs  = dir_encoded * np.ones(feat.shape[:-1] + (1,))
        c     = diff.relu(self.color[0](diff.concat([feat, dirs], axis=-1)))
        rgb   = diff.sigmoid(self.color[1](c))
        return sigma[..., 0], rgb


# ------------------------------------------------------------------------------
# rays
class Rays(NamedTuple):
    origins:    Tensor      # (R, 3) world
    directions: Tensor      # (R, 3) world, camera z component 1
    radius:     np.ndarray  # (R,) cone radius per unit z


def pixel_centers(height: int, width: int) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)


def camera_rays(pixels: np.ndarray, rotation: Array, translation: Array,
                fx: Array, fy: Array, cx: float, cy: float) -> Rays:
    """ Rays of world-to-camera pose (R, t); differentiable in R, t, fx and fy """
    R  = diff.as_tensor(rotation)
    t  = diff.as_tensor(translation)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x  = (uv[:, 0] - cx) / diff.as_tensor(fx)
    y  = (uv[:, 1] - cy) / diff.as_tensor(fy)
    d_cam = diff.stack([x, y, diff.Tensor(np.ones(len(uv)))], axis=-1)
    directions = d_cam @ R
    origin     = -(t.reshape(1, 3) @ R)
    origins    = origin * np.ones((len(uv), 1))
    radius     = np.full(len(uv), PIXEL_RADIUS / float(diff.as_tensor(fx).data))
    return Rays(origins, directions, radius)


def pose_rays(pixels: np.ndarray, pose: RigidTransform, K: CameraIntrinsics) -> Rays:
    return camera_rays(pixels, pose.R, pose.t, K.fx, K.fy, K.cx, K.cy)


def posed_rays(pixels: np.ndarray, rotations: Array, translations: Array,
               fx: Array, fy: Array, cx: np.ndarray, cy: np.ndarray) -> Rays:
    """ One ray per pixel, each with its own pose (B, 3, 3), (B, 3) and intrinsics (B,) """
    R  = diff.as_tensor(rotations)
    t  = diff.as_tensor(translations)
    fx = diff.as_tensor(fx)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n  = len(uv)
    x  = (uv[:, 0] - cx) / fx
    y  = (uv[:, 1] - cy) / diff.as_tensor(fy)
    d_cam = diff.stack([x, y, diff.Tensor(np.ones(n))], axis=-1)
    directions = (d_cam.reshape(n, 1, 3) @ R).reshape(n, 3)
    origins    = -((t.reshape(n, 1, 3) @ R).reshape(n, 3))
    radius     = PIXEL_RADIUS / np.broadcast_to(fx.data, (n,))
    return Rays(origins, directions, radius)


# ------------------------------------------------------------------------------
# sampling
def coarse_edges(n_rays: int, samples: int, near: float, far: float,
                 rng: Optional[np.random.Generator]) -> np.ndarray:
    """ samples + 1 interval edges, stratified uniformly in inverse depth """
    s = np.broadcast_to(np.linspace(0.0, 1.0, samples + 1), (n_rays, samples + 1)).copy()
    if rng is not None:
        jitter = (rng.random((n_rays, samples - 1)) - 0.5) / samples
        s[:, 1:-1] = np.clip(s[:, 1:-1] + jitter, 0.0, 1.0)
        s.sort(axis=1)
    disparity = (1.0 - s) / near + s / far
    return 1.0 / disparity


def fine_edges(edges: np.ndarray, weights: np.ndarray, samples: int,
               rng: Optional[np.random.Generator]) -> np.ndarray:
    """ Union of `edges` with inverse-CDF draws from the piecewise-constant weights """
    if samples == 0:
        return edges
    w   = weights + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(edges), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(samples) + 0.5) / samples, (len(edges), samples))
    else:
        u = np.sort(rng.random((len(edges), samples)), axis=1)
    out = np.empty((len(edges), samples))
    for r in range(len(edges)):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side='right') - 1, 0, pdf.shape[1] - 1)
        frac = (u[r] - cdf[r, idx]) / np.maximum(pdf[r, idx], 1e-12)
        out[r] = edges[r, idx] + np.clip(frac, 0.0, 1.0) * (edges[r, idx + 1] - edges[r, idx])
    return np.sort(np.concatenate([edges, out], axis=1), axis=1)


# ------------------------------------------------------------------------------
# rendering
class Composite(NamedTuple):
    color:   Tensor      # (R, 3)
    depth:   Tensor      # (R,)
    acc:     Tensor      # (R,)
    weights: Tensor      # (R, S)
    empty:   np.ndarray  # (R,) rays with no accumulated density


class RenderOutput(NamedTuple):
    color:        Tensor
    depth:        Tensor
    acc:          Tensor
    weights:      Tensor
    edges:        np.ndarray
    coarse_color: Tensor
    empty:        np.ndarray


def composite(sigma: Tensor, rgb: Tensor, edges: np.ndarray, directions: Tensor,
              background: np.ndarray, far: float) -> Composite:
    """ Emission-absorption quadrature over the intervals between `edges`

    w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j),
    with delta the interval length in world units. Empty rays get depth `far`.
    """
    dt      = edges[:, 1:] - edges[:, :-1]
    mid     = 0.5 * (edges[:, 1:] + edges[:, :-1])
    length  = diff.norm(directions, axis=-1, keepdims=True)
    tau     = sigma * (length * dt)
    alpha   = 1.0 - diff.exp(-tau)
    trans   = diff.exp(-(diff.cumsum(tau, axis=-1) - tau))
    weights = trans * alpha
    acc     = diff.tsum(weights, axis=-1)
    color   = diff.tsum(weights[..., None] * rgb, axis=1) + (1.0 - acc)[:, None] * background
    empty   = acc.data <= EMPTY_ACC
    safe    = diff.maximum(acc, EMPTY_ACC)
    depth   = diff.where(empty, np.full(len(edges), far), diff.tsum(weights * mid, axis=-1) / safe)
    return Composite(color, depth, acc, weights, empty)


def render_rays(radiance: RadianceField, rays: Rays, near: float, far: float, encoding: EncodingConfig,
                rng: Optional[np.random.Generator] = None) -> RenderOutput:
    """ Coarse pass, then a fine pass on the union of coarse and resampled edges

    `rng=None` renders deterministically (midpoint strata, quantile resampling).
    """
    if not 0 < near < far:
        raise ValueError(f'Invalid bounds near={near}, far={far}')
    cfg        = radiance.cfg
    background = np.asarray(cfg.background, dtype=np.float64)
    dir_unit   = rays.directions / diff.norm(rays.directions, axis=-1, keepdims=True)
    dir_enc    = positional_encode(dir_unit, cfg.dir_levels).reshape(len(rays.radius), 1, -1)

    def run(edges: np.ndarray) -> Composite:
        mean_t, var_t, var_r = frustum_moments(edges[:, :-1], edges[:, 1:], rays.radius[:, None])
        region = lift_gaussian(rays.origins, rays.directions, mean_t, var_t, var_r)
        sigma, rgb = radiance(annealed_encode(region, encoding), dir_enc)
        return composite(sigma, rgb, edges, rays.directions, background, far)

    edges  = coarse_edges(len(rays.radius), cfg.coarse_samples, near, far, rng)
    coarse = run(edges)
    if cfg.fine_samples == 0:
        return RenderOutput(coarse.color, coarse.depth, coarse.acc, coarse.weights, edges, coarse.color, coarse.empty)

    fine = fine_edges(edges, coarse.weights.data, cfg.fine_samples, rng)
    out  = run(fine)
    if np.any(out.empty):
        logger.debug('%d of %d rays accumulated no density', int(out.empty.sum()), len(out.empty))
    return RenderOutput(out.color, out.depth, out.acc, out.weights, fine, coarse.color, out.empty)


def render_ray(radiance: RadianceField, pixel: np.ndarray, pose: RigidTransform, K: CameraIntrinsics,
               near: float, far: float, encoding: EncodingConfig,
               rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float, bool]:
    out = render_rays(radiance, pose_rays(np.atleast_2d(pixel), pose, K), near, far, encoding, rng)
    return out.color.data[0], float(out.depth.data[0]), bool(out.empty[0])


def render_image(radiance: RadianceField, pose: RigidTransform, K: CameraIntrinsics, height: int, width: int,
                 near: float, far: float, encoding: EncodingConfig,
                 rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """ Full frame (H, W, 3) color and (H, W) depth, rendered in chunks """
    pixels = pixel_centers(height, width)
    color  = np.empty((len(pixels), 3))
    depth  = np.empty(len(pixels))
    chunk  = radiance.cfg.chunk
    for start in range(0, len(pixels), chunk):
        rays = pose_rays(pixels[start:start + chunk], pose, K)
        out  = render_rays(radiance, rays, near, far, encoding, rng)
        color[start:start + chunk] = out.color.data
        depth[start:start + chunk] = out.depth.data
    return color.reshape(height, width, 3), depth.reshape(height, width)


def loss_rgb(colors: Tensor, targets: np.ndarray) -> Tensor:
    """ Sum over rays of the squared color error """
    targets = np.asarray(targets, dtype=np.float64)
    if colors.shape != targets.shape:
        raise ValueError(f'Rendered colors {colors.shape} do not match targets {targets.shape}')
    diffs = colors - targets
    return diff.tsum(diffs * diffs)


def encoding_at(cfg: FieldConfig, step: int) -> EncodingConfig:
    """ Anneal progress t grows linearly to L over `anneal_steps`; no annealing when 0 """
    if cfg.anneal_steps <= 0:
        return EncodingConfig(cfg.levels, math.inf, cfg.anneal_slope)
    return EncodingConfig(cfg.levels, cfg.levels * min(step / cfg.anneal_steps, 1.0), cfg.anneal_slope)
