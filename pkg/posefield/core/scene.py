"""
Scene packages and the analytic toy scene.

The toy scene is a handful of shaded opaque spheres in a unit box seen
from cameras on a hemisphere. It is ray traced in closed form, so images,
z-depth and poses are exact.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple
from scipy.spatial import cKDTree
from posefield.core.geom import look_at
from posefield.core.geom import make_rng
from posefield.core.geom import quat_mul
from posefield.core.geom import RigidTransform
from posefield.core.geom import CameraIntrinsics
from posefield.core.field import pixel_centers
from posefield.core.viewgraph import noise_quaternions
from posefield.core.viewgraph import relatives_from_absolutes

logger = logging.getLogger(__name__)

splits = ('train', 'test')


@dataclass(frozen=True)
class SceneConfig:
    views:              int                 = 12
    test_views:         int                 = 2
    size:               int                 = 32
    spheres:            int                 = 4
    distance:           float               = 2.5
    elevation_deg:      Tuple[float, float] = (25.0, 50.0)
    near:               float               = 1.0
    far:                float               = 4.0
    scales:             Tuple[int, ...]     = (1,)
    depth_scale:        float               = 1.0
    depth_shift:        float               = 0.0
    neighbors:          int                 = 4     # measured relatives per view
    relative_noise_deg: float               = 1.0
    seed:               int                 = 0

    def __post_init__(self) -> None:
        if not 3 <= self.spheres <= 5:
            raise ValueError(f'The toy scene holds 3 to 5 spheres, got {self.spheres}')
        if self.views < 1 or self.test_views < 0:
            raise ValueError(f'Invalid view counts: {self.views} train, {self.test_views} test')
        if not 0 < self.near < self.far:
            raise ValueError(f'Invalid bounds near={self.near}, far={self.far}')
        if any(s < 1 or self.size // s < 1 for s in self.scales):
            raise ValueError(f'Invalid scales {self.scales} for size {self.size}')
        if self.depth_scale <= 0 or self.depth_shift >= self.near:
            raise ValueError(f'Depth distortion must keep depths positive: '
                             f'scale {self.depth_scale}, shift {self.depth_shift}')
        if self.neighbors < 0 or self.relative_noise_deg < 0:
            raise ValueError(f'Invalid relative measurements: {self.neighbors} neighbors, '
                             f'{self.relative_noise_deg} deg noise')


# ------------------------------------------------------------------------------
# scene package
@dataclass(eq=False)
class Frame:
    frame_id:   str
    image:      np.ndarray                # (H, W, 3) in [0, 1]
    intrinsics: CameraIntrinsics
    pose:       Optional[RigidTransform] = None
    depth:      Optional[np.ndarray]     = None
    mask:       Optional[np.ndarray]     = None
    split:      str                      = 'train'
    scale:      int                      = 1
    view:       str                      = ''     # frames of one view share a pose

    def __post_init__(self) -> None:
        self.view  = self.view or self.frame_id
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f'Frame {self.frame_id}: image must be HxWx3, got {self.image.shape}')
        if self.split not in splits:
            raise ValueError(f'Frame {self.frame_id}: unknown split {self.split}. Valid values: {list(splits)}')
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != self.image.shape[:2]:
                raise ValueError(f'Frame {self.frame_id}: depth {self.depth.shape} '
                                 f'does not match image {self.image.shape[:2]}')
            if self.mask is None:
                self.mask = self.depth > 0
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(eq=False)
class ScenePackage:
    """ Frames plus scene bounds

    `pairs` / `relatives` optionally hold measured relative rotations between
    train views (indices into `train_views()`), as a pose estimator would
    report them.
    """
    frames:       List[Frame]
    near:         float
    far:          float
    ground_truth: Optional[List[RigidTransform]] = None
    pairs:        Optional[np.ndarray]           = None
    relatives:    Optional[np.ndarray]           = None
    name:         str                            = 'scene'
    extras:       dict                           = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError(f'Scene {self.name} has no frames')
        if not 0 < self.near < self.far:
            raise ValueError(f'Scene {self.name}: invalid bounds near={self.near}, far={self.far}')
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError(f'Scene {self.name}: duplicate frame ids')
        if self.ground_truth is not None and len(self.ground_truth) != len(self.frames):
            raise ValueError(f'Scene {self.name}: {len(self.frames)} frames but '
                             f'{len(self.ground_truth)} ground-truth poses')
        if (self.pairs is None) != (self.relatives is None):
            raise ValueError(f'Scene {self.name}: pairs and relatives go together')
        if self.pairs is not None:
            self.pairs     = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
            self.relatives = np.asarray(self.relatives, dtype=np.float64).reshape(-1, 4)
            if len(self.pairs) != len(self.relatives):
                raise ValueError(f'Scene {self.name}: {len(self.pairs)} pairs but {len(self.relatives)} relatives')
            if self.pairs.size and self.pairs.max() >= len(self.train_views()):
                raise ValueError(f'Scene {self.name}: relative pair refers to an unknown view')

    def __len__(self) -> int:
        return len(self.frames)

    def indices(self, split: str = 'train', scale: Optional[int] = 1) -> List[int]:
        return [k for k, f in enumerate(self.frames) if f.split == split and (scale is None or f.scale == scale)]

    def train_views(self) -> List[str]:
        """ Train view ids in first-seen order """
        seen: List[str] = []
        for f in self.frames:
            if f.split == 'train' and f.view not in seen:
                seen.append(f.view)
        return seen

    def view_frame(self, view: str) -> int:
        """ Finest frame of a view """
        candidates = [k for k, f in enumerate(self.frames) if f.view == view]
        if not candidates:
            raise ValueError(f'Scene {self.name}: unknown view {view}')
        return min(candidates, key=lambda k: self.frames[k].scale)

    @property
    def poses(self) -> List[Optional[RigidTransform]]:
        return [f.pose for f in self.frames]

    @property
    def has_depth(self) -> bool:
        return all(f.depth is not None for f in self.frames if f.split == 'train')

    def with_poses(self, poses: Sequence[RigidTransform], indices: Optional[Sequence[int]] = None) -> 'ScenePackage':
        """ Copy with poses replaced for `indices` (all frames by default) """
        indices = range(len(self.frames)) if indices is None else indices
        if len(poses) != len(indices):
            raise ValueError(f'{len(poses)} poses for {len(indices)} frames')
        frames = list(self.frames)
        for k, pose in zip(indices, poses):
            frames[k] = replace(frames[k], pose=pose)
        return replace(self, frames=frames)

    def with_view_poses(self, poses: Sequence[RigidTransform]) -> 'ScenePackage':
        """ Copy with one pose per train view applied to every frame of that view """
        views = self.train_views()
        if len(poses) != len(views):
            raise ValueError(f'{len(poses)} poses for {len(views)} train views')
        lookup = dict(zip(views, poses))
        frames = [replace(f, pose=lookup[f.view]) if f.view in lookup else f for f in self.frames]
        return replace(self, frames=frames)


# ------------------------------------------------------------------------------
# toy scene
class Sphere(NamedTuple):
    center: np.ndarray
    radius: float
    color:  np.ndarray


class Trace(NamedTuple):
    color: np.ndarray   # (N, 3)
    depth: np.ndarray   # (N,) z-depth, 0 where nothing is hit
    hit:   np.ndarray   # (N,)


class ToyScene:
    ambient    = 0.35
    background = np.ones(3)

    def __init__(self, spheres: Sequence[Sphere], light: Sequence[float] = (0.4, -0.3, 0.85)) -> None:
        self.spheres = list(spheres)
        light = np.asarray(light, dtype=np.float64)
        self.light = light / np.linalg.norm(light)

    @classmethod
    def random(cls, count: int, rng=None) -> 'ToyScene':
        rng = make_rng(rng)
        spheres = []
        for _ in range(count):
            radius = float(rng.uniform(0.15, 0.3))
            center = rng.uniform(-0.5 + radius, 0.5 - radius, size=3)
            color  = rng.uniform(0.15, 0.95, size=3)
            spheres.append(Sphere(center, radius, color))
        return cls(spheres)

    def trace(self, origins: np.ndarray, directions: np.ndarray) -> Trace:
        """ Nearest sphere hit along o + t d (t is z-depth when d has unit camera z) """
        origins    = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        n     = len(directions)
        best  = np.full(n, np.inf)
        color = np.tile(self.background, (n, 1))
        a = np.sum(directions ** 2, axis=-1)
        for s in self.spheres:
            oc   = origins - s.center
            b    = np.sum(oc * directions, axis=-1)
            c    = np.sum(oc ** 2, axis=-1) - s.radius ** 2
            disc = b ** 2 - a * c
            t    = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
            closer = (disc >= 0) & (t > 0) & (t < best)
            if not np.any(closer):
                continue
            best[closer] = t[closer]
            normal = (origins[closer] + t[closer, None] * directions[closer] - s.center) / s.radius
            shade  = self.ambient + (1.0 - self.ambient) * np.maximum(normal @ self.light, 0.0)
            color[closer] = shade[:, None] * s.color
        hit = np.isfinite(best)
        return Trace(color, np.where(hit, best, 0.0), hit)

    def render(self, pose: RigidTransform, K: CameraIntrinsics, height: int, width: int) -> Trace:
        uv   = pixel_centers(height, width)
        dcam = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=-1)
        out  = self.trace(np.tile(pose.center, (len(uv), 1)), dcam @ pose.R)
        return Trace(out.color.reshape(height, width, 3), out.depth.reshape(height, width), out.hit.reshape(height, width))


def hemisphere_poses(count: int, distance: float, elevation_deg: Tuple[float, float],
                     offset: float = 0.0) -> List[RigidTransform]:
    """ Cameras looking at the origin, azimuths evenly spaced, elevations alternating """
    low, high = elevation_deg
    poses = []
    for k in range(count):
        azimuth   = 2.0 * math.pi * (k + offset) / count
        elevation = math.radians(low if k % 2 == 0 else high)
        center = distance * np.array([math.cos(elevation) * math.cos(azimuth),
                                      math.cos(elevation) * math.sin(azimuth),
                                      math.sin(elevation)])
        poses.append(look_at(center, np.zeros(3)))
    return poses


def toy_intrinsics(size: int) -> CameraIntrinsics:
    return CameraIntrinsics(float(size), float(size), size / 2.0, size / 2.0)


def neighbor_pairs(centers: np.ndarray, k: int) -> np.ndarray:
    """ Undirected pairs (i < j) joining every camera to its k nearest others """
    centers = np.asarray(centers, dtype=np.float64)
    k = min(k, len(centers) - 1)
    if k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, idx = cKDTree(centers).query(centers, k=k + 1)
    pairs = {(min(i, int(j)), max(i, int(j))) for i, row in enumerate(idx) for j in row[1:]}
    return np.array(sorted(pairs), dtype=np.int64)


def measure_relatives(poses: Sequence[RigidTransform], pairs: np.ndarray, noise_deg: float, rng=None) -> np.ndarray:
    """ Relative rotations R_j R_i^-1 of `pairs`, each perturbed by a random rotation of N(0, noise) angle """
    q   = np.stack([p.rotation.as_array() for p in poses])
    rel = relatives_from_absolutes(q, pairs)
    return quat_mul(noise_quaternions(len(rel), math.radians(noise_deg), make_rng(rng)), rel)


def build_toy_scene(cfg: SceneConfig = SceneConfig(), with_depth: bool = True) -> ScenePackage:
    """ Train views (each at every scale) followed by held-out test views at scale 1

    Stored depth is the relative depth (z - shift) / scale; the ground-truth
    alignment is alpha = depth_scale, beta = depth_shift.
    """
    rng   = np.random.default_rng(cfg.seed)
    scene = ToyScene.random(cfg.spheres, rng)
    train = hemisphere_poses(cfg.views, cfg.distance, cfg.elevation_deg)
    test  = hemisphere_poses(cfg.test_views, cfg.distance, cfg.elevation_deg, offset=0.5) if cfg.test_views else []
    K     = toy_intrinsics(cfg.size)

    frames, gt = [], []
    views = [(f'view_{k:03d}', p, 'train', s) for k, p in enumerate(train) for s in cfg.scales]
    views += [(f'test_{k:03d}', p, 'test', 1) for k, p in enumerate(test)]
    for view, pose, split, scale in views:
        Ks    = K.scaled(scale)
        size  = cfg.size // scale
        out   = scene.render(pose, Ks, size, size)
        depth = None
        if with_depth:
            depth = np.where(out.hit, (out.depth - cfg.depth_shift) / cfg.depth_scale, 0.0)
        frame_id = view if scale == 1 else f'{view}_x{scale}'
        frames.append(Frame(frame_id, out.color, Ks, pose, depth, out.hit.copy(), split, scale, view))
        gt.append(pose)

    pairs = relatives = None
    if cfg.neighbors > 0 and len(train) > 1:
        pairs     = neighbor_pairs(np.stack([p.center for p in train]), cfg.neighbors)
        relatives = measure_relatives(train, pairs, cfg.relative_noise_deg, rng)

    logger.info('Toy scene: %d spheres, %d frames at %dx%d', cfg.spheres, len(frames), cfg.size, cfg.size)
    return ScenePackage(frames, cfg.near, cfg.far, gt, pairs, relatives, name='toy',
                        extras={'depth_scale': cfg.depth_scale, 'depth_shift': cfg.depth_shift})
