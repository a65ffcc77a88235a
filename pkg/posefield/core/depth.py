"""
Monocular depth alignment and chamfer-driven pose estimation.

Depth maps hold z-depth up to an unknown scale and shift per image. They
are lifted to point clouds in their camera frame; relative poses between
frames are found by descending the chamfer distance between clouds.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple
from scipy.spatial import cKDTree
from posefield.core import diff
from posefield.core.diff import Tensor
from posefield.core.diff import Parameter
from posefield.core.diff import AutoParams
from posefield.core.geom import exp_so3
from posefield.core.geom import exp_so3_first_order_t
from posefield.core.geom import unproject
from posefield.core.geom import random_quaternions
from posefield.core.geom import quat_to_matrix
from posefield.core.geom import RigidTransform
from posefield.core.geom import CameraIntrinsics

logger = logging.getLogger(__name__)

frames = ('camera', 'world')


@dataclass(frozen=True)
class DepthConfig:
    max_points:      int   = 4096
    random_pairs:    int   = 2
    step:            float = 1e-2
    starts:          int   = 8
    start_steps:     int   = 60
    align_delay:     int   = 200   # iterations before the depth alignment moves
    alignment_lr:    float = 1e-2
    divergence_runs: int   = 10

    def __post_init__(self) -> None:
        if self.max_points < 1:
            raise ValueError(f'max_points must be positive, got {self.max_points}')
        if self.step <= 0:
            raise ValueError(f'Chamfer step must be positive, got {self.step}')


class DepthMap(AutoParams):
    """ Relative depth with a learnable scale alpha = exp(a) and shift beta """
    def __init__(self, values: np.ndarray, mask: Optional[np.ndarray] = None,
                 alpha: float = 1.0, beta: float = 0.0, frame_id: str = '') -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f'Depth map must be 2-D, got shape {values.shape}')
        if alpha <= 0:
            raise ValueError(f'Depth scale must be positive, got {alpha}')
        mask = np.isfinite(values) & (values > 0) if mask is None else np.asarray(mask, dtype=bool) & (values > 0)
        self.frame_id  = frame_id
        self.values    = np.where(mask, values, 0.0)
        self.mask      = mask
        self.log_alpha = Parameter(math.log(alpha), name=f'{frame_id}.log_alpha')
        self.beta      = Parameter(float(beta), name=f'{frame_id}.beta')

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def transformed(self) -> np.ndarray:
        return self.alpha * self.values + float(self.beta.data)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame:  str = 'camera'

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError('Point cloud has non-finite coordinates')
        if self.frame not in frames:
            raise ValueError(f'Unknown frame tag {self.frame}. Valid values: {list(frames)}')
        object.__setattr__(self, 'points', pts)

    def __len__(self) -> int:
        return len(self.points)


# ------------------------------------------------------------------------------
# depth alignment
def transform_depth(d: DepthMap, index: Optional[np.ndarray] = None) -> Tensor:
    """ D* = alpha D + beta, optionally at flat pixel `index` """
    values = d.values.reshape(-1)[index] if index is not None else d.values
    return diff.exp(d.log_alpha) * values + d.beta


def loss_depth(d: DepthMap, rendered, index: Optional[np.ndarray] = None) -> Tensor:
    """ L2 norm of D* - rendered over valid pixels

    With `index`, `rendered` holds the depths of those flat pixels only.
    """
    mask = d.mask.reshape(-1)[index] if index is not None else d.mask
    if not np.any(mask):
        raise ValueError(f'Depth map {d.frame_id or "?"} has no valid pixels in the evaluated set')
    rendered = diff.as_tensor(rendered)
    target   = transform_depth(d, index)
    if rendered.shape != target.shape:
        raise ValueError(f'Rendered depth {rendered.shape} does not match depth map {target.shape}')
    gap = (target - rendered)[np.nonzero(mask)]
    return diff.norm(gap)


def fit_depth_alignment(depth: np.ndarray, rendered: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """ Closed-form least-squares (alpha, beta) with alpha D + beta ~ rendered """
    depth    = np.asarray(depth, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    mask     = np.ones(depth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.sum() < 2:
        raise ValueError('Depth alignment needs at least two valid pixels')
    A = np.stack([depth[mask], np.ones(int(mask.sum()))], axis=1)
    (alpha, beta), *_ = np.linalg.lstsq(A, rendered[mask], rcond=None)
    return float(alpha), float(beta)


def depth_to_cloud(depth: np.ndarray, K: CameraIntrinsics, mask: Optional[np.ndarray] = None,
                   pose: Optional[RigidTransform] = None, max_points: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> PointCloud:
    """ Lift valid pixels (centers at +0.5) to a cloud in the camera frame, or world if `pose` is given """
    depth = np.asarray(depth, dtype=np.float64)
    valid = (depth > 0) if mask is None else (np.asarray(mask, dtype=bool) & (depth > 0))
    rows, cols = np.nonzero(valid)
    if len(rows) == 0:
        raise ValueError('Depth map has no valid pixels')
    if max_points is not None and len(rows) > max_points:
        rng  = rng if rng is not None else np.random.default_rng(0)
        pick = np.sort(rng.choice(len(rows), size=max_points, replace=False))
        rows, cols = rows[pick], cols[pick]
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    points = unproject(pixels, depth[rows, cols], pose or RigidTransform.identity(), K)
    return PointCloud(points, 'camera' if pose is None else 'world')


# ------------------------------------------------------------------------------
# chamfer distance
def _check_clouds(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ValueError(f'Chamfer distance needs non-empty clouds, got {len(a)} and {len(b)} points')


def chamfer(a, b) -> float:
    """ Mean squared nearest-neighbour distance, summed over both directions """
    a = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    _check_clouds(a, b)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def nearest(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ Index of the nearest b for every a, and of the nearest a for every b """
    _check_clouds(a, b)
    return cKDTree(b).query(a)[1], cKDTree(a).query(b)[1]


def chamfer_frozen(a: Tensor, b: np.ndarray, nn_ab: np.ndarray, nn_ba: np.ndarray) -> Tensor:
    """ Chamfer distance with the nearest-neighbour assignment held fixed """
    a = diff.as_tensor(a)
    gap_ab = a - b[nn_ab]
    gap_ba = a[nn_ba] - b
    return diff.mean(diff.tsum(gap_ab * gap_ab, axis=-1)) + diff.mean(diff.tsum(gap_ba * gap_ba, axis=-1))


# ------------------------------------------------------------------------------
# pose updates
def relative_cloud(P: np.ndarray, R_i, t_i, R_j, t_j) -> Tensor:
    """ T_j T_i^-1 applied to camera-i points """
    world = (diff.as_tensor(P) - t_i) @ R_i
    return world @ diff.transpose(diff.as_tensor(R_j)) + t_j


def select_pairs(n: int, random_pairs: int = 2, rng: Optional[np.random.Generator] = None) -> List[Tuple[int, int]]:
    """ Adjacent frames plus `random_pairs` long-range partners per frame """
    rng   = rng if rng is not None else np.random.default_rng(0)
    pairs = {(k, k + 1) for k in range(n - 1)}
    for k in range(n):
        others = [j for j in range(n) if abs(j - k) > 1]
        if not others:
            continue
        for j in rng.choice(others, size=min(random_pairs, len(others)), replace=False):
            pairs.add((min(k, int(j)), max(k, int(j))))
    return sorted(pairs)


class PoseUpdate(NamedTuple):
    poses: List[RigidTransform]
    loss:  float
    step:  float


def _points(clouds: Sequence) -> List[np.ndarray]:
    return [c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in clouds]


def _perturbed(increments: Tensor, pose: RigidTransform, k: int) -> Tuple[Tensor, Tensor]:
    R = exp_so3_first_order_t(increments[k, :3]) @ pose.R
    t = increments[k, 3:] + pose.t
    return R, t


def pairs_objective(increments: Tensor, poses: Sequence[RigidTransform], clouds: Sequence[np.ndarray],
                    pairs: Sequence[Tuple[int, int]], assignment: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """ Frozen-assignment chamfer summed over pairs, pose k taken as ((I + hat w_k) R_k, t_k + v_k) """
    total = diff.Tensor(0.0)
    for (i, j), (nn_ab, nn_ba) in zip(pairs, assignment):
        R_i, t_i = _perturbed(increments, poses[i], i)
        R_j, t_j = _perturbed(increments, poses[j], j)
        moved = relative_cloud(clouds[i], R_i, t_i, R_j, t_j)
        total = total + chamfer_frozen(moved, clouds[j], nn_ab, nn_ba)
    return total


def assign_neighbors(poses: Sequence[RigidTransform], clouds: Sequence[np.ndarray],
                     pairs: Sequence[Tuple[int, int]]) -> List[Tuple[np.ndarray, np.ndarray]]:
    out = []
    for i, j in pairs:
        moved = relative_cloud(clouds[i], poses[i].R, poses[i].t, poses[j].R, poses[j].t).data
        out.append(nearest(moved, clouds[j]))
    return out


def pairs_chamfer(poses: Sequence[RigidTransform], clouds: Sequence, pairs: Sequence[Tuple[int, int]]) -> float:
    clouds = _points(clouds)
    total  = 0.0
    for i, j in pairs:
        moved  = relative_cloud(clouds[i], poses[i].R, poses[i].t, poses[j].R, poses[j].t).data
        total += chamfer(moved, clouds[j])
    return total


def _step_poses(poses: Sequence[RigidTransform], grad: np.ndarray, s: float) -> List[RigidTransform]:
    out = []
    for k, pose in enumerate(poses):
        if not np.any(grad[k]):
            out.append(pose)
            continue
        R = exp_so3(-s * grad[k, :3]) @ pose.R
        out.append(RigidTransform.from_matrix(R, pose.t - s * grad[k, 3:]))
    return out


def update_pose_chamfer(poses: Sequence[RigidTransform], clouds: Sequence, pairs: Sequence[Tuple[int, int]],
                        step: float, fixed: Sequence[int] = (0,), armijo: float = 1e-4,
                        max_halvings: int = 30) -> PoseUpdate:
    """ One backtracking gradient step on the pairwise chamfer objective

    Nearest neighbours are assigned once at the current poses and held fixed
    within the step. Poses in `fixed` do not move.
    """
    if not pairs:
        raise ValueError('No overlapping frame pairs to align')
    clouds     = _points(clouds)
    assignment = assign_neighbors(poses, clouds, pairs)
    increments = Tensor(np.zeros((len(poses), 6)), requires_grad=True)
    loss = pairs_objective(increments, poses, clouds, pairs, assignment)
    loss.backward()

    grad = increments.grad.copy()
    grad[list(fixed)] = 0.0
    g2 = float(np.sum(grad ** 2))
    f0 = loss.item()
    if g2 == 0.0:
        return PoseUpdate(list(poses), pairs_chamfer(poses, clouds, pairs), step)

    s = step
    for _ in range(max_halvings):
        candidate = _step_poses(poses, grad, s)
        value = pairs_objective(Tensor(np.zeros((len(poses), 6))), candidate, clouds, pairs, assignment).item()
        if value <= f0 - armijo * s * g2:
            return PoseUpdate(candidate, pairs_chamfer(candidate, clouds, pairs), s)
        s *= 0.5
    return PoseUpdate(list(poses), pairs_chamfer(poses, clouds, pairs), s)


def descend(poses: Sequence[RigidTransform], clouds: Sequence, pairs: Sequence[Tuple[int, int]],
            steps: int, step: float, fixed: Sequence[int] = (0,), divergence_runs: int = 10) -> PoseUpdate:
    """ Repeated chamfer updates; the step doubles after success and halves on a run of increases """
    clouds = _points(clouds)
    update = PoseUpdate(list(poses), pairs_chamfer(poses, clouds, pairs), step)
    rising = 0
    for _ in range(steps):
        prev   = update.loss
        update = update_pose_chamfer(update.poses, clouds, pairs, 2.0 * update.step, fixed)
        rising = rising + 1 if update.loss > prev else 0
        if rising >= divergence_runs:
            logger.warning('Chamfer loss rose for %d consecutive passes; halving the step', rising)
            update = update._replace(step=0.25 * update.step)
            rising = 0
    return update


def align_pair_multistart(source, target, starts: int = 8, steps: int = 60, step: float = 1e-2,
                          rng: Optional[np.random.Generator] = None,
                          initial: Optional[RigidTransform] = None) -> Tuple[RigidTransform, float]:
    """ Transform X with X(source) ~ target, best of several chamfer descents

    Starts are the identity rotation, `initial` when given, and random
    rotations; each starts with the centroids matched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    src, tgt = _points([source, target])
    _check_clouds(src, tgt)
    rotations = [np.eye(3)]
    if starts > 1:
        rotations += list(quat_to_matrix(random_quaternions(starts - 1, rng)))
    seeds = [RigidTransform.from_matrix(R, tgt.mean(axis=0) - R @ src.mean(axis=0)) for R in rotations]
    if initial is not None:
        seeds.insert(0, initial)

    best, best_loss = None, math.inf
    for seed in seeds:
        result = descend([RigidTransform.identity(), seed.inverse()], [tgt, src], [(1, 0)], steps, step)
        if result.loss < best_loss:
            best, best_loss = result.poses[1].inverse(), result.loss
    return best, best_loss


def chain_poses(relatives: Sequence[RigidTransform]) -> List[RigidTransform]:
    """ Absolute poses from adjacent transforms X_k (camera k -> camera k+1), first pose at identity """
    poses = [RigidTransform.identity()]
    for X in relatives:
        poses.append(X.compose(poses[-1]))
    return poses
