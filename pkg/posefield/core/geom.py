"""
Rotation, quaternion and camera algebra.

Quaternions are stored scalar-first as [w, x, y, z] (Hamilton product, so
that R(p * q) = R(p) R(q)) and canonicalized to w >= 0. Poses map world
points into the camera frame: x_cam = R x_world + t.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union
from scipy.spatial.transform import Rotation
from posefield.core import diff
from posefield.core.diff import Tensor

logger = logging.getLogger(__name__)

UNIT_TOL       = 1e-9
TAYLOR_ANGLE   = 1e-8
GEODESIC_SLACK = 1e-6
UNIT_ROUNDOFF  = 8 * np.finfo(np.float64).eps  # already unit, stored as is

Seed = Union[int, np.random.Generator, None]


def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ------------------------------------------------------------------------------
# array quaternion helpers, (..., 4) scalar-first
def quat_canonical(q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError('Cannot normalize a zero quaternion')
    return q / n


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return quat_canonical(xyzw[..., [3, 0, 1, 2]])


def quat_angle(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """ Rotation angle between two unit quaternions, radians """
    dot = np.abs(np.sum(np.asarray(p) * np.asarray(q), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def quat_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.minimum(np.linalg.norm(p - q, axis=-1), np.linalg.norm(p + q, axis=-1))


def random_quaternions(n: int, rng: Seed = None) -> np.ndarray:
    """ Uniform rotations, sampled on the 4-sphere """
    q = make_rng(rng).normal(size=(n, 4))
    return quat_canonical(quat_normalize(q))


def axis_angle_to_quat(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    small = theta < TAYLOR_ANGLE
    scale = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(0.5 * theta) / np.where(small, 1.0, theta))
    q = np.concatenate([np.cos(0.5 * theta), scale * omega], axis=-1)
    return quat_canonical(quat_normalize(q))


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q   = quat_canonical(q)
    vec = q[..., 1:]
    s   = np.linalg.norm(vec, axis=-1, keepdims=True)
    ang = 2.0 * np.arctan2(s, q[..., :1])
    small = s < TAYLOR_ANGLE
    return np.where(small, 2.0 * vec / np.where(q[..., :1] > 0, q[..., :1], 1.0), vec * ang / np.where(small, 1.0, s))


# ------------------------------------------------------------------------------
# so(3) exponential and logarithm
def hat(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    K = np.zeros(omega.shape[:-1] + (3, 3))
    K[..., 0, 1] = -omega[..., 2]
    K[..., 0, 2] =  omega[..., 1]
    K[..., 1, 0] =  omega[..., 2]
    K[..., 1, 2] = -omega[..., 0]
    K[..., 2, 0] = -omega[..., 1]
    K[..., 2, 1] =  omega[..., 0]
    return K


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """ Rodrigues' formula; second-order Taylor expansion below 1e-8 rad """
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)[..., None, None]
    K     = hat(omega)
    K2    = K @ K
    small = theta < TAYLOR_ANGLE
    safe  = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * K + b * K2


def log_so3(R: np.ndarray) -> np.ndarray:
    return quat_to_axis_angle(matrix_to_quat(R))


# ------------------------------------------------------------------------------
@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise ValueError(f'Non-finite quaternion {q}')
        if abs(np.linalg.norm(q) - 1.0) > UNIT_ROUNDOFF:
            q = quat_normalize(q)
        q = quat_canonical(q)
        for name, value in zip('wxyz', q):
            object.__setattr__(self, name, float(value))

    @classmethod
    def identity(cls) -> 'UnitQuaternion':
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q: Sequence[float]) -> 'UnitQuaternion':
        return cls(*np.asarray(q, dtype=np.float64)[:4])

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> 'UnitQuaternion':
        return cls.from_array(matrix_to_quat(R))

    @classmethod
    def from_axis_angle(cls, omega: Sequence[float]) -> 'UnitQuaternion':
        return cls.from_array(axis_angle_to_quat(omega))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())

    def conj(self) -> 'UnitQuaternion':
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conj

    def __mul__(self, other: 'UnitQuaternion') -> 'UnitQuaternion':
        if not isinstance(other, UnitQuaternion):
            return NotImplemented
        return UnitQuaternion.from_array(quat_mul(self.as_array(), other.as_array()))

    def angle(self) -> float:
        return float(2.0 * math.acos(min(abs(self.w), 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """ World-to-camera transform: x_cam = R x + t """
    rotation:    UnitQuaternion = UnitQuaternion()
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not isinstance(self.rotation, UnitQuaternion):
            raise TypeError(f'rotation must be a UnitQuaternion, got {type(self.rotation).__name__}')
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise ValueError(f'translation must have 3 entries, got {t.shape}')
        object.__setattr__(self, 'translation', tuple(float(v) for v in t))

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: Sequence[float]) -> 'RigidTransform':
        return cls(UnitQuaternion.from_matrix(R), tuple(t))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def center(self) -> np.ndarray:
        """ Camera center in world coordinates """
        return -self.R.T @ self.t

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other: 'RigidTransform') -> 'RigidTransform':
        """ self after other """
        R = self.R
        return RigidTransform(self.rotation * other.rotation, tuple(R @ other.t + self.t))

    def inverse(self) -> 'RigidTransform':
        Rt = self.R.T
        return RigidTransform(self.rotation.conj(), tuple(-Rt @ self.t))

    def to_json(self) -> Dict:
        return {'q': list(self.rotation.as_array()), 't': list(self.translation)}

    @classmethod
    def from_json(cls, obj: Dict) -> 'RigidTransform':
        if 'q' not in obj or 't' not in obj:
            raise ValueError(f'Pose object needs "q" and "t" keys: {sorted(obj)}')
        return cls(UnitQuaternion.from_array(obj['q']), tuple(obj['t']))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f'Focal lengths must be positive: fx={self.fx}, fy={self.fy}')

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> 'CameraIntrinsics':
        """ Intrinsics of the same camera downsampled by `factor` """
        return CameraIntrinsics(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor)

    def to_json(self) -> Dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy}

    @classmethod
    def from_json(cls, obj: Dict) -> 'CameraIntrinsics':
        return cls(float(obj['fx']), float(obj['fy']), float(obj['cx']), float(obj['cy']))


# ------------------------------------------------------------------------------
# metrics
def _as_quat_array(q: Union[UnitQuaternion, np.ndarray, Sequence[float]]) -> np.ndarray:
    if isinstance(q, UnitQuaternion):
        return q.as_array()
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        logger.debug('dq_distance: normalizing non-unit quaternion input (norms %s)', np.ravel(n)[:4])
        q = quat_normalize(q)
    return q


def dq_distance(p: Union[UnitQuaternion, np.ndarray], q: Union[UnitQuaternion, np.ndarray]) -> Union[float, np.ndarray]:
    """ Chordal quaternion metric min(|p - q|, |p + q|) """
    out = quat_distance(_as_quat_array(p), _as_quat_array(q))
    return float(out) if np.ndim(out) == 0 else out


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> Union[float, np.ndarray]:
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    trace = np.einsum('...ji,...ji->...', R1, R2)
    arg   = (trace - 1.0) / 2.0
    if np.any(np.abs(arg) > 1.0 + GEODESIC_SLACK):
        raise ValueError(f'Rotation trace out of range: (trace - 1)/2 = {np.max(np.abs(arg))}')
    out = np.arccos(np.clip(arg, -1.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def sample_axis_angle_noise(std_cov: float, rng_seed: Seed, size: Optional[int] = None) -> np.ndarray:
    """ exp(dp) with dp ~ N(0, std_cov I); `std_cov` is the per-axis variance """
    if std_cov < 0:
        raise ValueError(f'Noise covariance must be non-negative, got {std_cov}')
    rng   = make_rng(rng_seed)
    shape = (3,) if size is None else (size, 3)
    omega = rng.normal(0.0, math.sqrt(std_cov), size=shape)
    return exp_so3(omega)


def chi_mean_angle(std_cov: float) -> float:
    """ E|dp| for dp ~ N(0, std_cov I) in three dimensions """
    return 2.0 * math.sqrt(std_cov) * math.sqrt(2.0 / math.pi)


def quaternion_average(qs: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """ Chordal L2 mean: principal eigenvector of sum(w q q^T), sign-invariant """
    qs = quat_normalize(np.atleast_2d(qs))
    w  = np.ones(len(qs)) if weights is None else np.asarray(weights, dtype=np.float64)
    M  = np.einsum('n,ni,nj->ij', w, qs, qs)
    _, vecs = np.linalg.eigh(M)
    return quat_canonical(vecs[:, -1])


# ------------------------------------------------------------------------------
# camera projection
def project(point: np.ndarray, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    x = pose.apply(np.atleast_2d(point))
    z = x[:, 2]
    if np.any(z <= 0):
        raise ValueError(f'Point behind the camera (z = {z.min():.6g})')
    uv = np.stack([K.fx * x[:, 0] / z + K.cx, K.fy * x[:, 1] / z + K.cy], axis=-1)
    return uv[0] if np.ndim(point) == 1 else uv


def unproject(pixel: np.ndarray, depth: Union[float, np.ndarray], pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    """ Lift pixels with z-depth into world coordinates """
    uv = np.atleast_2d(np.asarray(pixel, dtype=np.float64))
    d  = np.broadcast_to(np.asarray(depth, dtype=np.float64), uv.shape[:1])
    if np.any(d <= 0):
        raise ValueError(f'Depth must be positive (min = {d.min():.6g})')
    cam = np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=-1)
    world = pose.inverse().apply(cam)
    return world[0] if np.ndim(pixel) == 1 else world


def look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 0.0, 1.0)) -> RigidTransform:
    """ World-to-camera pose of a camera at `center` looking at `target` (x right, y down, z forward) """
    center  = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    right   = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down  = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidTransform.from_matrix(R, -R @ center)


# ------------------------------------------------------------------------------
# differentiable quaternion helpers
def quat_mul_t(p: Union[Tensor, np.ndarray], q: Union[Tensor, np.ndarray]) -> Tensor:
    p, q = diff.as_tensor(p), diff.as_tensor(q)
    pw, px, py, pz = (p[..., i] for i in range(4))
    qw, qx, qy, qz = (q[..., i] for i in range(4))
    return diff.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conj_t(q: Union[Tensor, np.ndarray]) -> Tensor:
    return diff.as_tensor(q) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize_t(q: Tensor) -> Tensor:
    return q / diff.norm(q, axis=-1, keepdims=True)


def dq_distance_t(p: Union[Tensor, np.ndarray], q: Union[Tensor, np.ndarray]) -> Tensor:
    p, q = diff.as_tensor(p), diff.as_tensor(q)
    return diff.minimum(diff.norm(p - q, axis=-1), diff.norm(p + q, axis=-1))


def quat_to_matrix_t(q: Tensor) -> Tensor:
    """ (..., 4) unit quaternions to (..., 3, 3) rotation matrices """
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return diff.stack([diff.stack(r, axis=-1) for r in rows], axis=-2)


def exp_so3_first_order_t(omega: Tensor) -> Tensor:
    """ I + hat(omega): the exponential map linearised at zero """
    wx, wy, wz = omega[0], omega[1], omega[2]
    zero = diff.Tensor(0.0)
    K = diff.stack([diff.stack([zero, -wz, wy]),
                    diff.stack([wz, zero, -wx]),
                    diff.stack([-wy, wx, zero])])
    return K + np.eye(3)
