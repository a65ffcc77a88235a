"""
Classical pose averaging: robust IRLS rotation averaging, linear translation
solving and similarity alignment of pose sets.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence
from posefield.core.geom import exp_so3
from posefield.core.geom import log_so3
from posefield.core.geom import quat_mul
from posefield.core.geom import quat_to_matrix
from posefield.core.geom import matrix_to_quat
from posefield.core.geom import geodesic_angle
from posefield.core.geom import quaternion_average
from posefield.core.geom import RigidTransform
from posefield.core.viewgraph import ViewGraph
from posefield.core.viewgraph import edge_discrepancy
from posefield.core.viewgraph import ensure_connected

logger = logging.getLogger(__name__)

robust_kinds = ('l2', 'huber', 'l1')


@dataclass(frozen=True)
class RobustLossConfig:
    kind:        str   = 'huber'
    scale_deg:   float = 10.0   # Huber threshold
    epsilon_deg: float = 0.05   # smoothing of the L1 approximation

    def __post_init__(self) -> None:
        if self.kind not in robust_kinds:
            raise ValueError(f'Unknown robust loss {self.kind}. Valid values: {list(robust_kinds)}')
        if self.kind == 'huber' and self.scale_deg <= 0:
            raise ValueError(f'Huber scale must be positive, got {self.scale_deg}')
        if self.kind == 'l1' and self.epsilon_deg <= 0:
            raise ValueError(f'L1 smoothing must be positive, got {self.epsilon_deg}')

    def rho(self, r: np.ndarray) -> np.ndarray:
        """ Robust cost of residual angles (radians) """
        if self.kind == 'l2':
            return r ** 2
        if self.kind == 'huber':
            c = math.radians(self.scale_deg)
            return np.where(r <= c, r ** 2, 2.0 * c * r - c ** 2)
        eps = math.radians(self.epsilon_deg)
        return 2.0 * np.sqrt(r ** 2 + eps ** 2)

    def weights(self, r: np.ndarray) -> np.ndarray:
        """ rho'(r) / 2r """
        if self.kind == 'l2':
            return np.ones_like(r)
        if self.kind == 'huber':
            c = math.radians(self.scale_deg)
            return np.where(r <= c, 1.0, c / np.maximum(r, 1e-300))
        eps = math.radians(self.epsilon_deg)
        return 1.0 / np.sqrt(r ** 2 + eps ** 2)


class AveragingResult(NamedTuple):
    rotations:  np.ndarray
    objective:  float
    iterations: int
    converged:  bool


def averaging_objective(g: ViewGraph, rotations: np.ndarray, cfg: RobustLossConfig) -> float:
    residual = np.linalg.norm(log_so3(quat_to_matrix(edge_discrepancy(g, rotations))), axis=-1)
    return float(np.sum(cfg.rho(residual)))


def irls_rotation_averaging(g: ViewGraph, init: np.ndarray, cfg: RobustLossConfig = RobustLossConfig(),
                            max_iters: int = 100, tol: float = 1e-12, root: Optional[int] = None) -> AveragingResult:
    """ Robust rotation averaging by reweighted Gauss-Newton on left increments

    Each node is perturbed as R_i <- exp(w_i) R_i; the edge residual
    log(R_ij R_i R_j^-1) is linearised to r + R_ij w_i - w_j. The root node is
    held fixed and rejected steps are halved.
    """
    ensure_connected(g)
    n    = g.n_nodes
    root = int(np.argmax(g.degrees())) if root is None else root
    free = [k for k in range(n) if k != root]
    col  = {node: 3 * idx for idx, node in enumerate(free)}

    rotations = np.array(init, dtype=np.float64)
    objective = averaging_objective(g, rotations, cfg)
    if objective <= tol:
        return AveragingResult(rotations, objective, 0, True)

    rel_mats = quat_to_matrix(g.relatives)
    for it in range(1, max_iters + 1):
        res     = log_so3(quat_to_matrix(edge_discrepancy(g, rotations)))
        sqrt_w  = np.sqrt(cfg.weights(np.linalg.norm(res, axis=-1)))
        A = np.zeros((3 * g.n_edges, 3 * len(free)))
        b = np.zeros(3 * g.n_edges)
        for k, (i, j) in enumerate(g.edges):
            rows = slice(3 * k, 3 * k + 3)
            if i != root:
                A[rows, col[i]:col[i] + 3] = sqrt_w[k] * rel_mats[k]
            if j != root:
                A[rows, col[j]:col[j] + 3] = -sqrt_w[k] * np.eye(3)
            b[rows] = -sqrt_w[k] * res[k]
        step = np.linalg.lstsq(A, b, rcond=None)[0].reshape(-1, 3)

        accepted = False
        for _ in range(20):
            omega = np.zeros((n, 3))
            omega[free] = step
            candidate = quat_mul(matrix_to_quat(exp_so3(omega)), rotations)
            value = averaging_objective(g, candidate, cfg)
            if value <= objective:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return AveragingResult(rotations, objective, it, True)

        decrease  = objective - value
        rotations = candidate
        objective = value
        if decrease <= tol:
            return AveragingResult(rotations, objective, it, True)

    logger.warning('IRLS rotation averaging did not converge in %d iterations (objective %.6g)', max_iters, objective)
    return AveragingResult(rotations, objective, max_iters, False)


# ------------------------------------------------------------------------------
class TranslationResult(NamedTuple):
    translations: np.ndarray
    residual:     float


def solve_translations(rotations: np.ndarray, relative_translations: np.ndarray, edge_list: np.ndarray,
                       root: int = 0) -> TranslationResult:
    """ Least-squares translations from t_ij = t_j - R_ij t_i with t_root = 0 """
    q     = np.asarray(rotations, dtype=np.float64)
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    rel_t = np.asarray(relative_translations, dtype=np.float64).reshape(-1, 3)
    n     = len(q)
    if len(rel_t) != len(edges):
        raise ValueError(f'{len(edges)} edges but {len(rel_t)} relative translations')

    # nodes without a path to the root are unconstrained
    graph = ViewGraph(n_nodes=n, edges=edges, relatives=np.tile([1.0, 0.0, 0.0, 0.0], (len(edges), 1)))
    comps = graph.components()
    null  = sorted(node for comp in comps if root not in comp for node in comp)
    if null:
        raise ValueError(f'Translation system is rank deficient beyond the gauge: null nodes {null}')

    R    = quat_to_matrix(q)
    free = [k for k in range(n) if k != root]
    col  = {node: 3 * idx for idx, node in enumerate(free)}
    A = np.zeros((3 * len(edges), 3 * len(free)))
    b = rel_t.reshape(-1).copy()
    for k, (i, j) in enumerate(edges):
        rows = slice(3 * k, 3 * k + 3)
        if j != root:
            A[rows, col[j]:col[j] + 3] = np.eye(3)
        if i != root:
            A[rows, col[i]:col[i] + 3] = -(R[j] @ R[i].T)

    solution, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < A.shape[1]:
        raise ValueError(f'Translation system has rank {rank} < {A.shape[1]}')
    t = np.zeros((n, 3))
    t[free] = solution.reshape(-1, 3)
    residual = float(np.linalg.norm(A @ solution - b))
    return TranslationResult(t, residual)


def relative_translations(rotations: np.ndarray, translations: np.ndarray, edge_list: np.ndarray) -> np.ndarray:
    """ t_ij = t_j - R_ij t_i for known poses """
    R     = quat_to_matrix(np.asarray(rotations, dtype=np.float64))
    t     = np.asarray(translations, dtype=np.float64)
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    i, j  = edges[:, 0], edges[:, 1]
    R_ij  = R[j] @ np.transpose(R[i], (0, 2, 1))
    return t[j] - np.einsum('mab,mb->ma', R_ij, t[i])


# ------------------------------------------------------------------------------
class AlignmentResult(NamedTuple):
    rotation:           np.ndarray
    translation:        np.ndarray
    scale:              float
    rotation_errors:    np.ndarray   # degrees
    translation_errors: np.ndarray
    aligned:            List[RigidTransform]


def align_pose_sets(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> AlignmentResult:
    """ Similarity x_gt = s Q x_est + tau fitted on camera centers """
    if len(est) != len(gt):
        raise ValueError(f'{len(est)} estimated poses but {len(gt)} reference poses')
    if len(est) < 3:
        raise ValueError(f'Pose alignment needs at least 3 poses, got {len(est)}')

    X = np.stack([p.center for p in est])
    Y = np.stack([p.center for p in gt])
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mu_x, Y - mu_y
    spread = np.linalg.svd(Xc, compute_uv=False)

    if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
        logger.warning('Camera centers are collinear: alignment scale fixed to 1')
        Q = quat_to_matrix(quaternion_average(np.stack([
            matrix_to_quat(g.R.T @ e.R) for e, g in zip(est, gt)])))
        s = 1.0
    else:
        U, D, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
        S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        Q = U @ S @ Vt
        s = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(Xc ** 2, axis=1)))
    tau = mu_y - s * Q @ mu_x

    aligned, rot_err, trans_err = [], [], []
    for e, g in zip(est, gt):
        R = e.R @ Q.T
        c = s * Q @ e.center + tau
        pose = RigidTransform.from_matrix(R, -R @ c)
        aligned.append(pose)
        rot_err.append(math.degrees(geodesic_angle(R, g.R)))
        trans_err.append(float(np.linalg.norm(c - g.center)))
    return AlignmentResult(Q, tau, s, np.array(rot_err), np.array(trans_err), aligned)
