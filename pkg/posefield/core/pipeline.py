"""
Joint optimisation of camera poses and a multi-scale radiance field.

Four schedules share one trainer:

  frozen  the field alone, poses fixed (control run)
  rmnerf  input poses -> view graph -> rotation network, trained with
          lambda L_mra + (1 - lambda) L_rgb
  nopose  poses bootstrapped from depth by chamfer descent, then chamfer
          pose blocks alternating with network/field blocks
  e2e     nopose with learnable focal lengths

Rendering always uses P = f(P_hat): the network refines the current pose
estimates P_hat, which only the chamfer updates move.
"""
import math
import logging
import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm
from posefield.core import diff
from posefield.core.diff import Adam
from posefield.core.diff import Tensor
from posefield.core.diff import Parameter
from posefield.core.diff import LogLinearSchedule
from posefield.core.geom import make_rng
from posefield.core.geom import quat_to_matrix
from posefield.core.geom import quat_to_matrix_t
from posefield.core.geom import random_quaternions
from posefield.core.geom import sample_axis_angle_noise
from posefield.core.geom import RigidTransform
from posefield.core.geom import UnitQuaternion
from posefield.core.geom import CameraIntrinsics
from posefield.core.viewgraph import ViewGraph
from posefield.core.viewgraph import clean_cycles
from posefield.core.viewgraph import mst_bootstrap
from posefield.core.viewgraph import align_rotations
from posefield.core.viewgraph import ensure_connected
from posefield.core.viewgraph import rotation_errors_deg
from posefield.core.viewgraph import relatives_from_absolutes
from posefield.core.avg import RobustLossConfig
from posefield.core.avg import align_pose_sets
from posefield.core.avg import solve_translations
from posefield.core.avg import relative_translations
from posefield.core.avg import irls_rotation_averaging
from posefield.core.mra import MraConfig
from posefield.core.mra import MraLossConfig
from posefield.core.mra import MpnnParams
from posefield.core.mra import clone
from posefield.core.mra import refine
from posefield.core.mra import loss_mra
from posefield.core.mra import predict_rotations
from posefield.core.field import FieldConfig
from posefield.core.field import RadianceField
from posefield.core.field import posed_rays
from posefield.core.field import render_rays
from posefield.core.field import render_image
from posefield.core.field import loss_rgb
from posefield.core.field import encoding_at
from posefield.core.field import pixel_centers
from posefield.core.depth import DepthMap
from posefield.core.depth import DepthConfig
from posefield.core.depth import PoseUpdate
from posefield.core.depth import select_pairs
from posefield.core.depth import depth_to_cloud
from posefield.core.depth import pairs_objective
from posefield.core.depth import assign_neighbors
from posefield.core.depth import update_pose_chamfer
from posefield.core.depth import align_pair_multistart
from posefield.core.depth import chain_poses
from posefield.core.scene import ScenePackage
from posefield.core.metrics import psnr
from posefield.core.metrics import ssim

logger = logging.getLogger(__name__)

variants          = ('frozen', 'rmnerf', 'nopose', 'e2e')
weightings        = ('biased', 'unbiased')
translation_modes = ('keep', 'solve')

# loss term -> parameter groups it may reach
ROUTING = {
    'rgb':   {'field', 'gnn', 'intrinsics'},
    'mra':   {'gnn'},
    'depth': {'depth_align'},
    'cd':    {'pose_hat'},
}


@dataclass(frozen=True)
class ScheduleConfig:
    lambda0:         float = 1.0
    floor:           float = 0.5
    k_decay:         float = 0.0    # 0: reach the floor after decay_fraction of the run
    decay_fraction:  float = 0.3
    hold_steps:      int   = 0
    weighting:       str   = 'biased'
    block:           int   = 50
    warmup_fraction: float = 0.1
    iterations:      int   = 2000
    batch:           int   = 512
    gnn_lr:          float = 1e-4
    intrinsics_lr:   float = 1e-3
    focal_jitter:    float = 0.2
    translations:    str   = 'keep'
    eval_every:      int   = 100

    def __post_init__(self) -> None:
        if not 0 < self.floor < 1:
            raise ValueError(f'Lambda floor must lie in (0, 1), got {self.floor}')
        if self.block < 1:
            raise ValueError(f'Alternation block must be at least 1, got {self.block}')
        if self.iterations < 1 or self.batch < 1:
            raise ValueError(f'Invalid run size: {self.iterations} iterations of {self.batch} rays')
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f'Warmup fraction must lie in [0, 1), got {self.warmup_fraction}')
        if not 0 < self.decay_fraction <= 1:
            raise ValueError(f'Decay fraction must lie in (0, 1], got {self.decay_fraction}')
        if self.weighting not in weightings:
            raise ValueError(f'Unknown weighting {self.weighting}. Valid values: {list(weightings)}')
        if self.translations not in translation_modes:
            raise ValueError(f'Unknown translation mode {self.translations}. Valid values: {list(translation_modes)}')

    @property
    def decay(self) -> float:
        if self.k_decay > 0:
            return self.k_decay
        if self.lambda0 <= self.floor:
            return 0.0
        return math.log(self.lambda0 / self.floor) / (self.decay_fraction * self.iterations)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.iterations))


def lambda_at(cfg: ScheduleConfig, step: int) -> float:
    """ max(lambda0 exp(-k t), floor); constant at the floor for the unbiased weighting """
    if cfg.weighting == 'unbiased':
        return cfg.floor
    if step < cfg.hold_steps:
        return cfg.lambda0
    return max(cfg.lambda0 * math.exp(-cfg.decay * (step - cfg.hold_steps)), cfg.floor)


# ------------------------------------------------------------------------------
def perturb_poses(poses: Sequence[RigidTransform], cov: float, seed=None, translation_std: float = 0.0,
                  fraction: float = 1.0) -> List[RigidTransform]:
    """ R <- exp(dp) R with dp ~ N(0, cov I) on a random `fraction` of the poses

    Camera centers stay put unless `translation_std` > 0, which shifts them
    by isotropic Gaussian noise.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f'Perturbed fraction must lie in [0, 1], got {fraction}')
    if translation_std < 0:
        raise ValueError(f'Translation noise must be non-negative, got {translation_std}')
    rng   = make_rng(seed)
    n     = len(poses)
    count = int(round(fraction * n))
    chosen = np.arange(n) if count == n else np.sort(rng.choice(n, size=count, replace=False))
    noise  = sample_axis_angle_noise(cov, rng, size=len(chosen))
    shifts = rng.normal(0.0, translation_std, size=(len(chosen), 3)) if translation_std > 0 else None

    out = list(poses)
    if cov == 0 and shifts is None:
        return out
    for slot, k in enumerate(chosen):
        pose = poses[k]
        R = pose.R if cov == 0 else noise[slot] @ pose.R
        c = pose.center if shifts is None else pose.center + shifts[slot]
        out[k] = RigidTransform.from_matrix(R, -R @ c)
    return out


# ------------------------------------------------------------------------------
class GradientAudit:
    """ Records which parameter groups every loss term reaches

    Each term is back-propagated on its own; a group is reached when the
    term changes the gradient of any of its tensors.
    """
    def __init__(self, groups: Dict[str, Sequence[Tensor]]) -> None:
        self.groups  = {name: list(params) for name, params in groups.items()}
        self.touched: Dict[str, Set[str]] = {}

    def backward(self, term: str, loss: Tensor, weight: float = 1.0,
                 extra: Optional[Dict[str, Sequence[Tensor]]] = None) -> None:
        groups = dict(self.groups)
        groups.update(extra or {})
        before = {name: [None if p.grad is None else p.grad.copy() for p in params]
                  for name, params in groups.items()}
        (loss * weight).backward()
        hit = self.touched.setdefault(term, set())
        for name, params in groups.items():
            for p, old in zip(params, before[name]):
                if p.grad is None:
                    continue
                delta = p.grad if old is None else p.grad - old
                if np.any(delta != 0):
                    hit.add(name)
                    break

    def violations(self, rules: Dict[str, Set[str]] = ROUTING) -> Dict[str, Set[str]]:
        out = {}
        for term, touched in self.touched.items():
            extra = touched - rules.get(term, set())
            if extra:
                out[term] = extra
        return out

    def verify(self, rules: Dict[str, Set[str]] = ROUTING) -> None:
        bad = self.violations(rules)
        if bad:
            raise RuntimeError(f'Gradient routing violated: {bad}')


# ------------------------------------------------------------------------------
# view-graph refinement
def complete_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1).astype(np.int64)


def build_view_graph(rotations: np.ndarray, pairs: Optional[np.ndarray] = None,
                     relatives: Optional[np.ndarray] = None, threshold_deg: float = 15.0) -> ViewGraph:
    """ Cleaned view graph with bootstrap estimates expressed in the gauge of `rotations`

    Without measured relatives every pair is joined by the relative of the
    input rotations.
    """
    q = np.asarray(rotations, dtype=np.float64)
    if len(q) < 2:
        raise ValueError(f'A view graph needs at least two views, got {len(q)}')
    if pairs is None:
        pairs     = complete_pairs(len(q))
        relatives = relatives_from_absolutes(q, pairs)
    g = ViewGraph(n_nodes=len(q), edges=pairs, relatives=relatives)
    ensure_connected(g)
    g = clean_cycles(g, threshold_deg)
    boot, _ = align_rotations(mst_bootstrap(g), q, robust=True)
    return g.with_estimates(boot)


def recentred_translations(rotations: np.ndarray, reference: Sequence[RigidTransform], edges: np.ndarray) -> np.ndarray:
    """ Translations solved for `rotations` from the relative translations of `reference`

    The world origin is shifted so the mean camera center matches the reference.
    """
    q_ref = np.stack([p.rotation.as_array() for p in reference])
    t_ref = np.stack([p.t for p in reference])
    rel_t = relative_translations(q_ref, t_ref, edges)
    t = solve_translations(rotations, rel_t, edges, root=0).translations
    R = quat_to_matrix(rotations)
    centers = -np.einsum('nji,nj->ni', R, t)
    shift   = np.mean([p.center for p in reference], axis=0) - centers.mean(axis=0)
    return t - np.einsum('nij,j->ni', R, shift)


class RefinedPoses(NamedTuple):
    poses:     List[RigidTransform]
    graph:     ViewGraph
    bootstrap: np.ndarray
    rotations: np.ndarray


def refine_view_graph(poses: Sequence[RigidTransform], net: MpnnParams,
                      pairs: Optional[np.ndarray] = None, relatives: Optional[np.ndarray] = None,
                      threshold_deg: float = 15.0, translations: str = 'keep') -> RefinedPoses:
    """ Clean, bootstrap and refine the view graph of `poses`, then rebuild full poses """
    if translations not in translation_modes:
        raise ValueError(f'Unknown translation mode {translations}. Valid values: {list(translation_modes)}')
    q     = np.stack([p.rotation.as_array() for p in poses])
    graph = build_view_graph(q, pairs, relatives, threshold_deg)
    rot   = refine(net, graph)
    if translations == 'solve':
        t = recentred_translations(rot, poses, graph.edges)
    else:
        t = -np.einsum('nij,nj->ni', quat_to_matrix(rot), np.stack([p.center for p in poses]))
    out = [RigidTransform(UnitQuaternion.from_array(r), tuple(tt)) for r, tt in zip(rot, t)]
    return RefinedPoses(out, graph, graph.estimates, rot)


class BaselineComparison(NamedTuple):
    irls_rotation_deg:        float
    gnn_rotation_deg:         float
    bootstrap_rotation_deg:   float
    irls_translation_error:   float
    gnn_translation_error:    float

    def summary(self) -> Dict[str, float]:
        return self._asdict()


def compare_averaging(graph: ViewGraph, reference: Sequence[RigidTransform], net: MpnnParams,
                      robust: RobustLossConfig = RobustLossConfig(), threshold_deg: float = 15.0) -> BaselineComparison:
    """ IRLS rotation averaging against network refinement on one noisy view graph

    Translations are solved linearly from the reference relative translations
    for both rotation sets and scored after similarity alignment.
    """
    q_ref   = np.stack([p.rotation.as_array() for p in reference])
    t_ref   = np.stack([p.t for p in reference])
    cleaned = clean_cycles(graph, threshold_deg)
    boot    = mst_bootstrap(cleaned)
    irls    = irls_rotation_averaging(cleaned, boot, robust).rotations
    gnn     = refine(net, cleaned.with_estimates(boot))
    rel_t   = relative_translations(q_ref, t_ref, cleaned.edges)

    def translation_error(rotations: np.ndarray) -> float:
        t = solve_translations(rotations, rel_t, cleaned.edges).translations
        est = [RigidTransform(UnitQuaternion.from_array(r), tuple(tt)) for r, tt in zip(rotations, t)]
        return float(np.mean(align_pose_sets(est, reference).translation_errors))

    return BaselineComparison(float(rotation_errors_deg(irls, q_ref).mean()),
                              float(rotation_errors_deg(gnn, q_ref).mean()),
                              float(rotation_errors_deg(boot, q_ref).mean()),
                              translation_error(irls), translation_error(gnn))


# ------------------------------------------------------------------------------
# training
class RaySet(NamedTuple):
    frame:  np.ndarray   # position in the trainer's frame list
    view:   np.ndarray
    pixel:  np.ndarray   # (N, 2)
    color:  np.ndarray   # (N, 3)
    depth:  np.ndarray   # relative depth, 0 where invalid
    valid:  np.ndarray
    scale:  np.ndarray
    cx:     np.ndarray
    cy:     np.ndarray

    def __len__(self) -> int:
        return len(self.frame)


def gather_rays(scene: ScenePackage, frames: Sequence[int], views: Sequence[str]) -> RaySet:
    view_index = {v: k for k, v in enumerate(views)}
    parts = []
    for slot, k in enumerate(frames):
        f  = scene.frames[k]
        uv = pixel_centers(f.height, f.width)
        n  = len(uv)
        depth = f.depth.reshape(-1) if f.depth is not None else np.zeros(n)
        valid = f.mask.reshape(-1) & (depth > 0) if f.mask is not None else depth > 0
        parts.append((np.full(n, slot), np.full(n, view_index[f.view]), uv, f.image.reshape(-1, 3),
                      depth, valid, np.full(n, float(f.scale)),
                      np.full(n, f.intrinsics.cx), np.full(n, f.intrinsics.cy)))
    return RaySet(*(np.concatenate(cols) for cols in zip(*parts)))


@dataclass
class JointResult:
    variant:         str
    radiance:        RadianceField
    net:             MpnnParams
    poses:           List[RigidTransform]                # refined, one per train view
    intrinsics:      CameraIntrinsics                    # at scale 1
    depth_alignment: List[Tuple[float, float]]
    history:         List[Dict[str, float]]
    audit:           GradientAudit
    metrics:         Dict[str, float] = field(default_factory=dict)


class JointTrainer:
    def __init__(self, scene: ScenePackage, variant: str,
                 schedule: ScheduleConfig = ScheduleConfig(), field_cfg: FieldConfig = FieldConfig(),
                 mra_cfg: MraConfig = MraConfig(), depth_cfg: DepthConfig = DepthConfig(),
                 net: Optional[MpnnParams] = None, seed: int = 0,
                 initial_poses: Optional[Sequence[RigidTransform]] = None,
                 initial_intrinsics: Optional[CameraIntrinsics] = None,
                 verbose: bool = False) -> None:
        if variant not in variants:
            raise ValueError(f'Unknown variant {variant}. Valid values: {list(variants)}')
        self.scene     = scene
        self.variant   = variant
        self.schedule  = schedule
        self.field_cfg = field_cfg
        self.mra_cfg   = mra_cfg
        self.depth_cfg = depth_cfg
        self.verbose   = verbose
        self.uses_depth = variant in ('nopose', 'e2e')

        self.views  = scene.train_views()
        self.frames = scene.indices('train', scale=None)
        n = len(self.views)
        if n < 2:
            raise ValueError(f'Joint training needs at least two train views, got {n}')
        if self.uses_depth and not scene.has_depth:
            raise ValueError(f'Variant {variant} needs a depth map for every train frame')

        self.rng    = np.random.default_rng(seed)
        self.rays   = gather_rays(scene, self.frames, self.views)
        self.field  = RadianceField(field_cfg, np.random.default_rng([seed, 1]))
        self.net    = clone(net) if net is not None else MpnnParams.from_config(mra_cfg, np.random.default_rng([seed, 2]))
        self.finest = [scene.view_frame(v) for v in self.views]
        self.gt     = None
        if scene.ground_truth is not None:
            self.gt = [scene.ground_truth[k] for k in self.finest]

        # pose estimates P_hat, moved only by chamfer updates
        if initial_poses is not None:
            start = list(initial_poses)
        elif self.uses_depth:
            q = random_quaternions(n, self.rng)
            start = [RigidTransform(UnitQuaternion.from_array(r), (0.0, 0.0, 0.0)) for r in q]
        else:
            start = [scene.frames[k].pose for k in self.finest]
            missing = [v for v, p in zip(self.views, start) if p is None]
            if missing:
                raise ValueError(f'Variant {variant} needs input poses; missing for views {missing}')
        if len(start) != n:
            raise ValueError(f'{len(start)} initial poses for {n} train views')
        self.bootstrap_from_depth = self.uses_depth and initial_poses is None
        self.pose_rotations    = Parameter(np.stack([p.rotation.as_array() for p in start]), name='pose_hat.rotations')
        self.pose_translations = Parameter(np.stack([p.t for p in start]), name='pose_hat.translations')
        self.initial_poses     = start

        # intrinsics, learnable focal lengths for e2e
        base = scene.frames[self.finest[0]].intrinsics.scaled(1.0 / scene.frames[self.finest[0]].scale)
        self.log_focal = None
        if variant == 'e2e':
            if initial_intrinsics is None:
                width  = scene.frames[self.finest[0]].width * scene.frames[self.finest[0]].scale
                jitter = np.random.default_rng([seed, 3]).uniform(-schedule.focal_jitter, schedule.focal_jitter)
                initial_intrinsics = CameraIntrinsics(width * (1 + jitter), width * (1 + jitter), base.cx, base.cy)
            self.log_focal = Parameter(np.log([initial_intrinsics.fx, initial_intrinsics.fy]), name='intrinsics.log_focal')
            base = initial_intrinsics
        self.base_intrinsics = base
        self.initial_focal   = base.fx

        self.depth_maps: List[DepthMap] = []
        if self.uses_depth:
            for k in self.frames:
                f = scene.frames[k]
                self.depth_maps.append(DepthMap(f.depth, f.mask, frame_id=f.frame_id))

        groups = {
            'field':       list(self.field.get_parameters()),
            'gnn':         list(self.net.get_parameters()),
            'pose_hat':    [self.pose_rotations, self.pose_translations],
            'depth_align': [p for d in self.depth_maps for p in d.get_parameters()],
            'intrinsics':  [self.log_focal] if self.log_focal is not None else [],
        }
        self.audit = GradientAudit(groups)
        self.optimizers = {
            'field':       Adam(self.field.named_parameters('field.'),
                                LogLinearSchedule(field_cfg.lr, field_cfg.lr_end, schedule.iterations)),
            'gnn':         Adam(self.net.named_parameters('gnn.'), schedule.gnn_lr, mra_cfg.weight_decay),
            'depth_align': Adam({p.name: p for p in groups['depth_align']}, depth_cfg.alignment_lr),
            'intrinsics':  Adam({p.name: p for p in groups['intrinsics']}, schedule.intrinsics_lr),
        }
        self.loss_cfg    = MraLossConfig(mra_cfg.beta)
        self.chamfer_pairs = select_pairs(n, depth_cfg.random_pairs, self.rng) if self.uses_depth else []
        self.chamfer_step  = depth_cfg.step
        self.rising        = 0
        self.last_chamfer  = math.inf
        self.graph: Optional[ViewGraph] = None
        self.t_render: Optional[np.ndarray] = None

    # --------------------------------------------------------------------------
    @property
    def n_views(self) -> int:
        return len(self.views)

    def pose_estimates(self) -> List[RigidTransform]:
        return [RigidTransform(UnitQuaternion.from_array(q), tuple(t))
                for q, t in zip(self.pose_rotations.data, self.pose_translations.data)]

    def set_pose_estimates(self, poses: Sequence[RigidTransform]) -> None:
        self.pose_rotations.data    = np.stack([p.rotation.as_array() for p in poses])
        self.pose_translations.data = np.stack([p.t for p in poses])
        self.graph = None

    def intrinsics(self) -> CameraIntrinsics:
        if self.log_focal is None:
            return self.base_intrinsics
        fx, fy = np.exp(self.log_focal.data)
        return CameraIntrinsics(float(fx), float(fy), self.base_intrinsics.cx, self.base_intrinsics.cy)

    def refresh_graph(self) -> None:
        """ View graph from P_hat (or the measured relatives for rmnerf) and translations for rendering """
        q_hat = self.pose_rotations.data
        pairs = relatives = None
        if self.variant == 'rmnerf' and self.scene.pairs is not None:
            pairs, relatives = self.scene.pairs, self.scene.relatives
        try:
            self.graph = build_view_graph(q_hat, pairs, relatives, self.mra_cfg.clean_threshold_deg)
        except ValueError as e:
            raise RuntimeError(f'Cannot build the view graph: {e}') from e
        self.t_render = None

    @property
    def solves_translations(self) -> bool:
        return self.schedule.translations == 'solve' and self.variant != 'frozen'

    def hat_centers(self) -> np.ndarray:
        R = quat_to_matrix(self.pose_rotations.data)
        return -np.einsum('nji,nj->ni', R, self.pose_translations.data)

    def refresh_translations(self) -> None:
        """ Translations solved for the refined rotations from the relative translations of P_hat """
        rotations = predict_rotations(self.net, self.graph).numpy()
        self.t_render = recentred_translations(rotations, self.pose_estimates(), self.graph.edges)

    def rotations(self) -> Tensor:
        """ Rotations used for rendering, (V, 4) """
        if self.variant == 'frozen':
            return Tensor(self.pose_rotations.data.copy())
        if self.graph is None:
            self.refresh_graph()
        return predict_rotations(self.net, self.graph)

    def current_poses(self) -> List[RigidTransform]:
        if self.graph is None and self.variant != 'frozen':
            self.refresh_graph()
        q = self.rotations().numpy()
        if self.solves_translations:
            if self.t_render is None:
                self.refresh_translations()
            t = self.t_render
        else:
            t = -np.einsum('nij,nj->ni', quat_to_matrix(q), self.hat_centers())
        return [RigidTransform(UnitQuaternion.from_array(r), tuple(tt)) for r, tt in zip(q, t)]

    # --------------------------------------------------------------------------
    def focal_rays(self, idx: np.ndarray) -> Tuple:
        scale = self.rays.scale[idx]
        if self.log_focal is None:
            fx = np.array([self.scene.frames[self.frames[f]].intrinsics.fx for f in range(len(self.frames))])
            fy = np.array([self.scene.frames[self.frames[f]].intrinsics.fy for f in range(len(self.frames))])
            return fx[self.rays.frame[idx]], fy[self.rays.frame[idx]]
        focal = diff.exp(self.log_focal)
        return focal[0] / scale, focal[1] / scale

    def render_batch(self, idx: np.ndarray, q: Tensor, step: int):
        """ Rays of batch `idx`; without solved translations every camera keeps its P_hat center """
        v = self.rays.view[idx]
        R = quat_to_matrix_t(q)[v]
        if self.solves_translations:
            if self.t_render is None:
                self.refresh_translations()
            t = self.t_render[v]
        else:
            t = -(R @ self.hat_centers()[v][:, :, None]).reshape(len(idx), 3)
        fx, fy = self.focal_rays(idx)
        rays = posed_rays(self.rays.pixel[idx], R, t, fx, fy, self.rays.cx[idx], self.rays.cy[idx])
        return render_rays(self.field, rays, self.scene.near, self.scene.far,
                           encoding_at(self.field_cfg, step), self.rng)

    def rgb_term(self, out, idx: np.ndarray) -> Tensor:
        target = self.rays.color[idx]
        loss = loss_rgb(out.color, target)
        if self.field_cfg.coarse_weight > 0:
            loss = loss + self.field_cfg.coarse_weight * loss_rgb(out.coarse_color, target)
        return loss / len(idx)

    def mra_term(self, q: Tensor) -> Tensor:
        return loss_mra(q, self.graph, None, self.loss_cfg) / max(self.graph.n_edges, 1)

    def depth_term(self, out, idx: np.ndarray) -> Optional[Tensor]:
        """ Mean squared gap between aligned depth and the detached rendered depth """
        keep = self.rays.valid[idx] & ~out.empty
        if not np.any(keep):
            return None
        rows  = idx[keep]
        frame = self.rays.frame[rows]
        log_alpha = diff.stack([d.log_alpha for d in self.depth_maps])[frame]
        beta      = diff.stack([d.beta for d in self.depth_maps])[frame]
        aligned   = diff.exp(log_alpha) * self.rays.depth[rows] + beta
        gap = aligned - out.depth.data[keep]
        return diff.mean(gap * gap)

    # --------------------------------------------------------------------------
    def clouds(self) -> List[np.ndarray]:
        """ Camera-frame clouds of the aligned depth, one per view, intrinsics detached """
        K = self.intrinsics()
        out = []
        for k in self.finest:
            f = self.scene.frames[k]
            d = self.depth_maps[self.frames.index(k)]
            out.append(depth_to_cloud(d.transformed(), K.scaled(f.scale), d.mask,
                                      max_points=self.depth_cfg.max_points, rng=self.rng).points)
        return out

    def bootstrap_poses(self) -> None:
        """ Chain multistart chamfer alignments of adjacent views """
        clouds = self.clouds()
        current = self.pose_estimates()
        relatives = []
        for k in range(self.n_views - 1):
            guess = current[k + 1].compose(current[k].inverse())
            X, value = align_pair_multistart(clouds[k], clouds[k + 1], self.depth_cfg.starts,
                                             self.depth_cfg.start_steps, self.depth_cfg.step, self.rng, guess)
            logger.debug('views %d -> %d: chamfer %.3g', k, k + 1, value)
            relatives.append(X)
        self.set_pose_estimates(chain_poses(relatives))

    def chamfer_pass(self, audit: bool = False) -> PoseUpdate:
        clouds = self.clouds()
        poses  = self.pose_estimates()
        if audit:
            increments = Tensor(np.zeros((self.n_views, 6)), requires_grad=True)
            assignment = assign_neighbors(poses, clouds, self.chamfer_pairs)
            objective  = pairs_objective(increments, poses, clouds, self.chamfer_pairs, assignment)
            self.audit.backward('cd', objective, extra={'pose_hat': [increments]})
        update = update_pose_chamfer(poses, clouds, self.chamfer_pairs, 2.0 * self.chamfer_step)
        self.chamfer_step = update.step
        self.rising = self.rising + 1 if update.loss > self.last_chamfer else 0
        self.last_chamfer = update.loss
        if self.rising >= self.depth_cfg.divergence_runs:
            logger.warning('Chamfer loss rose for %d consecutive passes; halving the step', self.rising)
            self.chamfer_step *= 0.5
            self.rising = 0
        self.set_pose_estimates(update.poses)
        return update

    # --------------------------------------------------------------------------
    def phase(self, step: int) -> str:
        """ 'warmup', 'pose' or 'joint' """
        if not self.uses_depth:
            return 'joint'
        warmup = self.schedule.warmup_steps
        if step < warmup:
            return 'warmup'
        return 'pose' if ((step - warmup) // self.schedule.block) % 2 == 0 else 'joint'

    def alignment_step(self, step: int, stats: Dict[str, float]) -> Dict[str, float]:
        """ Depth alignment against the detached rendered depth; field, network and intrinsics stay put """
        self.optimizers['depth_align'].zero_grad()
        idx   = self.rng.integers(len(self.rays), size=self.schedule.batch)
        out   = self.render_batch(idx, self.rotations(), step)
        depth = self.depth_term(out, idx)
        if depth is not None:
            stats['depth'] = depth.item()
            self.audit.backward('depth', depth)
            if step >= self.depth_cfg.align_delay:
                self.optimizers['depth_align'].step()
        return stats

    def train_step(self, step: int, audit: bool = False) -> Dict[str, float]:
        phase = self.phase(step)
        stats = {'iteration': float(step), 'lambda': float('nan')}
        if phase in ('warmup', 'pose'):
            stats['chamfer'] = self.chamfer_pass(audit).loss
            if phase == 'pose':
                return stats
            if phase == 'warmup' and self.variant == 'nopose':
                return self.alignment_step(step, stats)

        if self.graph is None and self.variant != 'frozen':
            self.refresh_graph()
        elif self.solves_translations and step % self.schedule.block == 0:
            self.t_render = None

        for opt in self.optimizers.values():
            opt.zero_grad()
        idx = self.rng.integers(len(self.rays), size=self.schedule.batch)
        q   = self.rotations()
        out = self.render_batch(idx, q, step)
        rgb = self.rgb_term(out, idx)
        stats['rgb']  = rgb.item()
        stats['psnr'] = psnr(out.color.data, self.rays.color[idx])

        if self.variant == 'rmnerf':
            lam = lambda_at(self.schedule, step)
            mra = self.mra_term(q)
            stats.update({'lambda': lam, 'mra': mra.item()})
            self.audit.backward('rgb', rgb, 1.0 - lam)
            self.audit.backward('mra', mra, lam)
            update = ('field', 'gnn')
        elif self.variant == 'frozen':
            self.audit.backward('rgb', rgb)
            update = ('field',)
        else:
            self.audit.backward('rgb', rgb)
            update = ['field'] + (['intrinsics'] if self.variant == 'e2e' else [])
            if phase == 'joint':
                mra = self.mra_term(q)
                stats['mra'] = mra.item()
                self.audit.backward('mra', mra)
                update.append('gnn')
            depth = self.depth_term(out, idx)
            if depth is not None:
                stats['depth'] = depth.item()
                self.audit.backward('depth', depth)
                if step >= self.depth_cfg.align_delay:
                    update.append('depth_align')

        for name in update:
            self.optimizers[name].step()
        return stats

    def rotation_error(self) -> Optional[float]:
        if self.gt is None:
            return None
        q  = np.stack([p.rotation.as_array() for p in self.current_poses()])
        gt = np.stack([p.rotation.as_array() for p in self.gt])
        return float(rotation_errors_deg(q, gt).mean())

    def run(self, audit: bool = False) -> JointResult:
        history, window = [], []
        initial_error = None
        if self.gt is not None:
            q0 = np.stack([p.rotation.as_array() for p in self.initial_poses])
            initial_error = float(rotation_errors_deg(q0, np.stack([p.rotation.as_array() for p in self.gt])).mean())
        if self.bootstrap_from_depth:
            self.bootstrap_poses()

        every = max(self.schedule.eval_every, 1)
        with logging_redirect_tqdm():
            for step in tqdm(range(self.schedule.iterations), desc=self.variant, disable=not self.verbose):
                stats = self.train_step(step, audit)
                window.append(stats)
                if (step + 1) % every == 0 or step + 1 == self.schedule.iterations:
                    row = summarize(window)
                    row['iteration'] = float(step + 1)
                    err = self.rotation_error()
                    if err is not None:
                        row['rotation_error_deg'] = err
                    history.append(row)
                    logger.info('%s %d: %s', self.variant, step + 1,
                                ', '.join(f'{k} {v:.4g}' for k, v in row.items() if k != 'iteration'))
                    window = []
                if self.uses_depth and step + 1 == self.schedule.warmup_steps:
                    err = self.rotation_error()
                    if err is not None:
                        logger.info('after warmup: mean rotation error %.3f deg', err)

        if audit:
            self.audit.verify()
        return self.result(history, initial_error)

    def result(self, history: List[Dict[str, float]], initial_error: Optional[float]) -> JointResult:
        poses   = self.current_poses()
        metrics = {}
        if initial_error is not None:
            metrics['initial_rotation_deg'] = initial_error
        if self.gt is not None:
            if self.n_views >= 3:
                aligned = align_pose_sets(poses, self.gt)
                metrics['rotation_deg']      = float(aligned.rotation_errors.mean())
                metrics['rotation_median']   = float(np.median(aligned.rotation_errors))
                metrics['translation_error'] = float(aligned.translation_errors.mean())
            else:
                metrics['rotation_deg'] = self.rotation_error()
        K = self.intrinsics()
        if self.log_focal is not None:
            true_fx = self.scene.frames[self.finest[0]].intrinsics.fx * self.scene.frames[self.finest[0]].scale
            metrics['focal'] = K.fx
            metrics['focal_error_pct'] = 100.0 * abs(K.fx - true_fx) / true_fx
            metrics['initial_focal_error_pct'] = 100.0 * abs(self.initial_focal - true_fx) / true_fx
        alignment = [(d.alpha, float(d.beta.data)) for d in self.depth_maps]
        return JointResult(self.variant, self.field, self.net, poses, K, alignment, history, self.audit, metrics)


def summarize(window: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys = sorted({k for row in window for k in row})
    out = {}
    for k in keys:
        values = [row[k] for row in window if k in row and not math.isnan(row[k])]
        if values:
            out[k] = float(np.mean(values))
    return out


# ------------------------------------------------------------------------------
def train_nerf(scene: ScenePackage, poses: Optional[Sequence[RigidTransform]] = None, **kwargs) -> JointResult:
    """ Field only, poses frozen at `poses` (the scene poses by default) """
    return JointTrainer(scene, 'frozen', initial_poses=poses, **kwargs).run()


def train_rmnerf(scene: ScenePackage, audit: bool = False, **kwargs) -> JointResult:
    return JointTrainer(scene, 'rmnerf', **kwargs).run(audit)


def train_rmnerf_nopose(scene: ScenePackage, audit: bool = False, **kwargs) -> JointResult:
    return JointTrainer(scene, 'nopose', **kwargs).run(audit)


def train_rmnerf_e2e(scene: ScenePackage, audit: bool = False, **kwargs) -> JointResult:
    return JointTrainer(scene, 'e2e', **kwargs).run(audit)


# ------------------------------------------------------------------------------
# evaluation
class EvalRow(NamedTuple):
    frame_id: str
    psnr:     float
    ssim:     float


eval_columns = list(EvalRow._fields)


@dataclass
class EvalRecord:
    rows:    List[EvalRow]
    psnr:    float
    ssim:    float
    poses:   Dict[str, float] = field(default_factory=dict)

    def summary(self) -> Dict[str, float]:
        return {'psnr': self.psnr, 'ssim': self.ssim, **self.poses}


def run_eval(scene: ScenePackage, radiance: RadianceField, poses: Sequence[RigidTransform],
             indices: Optional[Sequence[int]] = None, intrinsics: Optional[CameraIntrinsics] = None,
             reference: Optional[Sequence[RigidTransform]] = None) -> EvalRecord:
    """ Render `indices` (the test split by default) at `poses` and score them

    `intrinsics` overrides the scale-1 camera of every frame. With
    `reference`, pose errors of `poses` are reported after similarity alignment.
    """
    indices = scene.indices('test', scale=None) if indices is None else list(indices)
    if not indices:
        raise ValueError(f'Scene {scene.name} has no frames to evaluate')
    if len(poses) != len(indices):
        raise ValueError(f'{len(poses)} poses for {len(indices)} frames')
    encoding = encoding_at(radiance.cfg, 0 if radiance.cfg.anneal_steps <= 0 else radiance.cfg.anneal_steps)
    rows = []
    for k, pose in zip(indices, poses):
        f = scene.frames[k]
        K = f.intrinsics if intrinsics is None else intrinsics.scaled(f.scale)
        color, _ = render_image(radiance, pose, K, f.height, f.width, scene.near, scene.far, encoding)
        rows.append(EvalRow(f.frame_id, psnr(color, f.image), ssim(color, f.image)))

    record = EvalRecord(rows, float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])))
    if reference is not None and len(reference) >= 3:
        aligned = align_pose_sets(poses, reference)
        record.poses = {'rotation_deg':      float(aligned.rotation_errors.mean()),
                        'rotation_median':   float(np.median(aligned.rotation_errors)),
                        'translation_error': float(aligned.translation_errors.mean())}
    return record


def map_into_estimate(reference_poses: Sequence[RigidTransform], estimates: Sequence[RigidTransform],
                      anchors: Sequence[RigidTransform]) -> List[RigidTransform]:
    """ Carry reference-frame poses into the frame of `estimates`

    The similarity is fitted between `estimates` and their reference
    counterparts `anchors`.
    """
    fit = align_pose_sets(estimates, anchors)
    Q, s, tau = fit.rotation, fit.scale, fit.translation
    out = []
    for p in reference_poses:
        R = p.R @ Q
        c = Q.T @ (p.center - tau) / s
        out.append(RigidTransform.from_matrix(R, -R @ c))
    return out


def evaluate_result(scene: ScenePackage, result: JointResult, split: str = 'test') -> EvalRecord:
    """ Score a joint run on train views (at the refined poses) or on held-out views """
    views = scene.train_views()
    if split == 'train':
        lookup  = dict(zip(views, result.poses))
        indices = scene.indices('train', scale=None)
        poses   = [lookup[scene.frames[k].view] for k in indices]
    else:
        indices = scene.indices('test', scale=None)
        if scene.ground_truth is None:
            raise ValueError('Held-out evaluation needs reference poses')
        anchors = [scene.ground_truth[scene.view_frame(v)] for v in views]
        poses   = map_into_estimate([scene.ground_truth[k] for k in indices], result.poses, anchors)
    reference = None
    if split == 'train' and scene.ground_truth is not None:
        reference = [scene.ground_truth[k] for k in indices]
    intrinsics = result.intrinsics if result.variant == 'e2e' else None
    return run_eval(scene, result.radiance, poses, indices, intrinsics, reference)
