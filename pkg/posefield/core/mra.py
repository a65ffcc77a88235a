"""
Message-passing network for robust multiple rotation averaging.

Nodes start from bootstrapped absolute rotations, edges carry the
discrepancy between the observed relative rotation and the current
estimates. After T rounds of attention-weighted message passing a linear
head predicts a unit-quaternion correction per node.
"""
import math
import copy
import logging
import numpy as np
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm
from posefield.core import diff
from posefield.core.diff import Tensor
from posefield.core.diff import AutoParams
from posefield.core.diff import Linear
from posefield.core.diff import Adam
from posefield.core.diff import LogLinearSchedule
from posefield.core.geom import quat_mul
from posefield.core.geom import quat_conj
from posefield.core.geom import quat_mul_t
from posefield.core.geom import quat_conj_t
from posefield.core.geom import quat_normalize_t
from posefield.core.geom import dq_distance_t
from posefield.core.viewgraph import ViewGraph
from posefield.core.viewgraph import SyntheticGraph
from posefield.core.viewgraph import CorpusEntry
from posefield.core.viewgraph import clean_cycles
from posefield.core.viewgraph import mst_bootstrap
from posefield.core.viewgraph import align_rotations
from posefield.core.viewgraph import rotation_errors_deg
from posefield.core.viewgraph import spanning_tree_edges
from posefield.core.viewgraph import relatives_from_absolutes
from posefield.io.checkpoint import save_checkpoint

logger = logging.getLogger(__name__)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class MraConfig:
    layers:              int                 = 4
    state_dim:           int                 = 32
    beta:                float               = 0.1
    epochs:              int                 = 250
    lr:                  float               = 5e-5
    lr_end:              float               = 5e-5
    weight_decay:        float               = 1e-4
    edge_dropout:        float               = 0.25
    test_fraction:       float               = 0.2
    clean_threshold_deg: float               = 15.0
    graphs:              int                 = 200
    node_count:          Tuple[int, int]     = (20, 50)
    edge_density:        float               = 0.3
    noise_sigma_deg:     Tuple[float, float] = (5.0, 30.0)
    outlier_fraction:    float               = 0.3

    def __post_init__(self) -> None:
        if self.layers < 1 or self.state_dim < 1:
            raise ValueError(f'Invalid network size: layers={self.layers}, state_dim={self.state_dim}')
        if self.beta < 0:
            raise ValueError(f'beta must be non-negative, got {self.beta}')
        if not 0 <= self.edge_dropout < 1:
            raise ValueError(f'Edge dropout must lie in [0, 1), got {self.edge_dropout}')
        if not 0 < self.test_fraction < 1:
            raise ValueError(f'Test fraction must lie in (0, 1), got {self.test_fraction}')


@dataclass(frozen=True)
class MraLossConfig:
    beta: float = 0.1

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f'beta must be non-negative, got {self.beta}')


# ------------------------------------------------------------------------------
class MpnnParams(AutoParams):
    """ Weights of the rotation-averaging network

    embed:   bootstrap quaternion -> initial state
    message: [h_dst, h_src, e] -> message (one per round)
    score:   message -> attention logit (one per round)
    update:  [h, aggregated message] -> state (one per round)
    head:    state -> quaternion correction, zero at initialisation
    """
    def __init__(self, layers: int = 4, state_dim: int = 32, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        D   = state_dim
        self.layers    = layers
        self.state_dim = state_dim
        self.embed     = Linear(4, D, rng)
        self.message   = [Linear(2 * D + 4, D, rng) for _ in range(layers)]
        self.score     = [Linear(D, 1, rng, gain=1.0) for _ in range(layers)]
        self.update    = [Linear(2 * D, D, rng) for _ in range(layers)]
        self.head      = Linear(D, 4, rng)
        self.head.weight.data[:] = 0.0

    @classmethod
    def from_config(cls, cfg: MraConfig, rng: Optional[np.random.Generator] = None) -> 'MpnnParams':
        return cls(cfg.layers, cfg.state_dim, rng)

    def __call__(self, g: ViewGraph) -> Tensor:
        return predict_rotations(self, g)


def directed_inputs(g: ViewGraph) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ Both directions of every edge: sources, destinations and discrepancy features """
    q = g.estimates
    i, j = g.edges[:, 0], g.edges[:, 1]
    fwd  = quat_mul(quat_mul(g.relatives, q[i]), quat_conj(q[j]))
    bwd  = quat_mul(quat_mul(quat_conj(g.relatives), q[j]), quat_conj(q[i]))
    feat = np.concatenate([fwd, bwd])
    feat = feat * np.where(feat[:, :1] < 0, -1.0, 1.0)
    return np.concatenate([i, j]), np.concatenate([j, i]), feat


def segment_softmax(scores: Tensor, segment: np.ndarray, n: int) -> Tensor:
    """ Softmax of `scores` (k, 1) within each group of equal `segment` id """
    top = np.full(n, -np.inf)
    np.maximum.at(top, segment, scores.data[:, 0])
    ex  = diff.exp(scores - top[segment][:, None])
    return ex / diff.scatter_add(ex, segment, n)[segment]


def message_pass(params: MpnnParams, g: ViewGraph) -> Tensor:
    if g.estimates is None:
        raise ValueError('Message passing needs bootstrap estimates on the graph')
    isolated = np.flatnonzero(g.degrees() == 0)
    if len(isolated):
        raise ValueError(f'Isolated nodes in view graph: {isolated.tolist()}')

    n = g.n_nodes
    src, dst, feat = directed_inputs(g)
    h = diff.relu(params.embed(g.estimates))
    for message, score, update in zip(params.message, params.score, params.update):
        msg   = diff.relu(message(diff.concat([h[dst], h[src], feat], axis=1)))
        alpha = segment_softmax(score(msg), dst, n)
        agg   = diff.scatter_add(alpha * msg, dst, n)
        h     = diff.relu(update(diff.concat([h, agg], axis=1)))
    return h


def predict_rotations(params: MpnnParams, g: ViewGraph) -> Tensor:
    """ Refined absolute rotations q_f = delta * q_bootstrap, unit norm """
    h     = message_pass(params, g)
    delta = quat_normalize_t(params.head(h) + IDENTITY)
    return quat_normalize_t(quat_mul_t(delta, g.estimates))


def loss_mra(predictions: Tensor, g: ViewGraph, gt: Optional[np.ndarray] = None,
             cfg: MraLossConfig = MraLossConfig()) -> Tensor:
    """ sum_edges d(q_j q_i^-1, target_ij) + beta sum_nodes d(q_j, target_j)

    With ground truth, edge targets are its relatives and node targets are
    the ground truth carried into the bootstrap gauge. Without it, the
    observed relatives and the bootstrap itself are the targets.
    """
    if gt is not None:
        edge_target = relatives_from_absolutes(gt, g.edges)
        node_target = align_rotations(gt, g.estimates)[0] if g.estimates is not None else np.asarray(gt)
    else:
        if g.estimates is None:
            raise ValueError('Without ground truth the node term needs bootstrap estimates')
        edge_target = g.relatives
        node_target = g.estimates
    i, j = g.edges[:, 0], g.edges[:, 1]
    pred_rel = quat_mul_t(predictions[j], quat_conj_t(predictions[i]))
    edge_term = diff.tsum(dq_distance_t(pred_rel, edge_target))
    node_term = diff.tsum(dq_distance_t(predictions, node_target))
    return edge_term + cfg.beta * node_term


# ------------------------------------------------------------------------------
def drop_edges(g: ViewGraph, fraction: float, rng: np.random.Generator) -> ViewGraph:
    """ Drop non-tree edges so that about `fraction` of all edges go, keeping a spanning tree """
    if fraction <= 0:
        return g
    tree    = spanning_tree_edges(g)
    spare   = np.setdiff1d(np.arange(g.n_edges), tree)
    if len(spare) == 0:
        return g
    p_spare = min(1.0, fraction * g.n_edges / len(spare))
    keep    = np.ones(g.n_edges, dtype=bool)
    keep[spare[rng.random(len(spare)) < p_spare]] = False
    return g.keep_edges(keep)


class PreparedGraph(NamedTuple):
    graph_id: int
    graph:    ViewGraph      # cleaned, with bootstrap estimates
    gt:       Optional[np.ndarray]


def prepare_graph(graph_id: int, sample: SyntheticGraph, threshold_deg: float) -> PreparedGraph:
    cleaned = clean_cycles(sample.graph, threshold_deg)
    return PreparedGraph(graph_id, cleaned.with_estimates(mst_bootstrap(cleaned)), sample.ground_truth)


def split_corpus(count: int, test_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """ Unstratified random test/train split """
    order  = rng.permutation(count)
    n_test = max(1, int(round(test_fraction * count)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ------------------------------------------------------------------------------
class GraphMetrics(NamedTuple):
    graph_id:        int
    mean_deg_before: float
    mean_deg_after:  float
    rms_before:      float
    rms_after:       float


metrics_columns = list(GraphMetrics._fields)


@dataclass
class Evaluation:
    rows:              List[GraphMetrics]
    mean_deg:          float
    median_deg:        float
    rms_deg:           float
    mean_deg_before:   float
    median_deg_before: float
    improved_fraction: float

    def summary(self) -> Dict[str, float]:
        return {
            'mean_deg':          self.mean_deg,
            'median_deg':        self.median_deg,
            'rms_deg':           self.rms_deg,
            'mean_deg_before':   self.mean_deg_before,
            'median_deg_before': self.median_deg_before,
            'improved_fraction': self.improved_fraction,
        }


def refine(params: MpnnParams, g: ViewGraph) -> np.ndarray:
    return predict_rotations(params, g).numpy()


def evaluate(params: MpnnParams, graphs: Sequence[PreparedGraph]) -> Evaluation:
    """ Angular errors of bootstrap and refined rotations after gauge alignment """
    rows, before, after = [], [], []
    for item in graphs:
        if item.gt is None:
            raise ValueError(f'Graph {item.graph_id} has no ground truth')
        err_before = rotation_errors_deg(item.graph.estimates, item.gt)
        err_after  = rotation_errors_deg(refine(params, item.graph), item.gt)
        before.append(err_before)
        after.append(err_after)
        rows.append(GraphMetrics(item.graph_id,
                                 float(err_before.mean()), float(err_after.mean()),
                                 float(np.sqrt(np.mean(err_before ** 2))), float(np.sqrt(np.mean(err_after ** 2)))))
    if not rows:
        raise ValueError('Nothing to evaluate')
    all_before = np.concatenate(before)
    all_after  = np.concatenate(after)
    improved   = np.mean([r.mean_deg_after < r.mean_deg_before for r in rows])
    return Evaluation(rows,
                      float(all_after.mean()), float(np.median(all_after)), float(np.sqrt(np.mean(all_after ** 2))),
                      float(all_before.mean()), float(np.median(all_before)), float(improved))


@dataclass
class PretrainResult:
    params:     MpnnParams
    evaluation: Evaluation
    history:    List[float]
    train_ids:  List[int]
    test_ids:   List[int]


def pretrain(corpus: Sequence[CorpusEntry], cfg: MraConfig, seed: int = 0,
             checkpoint_path: Optional[str] = None, verbose: bool = False) -> PretrainResult:
    """ Fit the network on the training share of a synthetic corpus

    A non-finite loss restores the last good parameters, writes them to
    `checkpoint_path` and aborts.
    """
    rng      = np.random.default_rng(seed)
    prepared = [prepare_graph(entry.graph_id, entry.sample, cfg.clean_threshold_deg) for entry in corpus]
    train_ids, test_ids = split_corpus(len(prepared), cfg.test_fraction, rng)

    params    = MpnnParams.from_config(cfg, rng)
    loss_cfg  = MraLossConfig(cfg.beta)
    steps     = cfg.epochs * len(train_ids)
    optimizer = Adam(params.named_parameters(), LogLinearSchedule(cfg.lr, cfg.lr_end, steps), cfg.weight_decay)
    last_good = params.state_dict()
    history   = []

    with logging_redirect_tqdm():
        for epoch in tqdm(range(cfg.epochs), desc='pretrain', disable=not verbose):
            total = 0.0
            for k in rng.permutation(train_ids):
                item    = prepared[k]
                dropped = drop_edges(item.graph, cfg.edge_dropout, rng)
                loss    = loss_mra(predict_rotations(params, dropped), dropped, item.gt, loss_cfg)
                if not math.isfinite(loss.item()):
                    params.load_state_dict(last_good)
                    if checkpoint_path is not None:
                        save_checkpoint(checkpoint_path, last_good)
                    raise RuntimeError(f'Pretraining diverged at epoch {epoch} on graph {item.graph_id}')
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
            last_good = params.state_dict()
            history.append(total / max(len(train_ids), 1))
            logger.info('epoch %d: mean loss %.5f', epoch, history[-1])

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params.state_dict())
    evaluation = evaluate(params, [prepared[k] for k in test_ids])
    logger.info('test MAE %.3f deg, median %.3f deg (bootstrap %.3f deg)',
                evaluation.mean_deg, evaluation.median_deg, evaluation.mean_deg_before)
    return PretrainResult(params, evaluation, history, train_ids.tolist(), test_ids.tolist())


def fit_single_graph(params: MpnnParams, item: PreparedGraph, steps: int, lr: float,
                     cfg: MraLossConfig = MraLossConfig()) -> List[float]:
    """ Optimise the network on one graph; returns the loss per step """
    optimizer = Adam(params.named_parameters(), lr)
    history   = []
    for _ in range(steps):
        loss = loss_mra(predict_rotations(params, item.graph), item.graph, item.gt, cfg)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(loss.item())
    return history


def clone(params: MpnnParams) -> MpnnParams:
    return copy.deepcopy(params)
