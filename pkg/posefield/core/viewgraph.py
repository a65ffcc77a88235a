"""
Directed view graphs of observed relative rotations.

An edge (i, j) carries the observed relative rotation from camera i to camera
j, R_ij = R_j R_i^-1. Absolute rotations are only defined up to a global
right multiplication (the gauge).
"""
import math
import logging
import numpy as np
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Tuple
from scipy.sparse import coo_matrix
from scipy.sparse import csgraph
from posefield.core.geom import quat_mul
from posefield.core.geom import quat_conj
from posefield.core.geom import quat_angle
from posefield.core.geom import quat_distance
from posefield.core.geom import quat_canonical
from posefield.core.geom import quat_normalize
from posefield.core.geom import axis_angle_to_quat
from posefield.core.geom import random_quaternions
from posefield.core.geom import quaternion_average

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ViewGraph:
    n_nodes:   int
    edges:     np.ndarray                   # (m, 2) directed pairs i -> j
    relatives: np.ndarray                   # (m, 4) observed R_ij
    estimates: Optional[np.ndarray] = None  # (n, 4) absolute estimates
    flagged:   FrozenSet[Tuple[int, int]] = frozenset()

    def __post_init__(self) -> None:
        edges     = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        relatives = np.asarray(self.relatives, dtype=np.float64).reshape(-1, 4)
        if len(edges) != len(relatives):
            raise ValueError(f'{len(edges)} edges but {len(relatives)} relative rotations')
        if np.any(edges < 0) or np.any(edges >= self.n_nodes):
            raise ValueError(f'Edge endpoints must lie in [0, {self.n_nodes})')
        loops = edges[edges[:, 0] == edges[:, 1]]
        if len(loops):
            raise ValueError(f'Self-edges are not allowed: nodes {sorted(set(loops[:, 0].tolist()))}')
        if len({(int(i), int(j)) for i, j in edges}) != len(edges):
            raise ValueError('At most one edge per ordered pair is allowed')
        object.__setattr__(self, 'edges', edges)
        object.__setattr__(self, 'relatives', quat_canonical(quat_normalize(relatives)) if len(relatives) else relatives)
        if self.estimates is not None:
            est = np.asarray(self.estimates, dtype=np.float64).reshape(-1, 4)
            if len(est) != self.n_nodes:
                raise ValueError(f'{len(est)} estimates for {self.n_nodes} nodes')
            object.__setattr__(self, 'estimates', quat_canonical(quat_normalize(est)))

    # --------------------------------------------------------------------------
    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_nodes)

    def adjacency(self):
        """ Symmetric sparse adjacency of the undirected graph """
        data = np.ones(self.n_edges)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return coo_matrix((np.concatenate([data, data]), (rows, cols)), shape=(self.n_nodes, self.n_nodes)).tocsr()

    def components(self) -> List[List[int]]:
        n_comp, labels = csgraph.connected_components(self.adjacency(), directed=False)
        return [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]

    def is_connected(self) -> bool:
        return self.n_nodes > 0 and len(self.components()) == 1

    def with_estimates(self, estimates: np.ndarray) -> 'ViewGraph':
        return replace(self, estimates=estimates)

    def keep_edges(self, mask: np.ndarray) -> 'ViewGraph':
        mask = np.asarray(mask, dtype=bool)
        kept = {(int(i), int(j)) for i, j in self.edges[mask]}
        return replace(self, edges=self.edges[mask], relatives=self.relatives[mask],
                       flagged=frozenset(p for p in self.flagged if p in kept))

    def pair_index(self) -> Dict[Tuple[int, int], Tuple[int, bool]]:
        """ Undirected lookup: (a, b) -> (edge index, True if stored as a -> b) """
        index = {}
        for k, (i, j) in enumerate(self.edges):
            index[(int(i), int(j))] = (k, True)
            index[(int(j), int(i))] = (k, False)
        return index

    def oriented_relative(self, a: int, b: int, index: Optional[Dict] = None) -> np.ndarray:
        """ Observed rotation from a to b, whichever way the edge is stored """
        index = index if index is not None else self.pair_index()
        k, forward = index[(a, b)]
        return self.relatives[k] if forward else quat_conj(self.relatives[k])


def ensure_connected(g: ViewGraph) -> None:
    comps = g.components()
    if len(comps) != 1:
        raise ValueError(f'View graph is disconnected: components {comps}')


# ------------------------------------------------------------------------------
# relative rotations
def relatives_from_absolutes(estimates: np.ndarray, edge_list: np.ndarray) -> np.ndarray:
    """ R_ij = R_j R_i^-1 for every edge """
    q     = np.asarray(estimates, dtype=np.float64)
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    return quat_canonical(quat_mul(q[edges[:, 1]], quat_conj(q[edges[:, 0]])))


def edge_discrepancy(g: ViewGraph, estimates: Optional[np.ndarray] = None) -> np.ndarray:
    """ e_uv = R_uv R_u R_v^-1: identity when the edge agrees with the estimates """
    q = g.estimates if estimates is None else np.asarray(estimates, dtype=np.float64)
    if q is None or len(q) != g.n_nodes:
        raise ValueError('Edge discrepancy needs an estimate for every node')
    u, v = g.edges[:, 0], g.edges[:, 1]
    return quat_canonical(quat_mul(quat_mul(g.relatives, q[u]), quat_conj(q[v])))


def align_rotations(estimates: np.ndarray, reference: np.ndarray, robust: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """ Right-multiply `estimates` by the gauge g that best maps them onto `reference`

    With `robust`, g is averaged only over the nodes whose own gauge lies near
    the medoid gauge, so a minority of corrupted references does not tilt it.
    """
    est        = np.asarray(estimates, dtype=np.float64)
    candidates = quat_mul(quat_conj(est), reference)
    if robust and len(candidates) > 2:
        spread     = quat_distance(candidates[:, None, :], candidates[None, :, :])
        medoid     = candidates[np.argmin(spread.sum(axis=1))]
        deviation  = np.degrees(quat_angle(candidates, medoid))
        candidates = candidates[deviation <= max(1.0, 3.0 * float(np.median(deviation)))]
    g = quaternion_average(candidates)
    return quat_canonical(quat_mul(est, g)), g


def rotation_errors_deg(estimates: np.ndarray, reference: np.ndarray, align: bool = True) -> np.ndarray:
    est = align_rotations(estimates, reference)[0] if align else np.asarray(estimates)
    return np.degrees(quat_angle(est, reference))


# ------------------------------------------------------------------------------
# synthetic graphs
@dataclass(frozen=True)
class SyntheticGraphSpec:
    node_count:       Tuple[int, int]     = (20, 50)
    edge_density:     float               = 0.3
    noise_sigma_deg:  Tuple[float, float] = (5.0, 30.0)
    outlier_fraction: float               = 0.3
    seed:             int                 = 0

    def __post_init__(self) -> None:
        lo, hi = self.node_count
        if not 2 <= lo <= hi:
            raise ValueError(f'Invalid node count range {self.node_count}')
        slo, shi = self.noise_sigma_deg
        if not 0 <= slo <= shi:
            raise ValueError(f'Invalid noise range {self.noise_sigma_deg}')
        if not 0 < self.edge_density <= 1:
            raise ValueError(f'Edge density must lie in (0, 1], got {self.edge_density}')
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError(f'Outlier fraction must lie in [0, 1), got {self.outlier_fraction}')


class SyntheticGraph(NamedTuple):
    graph:        ViewGraph
    ground_truth: np.ndarray
    outliers:     np.ndarray
    sigma_deg:    float


def noise_quaternions(m: int, sigma_rad: float, rng: np.random.Generator) -> np.ndarray:
    """ Rotations about a uniform axis by an angle drawn from N(0, sigma) """
    axis  = rng.normal(size=(m, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.normal(0.0, sigma_rad, size=(m, 1)) if sigma_rad > 0 else np.zeros((m, 1))
    return axis_angle_to_quat(axis * angle)


def generate_synthetic(spec: SyntheticGraphSpec) -> SyntheticGraph:
    rng   = np.random.default_rng(spec.seed)
    n     = int(rng.integers(spec.node_count[0], spec.node_count[1] + 1))
    sigma = float(rng.uniform(*spec.noise_sigma_deg))
    gt    = random_quaternions(n, rng)

    n_pairs = n * (n - 1) // 2
    m       = int(round(spec.edge_density * n_pairs))
    if m < n - 1:
        raise ValueError(f'Edge density {spec.edge_density} gives {m} edges, {n - 1} are needed to connect {n} nodes')

    # random spanning tree, then extra pairs up to the density
    perm  = rng.permutation(n)
    pairs = set()
    for k in range(1, n):
        parent = int(perm[rng.integers(k)])
        child  = int(perm[k])
        pairs.add((min(parent, child), max(parent, child)))
    rest  = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in pairs]
    extra = rng.choice(len(rest), size=m - len(pairs), replace=False) if m > len(pairs) else []
    pairs = sorted(pairs) + [rest[k] for k in sorted(extra)]

    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    flip  = rng.random(len(edges)) < 0.5
    edges[flip] = edges[flip][:, ::-1]

    truth    = relatives_from_absolutes(gt, edges)
    observed = quat_mul(noise_quaternions(len(edges), math.radians(sigma), rng), truth)
    outliers = rng.random(len(edges)) < spec.outlier_fraction
    if np.any(outliers):
        observed[outliers] = random_quaternions(int(outliers.sum()), rng)

    graph = ViewGraph(n_nodes=n, edges=edges, relatives=quat_canonical(observed))
    return SyntheticGraph(graph, gt, outliers, sigma)


@dataclass
class CorpusEntry:
    graph_id: int
    spec:     SyntheticGraphSpec
    sample:   SyntheticGraph

    def manifest_record(self) -> Dict:
        return {
            'graph_id':         self.graph_id,
            'seed':             self.spec.seed,
            'outlier_fraction': self.spec.outlier_fraction,
            'n':                self.sample.graph.n_nodes,
            'm':                self.sample.graph.n_edges,
            'sigma_deg':        self.sample.sigma_deg,
        }


def generate_corpus(count: int, master_seed: int, base_spec: SyntheticGraphSpec) -> List[CorpusEntry]:
    """ Per-graph seeds and outlier fractions drawn from one master seed """
    rng    = np.random.default_rng(master_seed)
    corpus = []
    for graph_id in range(count):
        seed     = int(rng.integers(2 ** 31 - 1))
        fraction = float(rng.uniform(0.0, base_spec.outlier_fraction))
        spec     = replace(base_spec, seed=seed, outlier_fraction=fraction)
        corpus.append(CorpusEntry(graph_id, spec, generate_synthetic(spec)))
    return corpus


# ------------------------------------------------------------------------------
# cleaning and bootstrapping
def triangles(g: ViewGraph) -> Tuple[np.ndarray, np.ndarray]:
    """ Edge indices of every 3-cycle and its composed rotation angle (degrees) """
    index     = g.pair_index()
    neighbors = [set() for _ in range(g.n_nodes)]
    for i, j in g.edges:
        neighbors[i].add(int(j))
        neighbors[j].add(int(i))

    tri_edges, residual = [], []
    for a in range(g.n_nodes):
        for b in sorted(x for x in neighbors[a] if x > a):
            for c in sorted(x for x in neighbors[a] & neighbors[b] if x > b):
                loop = quat_mul(quat_mul(g.oriented_relative(c, a, index), g.oriented_relative(b, c, index)),
                                g.oriented_relative(a, b, index))
                tri_edges.append([index[(a, b)][0], index[(b, c)][0], index[(c, a)][0]])
                residual.append(np.degrees(quat_angle(loop, np.array([1.0, 0.0, 0.0, 0.0]))))
    return np.array(tri_edges, dtype=np.int64).reshape(-1, 3), np.array(residual, dtype=np.float64)


def clean_cycles(g: ViewGraph, deviation_threshold_deg: float = 15.0) -> ViewGraph:
    """ Remove edges whose every 3-cycle fails the loop-closure check

    An edge whose removal would disconnect the graph is kept and flagged.
    """
    tri_edges, residual = triangles(g)
    if len(tri_edges) == 0:
        logger.warning('View graph has no 3-cycles: cycle check is vacuous, graph left unchanged')
        return g

    bad     = residual > deviation_threshold_deg
    alive   = np.ones(g.n_edges, dtype=bool)
    flagged = set(g.flagged)
    keep    = set()
    while True:
        live_tri = alive[tri_edges].all(axis=1)
        total    = np.bincount(tri_edges[live_tri].reshape(-1), minlength=g.n_edges)
        n_bad    = np.bincount(tri_edges[live_tri & bad].reshape(-1), minlength=g.n_edges)
        worst    = np.zeros(g.n_edges)
        np.add.at(worst, tri_edges[live_tri & bad].reshape(-1), np.repeat(residual[live_tri & bad], 3))
        candidates = [k for k in np.flatnonzero(alive & (total > 0) & (n_bad == total)) if k not in keep]
        if not candidates:
            break
        k = max(candidates, key=lambda e: (n_bad[e], worst[e], -e))
        alive[k] = False
        if not g.keep_edges(alive).is_connected():
            alive[k] = True
            keep.add(k)
            flagged.add((int(g.edges[k, 0]), int(g.edges[k, 1])))
            logger.debug('Edge %s fails loop closure but is a bridge; kept and flagged', tuple(g.edges[k]))

    removed = int((~alive).sum())
    if removed:
        logger.info('Cycle check removed %d of %d edges (%d flagged)', removed, g.n_edges, len(flagged))
    cleaned = g.keep_edges(alive)
    return replace(cleaned, flagged=frozenset(flagged))


def spanning_tree(g: ViewGraph, root: int) -> Tuple[np.ndarray, np.ndarray]:
    """ Breadth-first order and predecessors from `root` """
    order, pred = csgraph.breadth_first_order(g.adjacency(), root, directed=False, return_predecessors=True)
    return order, pred


def spanning_tree_edges(g: ViewGraph, root: Optional[int] = None) -> np.ndarray:
    root  = int(np.argmax(g.degrees())) if root is None else root
    index = g.pair_index()
    order, pred = spanning_tree(g, root)
    return np.array(sorted(index[(int(pred[c]), int(c))][0] for c in order[1:]), dtype=np.int64)


def mst_bootstrap(g: ViewGraph) -> np.ndarray:
    """ Chain observed relatives from the max-degree node (lowest id on ties) """
    ensure_connected(g)
    root  = int(np.argmax(g.degrees()))
    index = g.pair_index()
    order, pred = spanning_tree(g, root)

    q = np.zeros((g.n_nodes, 4))
    q[root] = [1.0, 0.0, 0.0, 0.0]
    for c in order[1:]:
        p = int(pred[c])
        q[c] = quat_mul(g.oriented_relative(p, int(c), index), q[p])
    return quat_canonical(quat_normalize(q))
