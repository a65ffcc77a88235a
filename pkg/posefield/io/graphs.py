"""
View graphs as JSON lines, corpus seed manifests and pose lists.
"""
import os
import json
import logging
import numpy as np
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple
from posefield.core.geom import RigidTransform
from posefield.core.viewgraph import ViewGraph
from posefield.core.viewgraph import CorpusEntry

logger = logging.getLogger(__name__)


class GraphRecord(NamedTuple):
    graph_id:     int
    graph:        ViewGraph
    ground_truth: Optional[np.ndarray] = None
    outliers:     Optional[np.ndarray] = None


def graph_to_json(record: GraphRecord) -> Dict:
    """ {"n", "edges": [[i, j, [w, x, y, z]], ...], "gt"} plus optional id, estimates and outliers """
    g = record.graph
    edges = [[int(i), int(j), q] for (i, j), q in zip(g.edges.tolist(), g.relatives.tolist())]
    obj = {'id': record.graph_id, 'n': g.n_nodes, 'edges': edges}
    if g.estimates is not None:
        obj['estimates'] = g.estimates.tolist()
    if record.ground_truth is not None:
        obj['gt'] = np.asarray(record.ground_truth).tolist()
    if record.outliers is not None:
        obj['outliers'] = np.asarray(record.outliers, dtype=bool).tolist()
    return obj


def _parse_edges(edges: Sequence, graph_id) -> Tuple[np.ndarray, np.ndarray]:
    pairs, relatives = [], []
    for k, edge in enumerate(edges):
        if len(edge) != 3 or len(edge[2]) != 4:
            raise ValueError(f'Graph record {graph_id}: edge {k} is not [i, j, [w, x, y, z]]')
        pairs.append((int(edge[0]), int(edge[1])))
        relatives.append([float(v) for v in edge[2]])
    return (np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
            np.asarray(relatives, dtype=np.float64).reshape(-1, 4))


def graph_from_json(obj: Dict) -> GraphRecord:
    graph_id = obj.get('id', '?')
    try:
        edges, relatives = _parse_edges(obj['edges'], graph_id)
        graph = ViewGraph(int(obj['n']), edges, relatives, obj.get('estimates'))
    except KeyError as e:
        raise ValueError(f'Graph record {graph_id} is missing {e}') from e
    except TypeError as e:
        raise ValueError(f'Graph record {graph_id}: malformed edges: {e}') from e
    gt       = np.asarray(obj['gt'], dtype=np.float64) if 'gt' in obj else None
    outliers = np.asarray(obj['outliers'], dtype=bool) if 'outliers' in obj else None
    return GraphRecord(int(obj.get('id', 0)), graph, gt, outliers)


def save_graphs(path: str, records: Iterable[GraphRecord]) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(graph_to_json(record), sort_keys=True) + '\n')
            count += 1
    logger.info('Wrote %d view graphs to %s', count, path)
    return count


def load_graphs(path: str) -> List[GraphRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f'View graph file not found: {path}')
    out = []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(graph_from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ValueError(f'{path}:{lineno}: malformed graph record: {e}') from e
    return out


def corpus_records(corpus: Sequence[CorpusEntry]) -> List[GraphRecord]:
    return [GraphRecord(e.graph_id, e.sample.graph, e.sample.ground_truth, e.sample.outliers) for e in corpus]


def save_corpus_manifest(path: str, corpus: Sequence[CorpusEntry], master_seed: int) -> None:
    """ Per-graph seeds and draws, enough to regenerate the corpus """
    doc = {'master_seed': master_seed, 'graphs': [e.manifest_record() for e in corpus]}
    _write_json(path, doc)


# ------------------------------------------------------------------------------
# poses
def save_poses(path: str, poses: Sequence[RigidTransform], ids: Optional[Sequence[str]] = None) -> None:
    ids = [str(k) for k in range(len(poses))] if ids is None else list(ids)
    if len(ids) != len(poses):
        raise ValueError(f'{len(ids)} ids for {len(poses)} poses')
    _write_json(path, {'poses': [{'id': i, **p.to_json()} for i, p in zip(ids, poses)]})


def load_poses(path: str) -> Dict[str, RigidTransform]:
    if not os.path.exists(path):
        raise FileNotFoundError(f'Pose file not found: {path}')
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f'{path}: malformed pose file: {e}') from e
    return {str(p['id']): RigidTransform.from_json(p) for p in doc.get('poses', [])}


def _write_json(path: str, doc: Dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write('\n')
