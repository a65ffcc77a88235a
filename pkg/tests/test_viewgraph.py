"""Unit tests for view graphs, synthetic corpora, cycle cleaning and bootstrapping."""

import itertools

import numpy as np
import pytest

from posefield.core.geom import axis_angle_to_quat, quat_mul, random_quaternions
from posefield.core.viewgraph import (
    SyntheticGraphSpec,
    ViewGraph,
    align_rotations,
    clean_cycles,
    edge_discrepancy,
    ensure_connected,
    generate_corpus,
    generate_synthetic,
    mst_bootstrap,
    relatives_from_absolutes,
    rotation_errors_deg,
    spanning_tree_edges,
    triangles,
)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@pytest.fixture
def truth(rng):
    return random_quaternions(6, rng)


@pytest.fixture
def complete(truth):
    """Noise-free complete graph on six nodes."""
    edges = np.array(list(itertools.combinations(range(6), 2)))
    return ViewGraph(6, edges, relatives_from_absolutes(truth, edges))


@pytest.fixture
def clean_spec():
    return SyntheticGraphSpec(node_count=(8, 12), edge_density=0.5, noise_sigma_deg=(0.0, 0.0),
                              outlier_fraction=0.0, seed=11)


# ---------------------------------------------------------------------------
# ViewGraph
# ---------------------------------------------------------------------------

class TestViewGraph:

    def test_rejects_self_edges(self):
        with pytest.raises(ValueError):
            ViewGraph(3, [[1, 1]], [IDENTITY])

    def test_rejects_duplicate_edges(self):
        with pytest.raises(ValueError):
            ViewGraph(3, [[0, 1], [0, 1]], [IDENTITY, IDENTITY])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ViewGraph(2, [[0, 2]], [IDENTITY])

    def test_rejects_count_mismatch(self):
        with pytest.raises(ValueError):
            ViewGraph(3, [[0, 1], [1, 2]], [IDENTITY])

    def test_rejects_estimate_count(self):
        with pytest.raises(ValueError):
            ViewGraph(3, [[0, 1]], [IDENTITY], estimates=np.tile(IDENTITY, (2, 1)))

    def test_relatives_are_canonical(self):
        g = ViewGraph(2, [[0, 1]], [[-2.0, 0.0, 0.0, 0.0]])
        assert np.allclose(g.relatives, [IDENTITY])

    def test_degrees_and_components(self):
        g = ViewGraph(5, [[0, 1], [1, 2], [3, 4]], np.tile(IDENTITY, (3, 1)))
        assert g.degrees().tolist() == [1, 2, 1, 1, 1]
        assert sorted(map(sorted, g.components())) == [[0, 1, 2], [3, 4]]
        assert not g.is_connected()
        with pytest.raises(ValueError):
            ensure_connected(g)

    def test_oriented_relative(self, complete, truth):
        """Reading an edge backwards gives the inverse rotation."""
        expected = quat_mul(truth[0], [truth[3][0], *(-truth[3][1:])])
        got = complete.oriented_relative(3, 0)
        assert min(np.linalg.norm(got - expected), np.linalg.norm(got + expected)) < 1e-9

    def test_keep_edges_drops_flags(self, complete):
        g = ViewGraph(6, complete.edges, complete.relatives, flagged=frozenset({(0, 1), (0, 2)}))
        mask = np.ones(g.n_edges, dtype=bool)
        mask[0] = False
        assert g.keep_edges(mask).flagged == frozenset({(0, 2)})


class TestRelativeRotations:

    def test_discrepancy_is_identity_for_consistent_edges(self, complete, truth):
        e = edge_discrepancy(complete, truth)
        assert np.allclose(e, IDENTITY)

    def test_discrepancy_needs_estimates(self, complete):
        with pytest.raises(ValueError):
            edge_discrepancy(complete)

    def test_alignment_removes_gauge(self, truth):
        """Estimates differing by a global right factor are aligned exactly."""
        gauge = axis_angle_to_quat([0.4, -1.0, 0.2])
        errors = rotation_errors_deg(quat_mul(truth, gauge), truth)
        assert np.max(errors) < 1e-3

    def test_unaligned_errors_see_gauge(self, truth):
        gauge = axis_angle_to_quat([0.0, 0.0, np.radians(10.0)])
        errors = rotation_errors_deg(quat_mul(truth, gauge), truth, align=False)
        assert np.allclose(errors, 10.0)

    def test_align_returns_gauge(self, truth):
        gauge = axis_angle_to_quat([0.1, 0.2, 0.3])
        _, g = align_rotations(quat_mul(truth, gauge), truth)
        back = quat_mul(gauge, g)
        assert min(np.linalg.norm(back - IDENTITY), np.linalg.norm(back + IDENTITY)) < 1e-9

    def test_robust_gauge_ignores_corrupted_references(self, rng):
        truth = random_quaternions(20, rng)
        gauge = axis_angle_to_quat([0.2, -0.1, 0.3])
        reference = truth.copy()
        reference[:4] = quat_mul(axis_angle_to_quat(rng.normal(scale=0.5, size=(4, 3))), truth[:4])
        plain, _ = align_rotations(quat_mul(truth, gauge), reference)
        robust, _ = align_rotations(quat_mul(truth, gauge), reference, robust=True)
        assert np.max(rotation_errors_deg(robust, truth, align=False)) < 1e-4
        assert np.max(rotation_errors_deg(plain, truth, align=False)) > 0.1


# ---------------------------------------------------------------------------
# Synthetic graphs
# ---------------------------------------------------------------------------

class TestSynthetic:

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticGraphSpec(node_count=(1, 4))
        with pytest.raises(ValueError):
            SyntheticGraphSpec(edge_density=0.0)
        with pytest.raises(ValueError):
            SyntheticGraphSpec(outlier_fraction=1.0)
        with pytest.raises(ValueError):
            SyntheticGraphSpec(noise_sigma_deg=(10.0, 5.0))

    def test_too_sparse(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticGraphSpec(node_count=(20, 20), edge_density=0.01))

    def test_shape_and_connectivity(self, clean_spec):
        sample = generate_synthetic(clean_spec)
        n = sample.graph.n_nodes
        assert 8 <= n <= 12
        assert sample.graph.n_edges == int(round(0.5 * n * (n - 1) / 2))
        assert sample.graph.is_connected()
        assert not sample.outliers.any()

    def test_noise_free_relatives_are_exact(self, clean_spec):
        sample = generate_synthetic(clean_spec)
        assert np.allclose(edge_discrepancy(sample.graph, sample.ground_truth), IDENTITY, atol=1e-9)

    def test_same_seed_same_graph(self, clean_spec):
        a, b = generate_synthetic(clean_spec), generate_synthetic(clean_spec)
        assert np.array_equal(a.graph.edges, b.graph.edges)
        assert np.array_equal(a.graph.relatives, b.graph.relatives)

    def test_outliers_marked(self):
        sample = generate_synthetic(SyntheticGraphSpec(node_count=(20, 20), edge_density=0.5,
                                                       noise_sigma_deg=(0.0, 0.0), outlier_fraction=0.5, seed=3))
        residual = np.degrees(2.0 * np.arccos(np.clip(np.abs(
            edge_discrepancy(sample.graph, sample.ground_truth)[:, 0]), 0.0, 1.0)))
        assert sample.outliers.any()
        assert np.all(residual[~sample.outliers] < 1e-3)
        assert np.mean(residual[sample.outliers] > 1.0) > 0.9

    def test_corpus_is_reproducible(self, clean_spec):
        a = generate_corpus(4, 99, clean_spec)
        b = generate_corpus(4, 99, clean_spec)
        assert [e.manifest_record() for e in a] == [e.manifest_record() for e in b]
        assert [e.graph_id for e in a] == [0, 1, 2, 3]

    def test_corpus_fractions_bounded(self):
        base = SyntheticGraphSpec(node_count=(6, 8), edge_density=0.6, outlier_fraction=0.3)
        for entry in generate_corpus(5, 1, base):
            assert 0.0 <= entry.spec.outlier_fraction <= 0.3
            assert set(entry.manifest_record()) == {'graph_id', 'seed', 'outlier_fraction', 'n', 'm', 'sigma_deg'}


# ---------------------------------------------------------------------------
# Cleaning and bootstrapping
# ---------------------------------------------------------------------------

class TestCycles:

    def test_complete_graph_triangles(self, complete):
        tri, residual = triangles(complete)
        assert len(tri) == 20
        assert np.allclose(residual, 0.0, atol=1e-3)

    def test_corrupted_edge_removed(self, complete):
        relatives = complete.relatives.copy()
        relatives[4] = quat_mul(axis_angle_to_quat([0.0, np.pi / 2, 0.0]), relatives[4])
        corrupted = ViewGraph(6, complete.edges, relatives)
        cleaned = clean_cycles(corrupted, 15.0)
        assert cleaned.n_edges == complete.n_edges - 1
        kept = {tuple(e) for e in cleaned.edges.tolist()}
        assert tuple(complete.edges[4].tolist()) not in kept

    def test_consistent_graph_untouched(self, complete):
        assert clean_cycles(complete).n_edges == complete.n_edges

    def test_tree_left_unchanged(self, truth):
        edges = np.array([[0, 1], [1, 2], [2, 3]])
        g = ViewGraph(4, edges, relatives_from_absolutes(truth[:4], edges))
        assert clean_cycles(g) is g


class TestBootstrap:

    def test_spanning_tree_size(self, complete):
        tree = spanning_tree_edges(complete)
        assert len(tree) == complete.n_nodes - 1
        assert complete.keep_edges(np.isin(np.arange(complete.n_edges), tree)).is_connected()

    def test_noise_free_bootstrap_is_exact(self, clean_spec):
        sample = generate_synthetic(clean_spec)
        est = mst_bootstrap(sample.graph)
        assert np.max(rotation_errors_deg(est, sample.ground_truth)) < 1e-3

    @pytest.mark.slow
    def test_noise_free_recovery_across_corpus(self):
        base = SyntheticGraphSpec(node_count=(10, 40), edge_density=0.3, noise_sigma_deg=(0.0, 0.0),
                                  outlier_fraction=0.0)
        for entry in generate_corpus(100, 5, base):
            g = entry.sample.graph
            cleaned = clean_cycles(g)
            assert cleaned.n_edges == g.n_edges
            errors = np.radians(rotation_errors_deg(mst_bootstrap(cleaned), entry.sample.ground_truth))
            assert np.max(errors) <= 1e-6, entry.graph_id

    def test_root_is_identity(self):
        """The highest-degree node anchors the chain."""
        edges = np.array([[0, 1], [1, 2], [1, 3]])
        g = ViewGraph(4, edges, random_quaternions(3, 5))
        assert np.allclose(mst_bootstrap(g)[1], IDENTITY)

    def test_disconnected_rejected(self):
        g = ViewGraph(4, [[0, 1], [2, 3]], np.tile(IDENTITY, (2, 1)))
        with pytest.raises(ValueError):
            mst_bootstrap(g)
