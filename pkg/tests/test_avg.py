"""Unit tests for robust rotation averaging, translation solving and pose-set alignment."""

import numpy as np
import pytest

from posefield.core.avg import (
    RobustLossConfig,
    align_pose_sets,
    averaging_objective,
    irls_rotation_averaging,
    relative_translations,
    solve_translations,
)
from posefield.core.geom import (
    RigidTransform,
    UnitQuaternion,
    exp_so3,
    matrix_to_quat,
    quat_mul,
    quat_to_matrix,
    random_quaternions,
    sample_axis_angle_noise,
)
from posefield.core.viewgraph import SyntheticGraphSpec, ViewGraph, generate_synthetic, rotation_errors_deg


def _perturbed(q, deg, seed):
    noise = matrix_to_quat(sample_axis_angle_noise(np.radians(deg) ** 2, seed, size=len(q)))
    return quat_mul(noise, q)


@pytest.fixture
def clean_sample():
    return generate_synthetic(SyntheticGraphSpec(node_count=(15, 15), edge_density=0.5, noise_sigma_deg=(0.0, 0.0),
                                                 outlier_fraction=0.0, seed=5))


@pytest.fixture
def outlier_sample():
    return generate_synthetic(SyntheticGraphSpec(node_count=(20, 20), edge_density=0.6, noise_sigma_deg=(0.0, 0.0),
                                                 outlier_fraction=0.1, seed=8))


@pytest.fixture
def poses(rng):
    q = random_quaternions(6, rng)
    return [RigidTransform(UnitQuaternion.from_array(v), tuple(rng.normal(size=3))) for v in q]


# ---------------------------------------------------------------------------
# Robust losses
# ---------------------------------------------------------------------------

class TestRobustLoss:

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            RobustLossConfig(kind='cauchy')

    def test_huber_scale_positive(self):
        with pytest.raises(ValueError):
            RobustLossConfig(kind='huber', scale_deg=0.0)

    def test_huber_is_quadratic_then_linear(self):
        cfg = RobustLossConfig(kind='huber', scale_deg=10.0)
        c = np.radians(10.0)
        r = np.array([0.5 * c, 2.0 * c])
        assert np.allclose(cfg.rho(r), [(0.5 * c) ** 2, 3.0 * c ** 2])
        assert np.allclose(cfg.weights(r), [1.0, 0.5])

    def test_weights_are_derivative_over_two_r(self):
        for kind in ('l2', 'huber', 'l1'):
            cfg = RobustLossConfig(kind=kind)
            r, h = np.array([0.05, 0.4]), 1e-7
            slope = (cfg.rho(r + h) - cfg.rho(r - h)) / (2.0 * h)
            assert np.allclose(cfg.weights(r), slope / (2.0 * r), rtol=1e-5)


# ---------------------------------------------------------------------------
# Rotation averaging
# ---------------------------------------------------------------------------

class TestRotationAveraging:

    def test_noise_free_recovery(self, clean_sample):
        init = _perturbed(clean_sample.ground_truth, 10.0, 1)
        result = irls_rotation_averaging(clean_sample.graph, init, RobustLossConfig('l2'))
        assert result.converged
        assert np.max(rotation_errors_deg(result.rotations, clean_sample.ground_truth)) < 1e-2

    def test_root_is_fixed(self, clean_sample):
        init = _perturbed(clean_sample.ground_truth, 5.0, 2)
        result = irls_rotation_averaging(clean_sample.graph, init, root=3)
        assert np.allclose(result.rotations[3], init[3])

    def test_objective_does_not_increase(self, outlier_sample):
        cfg = RobustLossConfig('huber')
        init = _perturbed(outlier_sample.ground_truth, 5.0, 3)
        result = irls_rotation_averaging(outlier_sample.graph, init, cfg)
        assert result.objective <= averaging_objective(outlier_sample.graph, init, cfg)

    def test_consistent_init_returns_immediately(self, clean_sample):
        result = irls_rotation_averaging(clean_sample.graph, clean_sample.ground_truth)
        assert result.iterations <= 1
        assert result.converged

    def test_l1_rejects_outliers(self, outlier_sample):
        """Smoothed L1 recovers the truth to within a degree under gross outliers."""
        init = _perturbed(outlier_sample.ground_truth, 5.0, 4)
        result = irls_rotation_averaging(outlier_sample.graph, init, RobustLossConfig('l1'))
        assert np.median(rotation_errors_deg(result.rotations, outlier_sample.ground_truth)) < 1.0

    def test_huber_beats_l2_under_outliers(self, outlier_sample):
        init = _perturbed(outlier_sample.ground_truth, 5.0, 4)
        gt = outlier_sample.ground_truth
        l2 = irls_rotation_averaging(outlier_sample.graph, init, RobustLossConfig('l2'))
        huber = irls_rotation_averaging(outlier_sample.graph, init, RobustLossConfig('huber'))
        assert np.mean(rotation_errors_deg(huber.rotations, gt)) < np.mean(rotation_errors_deg(l2.rotations, gt))

    def test_disconnected_graph_rejected(self):
        g = ViewGraph(4, [[0, 1], [2, 3]], np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)))
        with pytest.raises(ValueError):
            irls_rotation_averaging(g, np.tile([1.0, 0.0, 0.0, 0.0], (4, 1)))


# ---------------------------------------------------------------------------
# Translations
# ---------------------------------------------------------------------------

class TestTranslations:

    @pytest.fixture
    def edges(self):
        return np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 2], [1, 4]])

    def test_recovers_centers_up_to_shift(self, poses, edges):
        """The solution fixes the root translation; centers move by one common offset."""
        q = np.stack([p.rotation.as_array() for p in poses])
        t = np.stack([p.t for p in poses])
        result = solve_translations(q, relative_translations(q, t, edges), edges)
        assert np.allclose(result.translations[0], 0.0)
        assert result.residual < 1e-9

        R = quat_to_matrix(q)
        solved = -np.einsum('nji,nj->ni', R, result.translations)
        true = np.stack([p.center for p in poses])
        shift = solved - true
        assert np.allclose(shift, shift[0])

    def test_other_root(self, poses, edges):
        q = np.stack([p.rotation.as_array() for p in poses])
        t = np.stack([p.t for p in poses])
        result = solve_translations(q, relative_translations(q, t, edges), edges, root=4)
        assert np.allclose(result.translations[4], 0.0)

    def test_count_mismatch(self, poses, edges):
        q = np.stack([p.rotation.as_array() for p in poses])
        with pytest.raises(ValueError):
            solve_translations(q, np.zeros((len(edges) - 1, 3)), edges)

    def test_unreachable_nodes(self, poses):
        q = np.stack([p.rotation.as_array() for p in poses])
        edges = np.array([[0, 1], [1, 2], [3, 4], [4, 5]])
        with pytest.raises(ValueError):
            solve_translations(q, np.zeros((4, 3)), edges)


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------

class TestAlignPoseSets:

    def test_recovers_similarity(self, poses):
        Q = exp_so3(np.array([0.3, -0.2, 0.5]))
        tau, s = np.array([1.0, -2.0, 0.5]), 2.5
        est = []
        for p in poses:
            R = p.R @ Q
            c = Q.T @ (p.center - tau) / s
            est.append(RigidTransform.from_matrix(R, -R @ c))
        result = align_pose_sets(est, poses)
        assert result.scale == pytest.approx(s)
        assert np.allclose(result.rotation, Q)
        assert np.max(result.rotation_errors) < 1e-3
        assert np.max(result.translation_errors) < 1e-9

    def test_too_few_poses(self, poses):
        with pytest.raises(ValueError):
            align_pose_sets(poses[:2], poses[:2])

    def test_length_mismatch(self, poses):
        with pytest.raises(ValueError):
            align_pose_sets(poses[:4], poses[:3])

    def test_collinear_centers_fix_scale(self):
        line = [RigidTransform(UnitQuaternion(), (-float(k), 0.0, 0.0)) for k in range(4)]
        result = align_pose_sets(line, line)
        assert result.scale == 1.0
        assert np.max(result.translation_errors) < 1e-9
