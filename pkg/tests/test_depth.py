"""Unit tests for depth alignment, point clouds and chamfer pose descent."""

import numpy as np
import pytest

from posefield.core import diff
from posefield.core.depth import (
    DepthConfig,
    DepthMap,
    PointCloud,
    align_pair_multistart,
    assign_neighbors,
    chain_poses,
    chamfer,
    chamfer_frozen,
    depth_to_cloud,
    descend,
    fit_depth_alignment,
    loss_depth,
    nearest,
    pairs_chamfer,
    pairs_objective,
    relative_cloud,
    select_pairs,
    transform_depth,
    update_pose_chamfer,
)
from posefield.core.geom import CameraIntrinsics, RigidTransform, UnitQuaternion, exp_so3, geodesic_angle


@pytest.fixture
def depth_map():
    values = np.array([[1.0, 2.0], [0.0, 4.0]])
    return DepthMap(values, alpha=2.0, beta=0.5, frame_id='f0')


@pytest.fixture
def cloud(rng):
    return rng.uniform(-1.0, 1.0, size=(150, 3)) * [1.0, 0.6, 0.3]


@pytest.fixture
def motion():
    return RigidTransform.from_matrix(exp_so3(np.array([0.05, -0.08, 0.1])), np.array([0.04, -0.02, 0.03]))


# ---------------------------------------------------------------------------
# Depth maps
# ---------------------------------------------------------------------------

class TestDepthMap:

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DepthConfig(max_points=0)
        with pytest.raises(ValueError):
            DepthConfig(step=0.0)

    def test_must_be_2d(self):
        with pytest.raises(ValueError):
            DepthMap(np.ones(4))

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            DepthMap(np.ones((2, 2)), alpha=0.0)

    def test_invalid_pixels_masked(self, depth_map):
        assert depth_map.mask.tolist() == [[True, True], [False, True]]
        assert depth_map.values[1, 0] == 0.0

    def test_non_finite_masked(self):
        d = DepthMap(np.array([[np.nan, 1.0]]))
        assert d.mask.tolist() == [[False, True]]
        assert np.all(np.isfinite(d.values))

    def test_transformed(self, depth_map):
        assert depth_map.alpha == pytest.approx(2.0)
        assert np.allclose(depth_map.transformed(), [[2.5, 4.5], [0.5, 8.5]])
        assert np.allclose(transform_depth(depth_map, np.array([1, 3])).numpy(), [4.5, 8.5])

    def test_parameters_named_by_frame(self, depth_map):
        assert {p.name for p in depth_map.get_parameters()} == {'f0.log_alpha', 'f0.beta'}


class TestDepthLoss:

    def test_zero_at_alignment(self, depth_map):
        assert loss_depth(depth_map, depth_map.transformed()).item() == pytest.approx(0.0)

    def test_invalid_pixels_ignored(self, depth_map):
        rendered = depth_map.transformed()
        rendered[1, 0] = 100.0
        assert loss_depth(depth_map, rendered).item() == pytest.approx(0.0)

    def test_norm_of_gap(self, depth_map):
        rendered = depth_map.transformed() + 1.0
        assert loss_depth(depth_map, rendered).item() == pytest.approx(np.sqrt(3.0))

    def test_indexed(self, depth_map):
        loss = loss_depth(depth_map, np.array([4.5, 0.0]), index=np.array([1, 2]))
        assert loss.item() == pytest.approx(0.0)

    def test_no_valid_pixels(self, depth_map):
        with pytest.raises(ValueError):
            loss_depth(depth_map, np.zeros(1), index=np.array([2]))

    def test_shape_mismatch(self, depth_map):
        with pytest.raises(ValueError):
            loss_depth(depth_map, np.zeros((3, 3)))

    def test_gradients_reach_alignment(self, depth_map):
        rendered = depth_map.transformed() + np.array([[0.3, -0.2], [0.0, 0.7]])
        params = list(depth_map.get_parameters())
        err = diff.gradcheck(lambda: loss_depth(depth_map, rendered), params, rng=np.random.default_rng(0))
        assert err < 1e-4

    def test_closed_form_alignment(self, rng):
        depth = rng.uniform(1.0, 3.0, size=(6, 6))
        alpha, beta = fit_depth_alignment(depth, 1.7 * depth - 0.4)
        assert alpha == pytest.approx(1.7)
        assert beta == pytest.approx(-0.4)

    def test_closed_form_needs_two_pixels(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(ValueError):
            fit_depth_alignment(np.ones((2, 2)), np.ones((2, 2)), mask)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

class TestPointCloud:

    @pytest.fixture
    def K(self):
        return CameraIntrinsics(fx=2.0, fy=2.0, cx=1.0, cy=1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.inf, 1.0]]))

    def test_rejects_unknown_frame(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((1, 3)), frame='image')

    def test_lift_uses_pixel_centers(self, K):
        c = depth_to_cloud(np.full((2, 2), 3.0), K)
        assert c.frame == 'camera'
        assert len(c) == 4
        assert np.allclose(c.points[0], [-0.75, -0.75, 3.0])
        assert np.allclose(c.points[:, 2], 3.0)

    def test_mask_and_invalid_depth(self, K):
        depth = np.array([[1.0, 0.0], [2.0, 2.0]])
        mask = np.array([[True, True], [False, True]])
        assert len(depth_to_cloud(depth, K, mask)) == 2

    def test_world_frame(self, K, motion):
        depth = np.full((2, 2), 3.0)
        world = depth_to_cloud(depth, K, pose=motion)
        assert world.frame == 'world'
        assert np.allclose(motion.apply(world.points), depth_to_cloud(depth, K).points)

    def test_subsampled(self, K):
        c = depth_to_cloud(np.ones((10, 10)), K, max_points=7, rng=np.random.default_rng(0))
        assert len(c) == 7

    def test_empty(self, K):
        with pytest.raises(ValueError):
            depth_to_cloud(np.zeros((2, 2)), K)


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

class TestChamfer:

    def test_known_value(self):
        assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == pytest.approx(2.0)

    def test_identical_and_symmetric(self, cloud, rng):
        other = cloud + rng.normal(scale=0.05, size=cloud.shape)
        assert chamfer(cloud, cloud) == 0.0
        assert chamfer(cloud, other) == pytest.approx(chamfer(other, cloud))

    def test_accepts_point_clouds(self, cloud):
        assert chamfer(PointCloud(cloud), PointCloud(cloud + 0.1)) == pytest.approx(chamfer(cloud, cloud + 0.1))

    def test_empty(self, cloud):
        with pytest.raises(ValueError):
            chamfer(cloud, np.zeros((0, 3)))

    def test_frozen_matches_at_assignment(self, cloud, rng):
        other = cloud[:100] + rng.normal(scale=0.05, size=(100, 3))
        nn_ab, nn_ba = nearest(cloud, other)
        assert chamfer_frozen(diff.Tensor(cloud), other, nn_ab, nn_ba).item() == pytest.approx(chamfer(cloud, other))


# ---------------------------------------------------------------------------
# Pose descent
# ---------------------------------------------------------------------------

class TestPoseDescent:

    def test_relative_cloud(self, cloud, motion):
        first = RigidTransform(UnitQuaternion.from_axis_angle([0.2, 0.0, -0.1]), (0.1, 0.2, 0.3))
        points = first.apply(cloud)
        moved = relative_cloud(points, first.R, first.t, motion.R, motion.t).numpy()
        assert np.allclose(moved, motion.apply(cloud))

    def test_select_pairs_adjacent(self):
        assert select_pairs(4, 0) == [(0, 1), (1, 2), (2, 3)]
        assert select_pairs(2, 3) == [(0, 1)]

    def test_select_pairs_random(self):
        pairs = select_pairs(6, 2, np.random.default_rng(0))
        assert {(k, k + 1) for k in range(5)} <= set(pairs)
        assert len(pairs) > 5
        assert all(i < j for i, j in pairs)

    def test_objective_gradients(self, cloud, motion):
        poses = [RigidTransform.identity(), motion]
        clouds = [cloud, cloud + 0.02]
        assignment = assign_neighbors(poses, clouds, [(0, 1)])
        increments = diff.Tensor(np.random.default_rng(1).normal(scale=1e-3, size=(2, 6)), requires_grad=True)
        err = diff.gradcheck(lambda: pairs_objective(increments, poses, clouds, [(0, 1)], assignment),
                             [increments], rng=np.random.default_rng(2))
        assert err < 1e-4

    def test_update_does_not_increase(self, cloud, motion):
        poses = [RigidTransform.identity(), RigidTransform.identity()]
        clouds = [cloud, motion.apply(cloud)]
        before = pairs_chamfer(poses, clouds, [(0, 1)])
        update = update_pose_chamfer(poses, clouds, [(0, 1)], 1e-2)
        assert update.loss <= before
        assert update.poses[0] is poses[0]

    def test_update_needs_pairs(self, cloud):
        with pytest.raises(ValueError):
            update_pose_chamfer([RigidTransform()], [cloud], [], 1e-2)

    def test_descend_reduces_chamfer(self, cloud, motion):
        poses = [RigidTransform.identity(), RigidTransform.identity()]
        clouds = [cloud, motion.apply(cloud)]
        before = pairs_chamfer(poses, clouds, [(0, 1)])
        result = descend(poses, clouds, [(0, 1)], steps=30, step=1e-2)
        assert result.loss < 0.5 * before

    def test_multistart_keeps_exact_initial(self, cloud, motion):
        X, value = align_pair_multistart(cloud, motion.apply(cloud), starts=2, steps=3,
                                         rng=np.random.default_rng(0), initial=motion)
        assert value < 1e-12
        assert np.allclose(X.R, motion.R)
        assert np.allclose(X.t, motion.t)

    @pytest.mark.slow
    @pytest.mark.parametrize('seed', [0, 1, 2, 3])
    def test_multistart_recovers_small_motion(self, seed):
        """Clouds lifted from one curved depth map, moved by up to 20 degrees and 0.2 units."""
        u, v = np.meshgrid(np.linspace(-1.0, 1.0, 24), np.linspace(-1.0, 1.0, 24))
        depth = 1.2 + 0.25 * np.sin(2.5 * u) * np.cos(1.5 * v) + 0.15 * u
        source = depth_to_cloud(depth, CameraIntrinsics(10.0, 10.0, 12.0, 12.0)).points
        rng = np.random.default_rng(seed)
        axis = rng.normal(size=3)
        angle = np.radians(rng.uniform(5.0, 20.0))
        shift = rng.normal(size=3)
        truth = RigidTransform.from_matrix(exp_so3(angle * axis / np.linalg.norm(axis)),
                                           rng.uniform(0.05, 0.2) * shift / np.linalg.norm(shift))
        X, _ = align_pair_multistart(source, truth.apply(source), starts=1, steps=400, step=1e-2, rng=rng)
        assert np.degrees(geodesic_angle(X.R, truth.R)) <= 0.5
        assert np.linalg.norm(X.t - truth.t) <= 0.01

    def test_chain_poses(self, motion):
        second = RigidTransform(UnitQuaternion.from_axis_angle([0.0, 0.3, 0.0]), (1.0, 0.0, 0.0))
        poses = chain_poses([motion, second])
        assert len(poses) == 3
        assert np.allclose(poses[0].R, np.eye(3))
        step = poses[2].compose(poses[1].inverse())
        assert np.allclose(step.R, second.R)
        assert np.allclose(step.t, second.t)
