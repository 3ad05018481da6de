import math

import numpy as np
import pytest

from agentreg import mdp, phantom, projection, se3
from agentreg.mdp import ACTIONS, ActionSpec, action_space, apply_action, reward
from agentreg.phantom import PhantomParams
from agentreg.projection import biplane_geometries, center_pixel, render_drr, world_frame
from agentreg.se3 import RigidTransform, Se3Vector

I4 = RigidTransform.identity()


@pytest.fixture(scope="module")
def scene():
    volume, _ = phantom.generate_phantom(
        PhantomParams(vertebra_count=4, dims=(64, 64, 64), vertebra_size=(24, 9, 18),
                      spacing=(1.25, 1.25, 1.25), seed=4)
    )
    geometry = biplane_geometries(image_dims=(96, 96))[0]
    return volume, geometry


def random_frame(rng, t_scale=40.0):
    return se3.se3_exp(Se3Vector(rng.normal(0, t_scale, 3), np.zeros(3)))


class TestActionSpace:
    def test_twelve_actions(self):
        assert len(action_space()) == 12

    def test_translation_steps_are_one_mm(self):
        for a in action_space()[:6]:
            assert a.step == 1.0

    def test_rotation_steps(self):
        for a in action_space()[6:]:
            assert abs(a.step - math.pi / 180.0) < 1e-12
            assert abs(a.step - 0.0174) < 1e-3

    def test_canonical_ordering(self):
        space = action_space()
        for gi in range(1, 7):
            assert space[2 * (gi - 1)].generator_index == gi
            assert space[2 * (gi - 1)].sign == +1
            assert space[2 * (gi - 1) + 1].sign == -1

    def test_step_class_validated(self):
        with pytest.raises(ValueError):
            ActionSpec(generator_index=1, sign=1, step=0.5)
        with pytest.raises(ValueError):
            ActionSpec(generator_index=5, sign=1, step=1.0)


class TestApplyAction:
    def test_inverse_action_cancels(self):
        rng = np.random.default_rng(0)
        t = se3.se3_exp(Se3Vector(rng.normal(0, 5, 3), rng.normal(0, 0.05, 3)))
        e = random_frame(rng)
        for a in ACTIONS:
            neg = ActionSpec(a.generator_index, -a.sign, a.step)
            back = apply_action(apply_action(t, a, e), neg, e)
            assert np.max(np.abs(back.matrix - t.matrix)) < 1e-12

    def test_identity_frame_translation(self):
        t = se3.se3_exp(Se3Vector([2, 3, 4], [0.1, 0.0, 0.0]))
        t2 = apply_action(t, ACTIONS[0], I4)
        expected = se3.compose(RigidTransform.from_translation([1, 0, 0]), t)
        assert np.max(np.abs(t2.matrix - expected.matrix)) < 1e-12

    def test_rotation_action_pivots_on_agent_origin(self, scene):
        volume, geometry = scene
        # bright voxel at the agent origin projects to the same pixel after an
        # in-plane rotation action taken in that agent's frame
        t = RigidTransform.identity()
        px = center_pixel(geometry) + np.array([5.0, -3.0])
        frame = projection.agent_frame_for_pixel(geometry, volume, t, px)
        f = world_frame(frame, geometry)

        vox = np.zeros((volume.dims[2], volume.dims[1], volume.dims[0]))
        idx = np.round((frame.origin_3d - volume.origin) / volume.spacing).astype(int)
        vox[idx[2], idx[1], idx[0]] = 100.0
        bright = phantom.Volume3D(dims=volume.dims, spacing=volume.spacing,
                                  origin=volume.origin, data=vox)
        voxel_mm = volume.origin + idx * volume.spacing

        rot_action = ACTIONS[10]  # +1 degree about the agent z axis
        t2 = apply_action(t, rot_action, f)
        p_before = projection.project_point(geometry, t.apply(voxel_mm))
        p_after = projection.project_point(geometry, t2.apply(voxel_mm))
        # residual comes only from the voxel grid snap of the agent origin
        assert np.max(np.abs(p_after - p_before)) < 1.0
        img = render_drr(bright, t2, geometry, step_mm=0.5)
        peak = np.unravel_index(np.argmax(img.data), img.data.shape)
        assert abs(peak[1] - p_before[0]) <= 1.0
        assert abs(peak[0] - p_before[1]) <= 1.0


class TestReward:
    def test_rewards_at_optimum(self):
        rng = np.random.default_rng(1)
        t_g = se3.se3_exp(Se3Vector(rng.normal(0, 5, 3), rng.normal(0, 0.05, 3)))
        e = random_frame(rng)
        rewards = mdp.all_rewards(t_g, e, t_g)
        for idx, a in enumerate(ACTIONS):
            expected = -1.0 if a.is_translation else -math.sqrt(2.0)
            assert abs(rewards[idx] - expected) < 1e-9

    def test_exact_cancellation_translation(self):
        e = random_frame(np.random.default_rng(2))
        # one mm behind the ground truth along the agent x axis
        t = se3.compose(
            se3.inverse(e),
            se3.compose(RigidTransform.from_translation([-1.0, 0, 0]), e),
        )
        assert abs(reward(t, ACTIONS[0], e, I4) - 1.0) < 1e-9

    def test_telescoping_antisymmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(250):
            t = se3.se3_exp(Se3Vector(rng.normal(0, 8, 3), rng.normal(0, 0.06, 3)))
            t_g = se3.se3_exp(Se3Vector(rng.normal(0, 8, 3), rng.normal(0, 0.06, 3)))
            e = random_frame(rng)
            a = ACTIONS[rng.integers(0, 12)]
            t2 = apply_action(t, a, e)
            neg = ActionSpec(a.generator_index, -a.sign, a.step)
            assert abs(reward(t, a, e, t_g) + reward(t2, neg, e, t_g)) < 1e-9


class TestGreedyOracle:
    def test_pure_x_offset_picks_positive_x(self):
        e = random_frame(np.random.default_rng(4))
        t = se3.compose(
            se3.inverse(e),
            se3.compose(RigidTransform.from_translation([-5.0, 0, 0]), e),
        )
        a = mdp.greedy_oracle_policy(t, e, I4)
        assert (a.generator_index, a.sign) == (1, 1)

    def test_pure_z_rotation_picks_positive_rz(self):
        e = random_frame(np.random.default_rng(5))
        rot = se3.rotation_about_axis([0, 0, 1], math.radians(-5.0))
        t = se3.compose(se3.inverse(e), se3.compose(rot, e))
        a = mdp.greedy_oracle_policy(t, e, I4)
        assert (a.generator_index, a.sign) == (6, 1)

    def test_at_optimum_max_of_twelve_negatives(self):
        rng = np.random.default_rng(6)
        t_g = se3.se3_exp(Se3Vector(rng.normal(0, 5, 3), rng.normal(0, 0.05, 3)))
        e = random_frame(rng)
        rewards = mdp.all_rewards(t_g, e, t_g)
        best = mdp.greedy_oracle_policy(t_g, e, t_g)
        assert np.all(rewards < 0)
        idx = ACTIONS.index(best)
        assert rewards[idx] == rewards.max()

    def test_tie_breaks_to_lowest_index(self):
        # at the optimum all translations tie at -1; index 0 must win
        e = I4
        best = mdp.greedy_oracle_policy(I4, e, I4)
        assert (best.generator_index, best.sign) == (1, 1)

    def test_greedy_descent_traps_near_optimum(self):
        rng = np.random.default_rng(7)
        max_step = math.sqrt(2.0)
        for _ in range(20):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * math.radians(rng.uniform(0, 8.0))
            t = se3.se3_exp(Se3Vector(rng.normal(0, 15 / math.sqrt(3), 3), w))
            e = random_frame(rng, t_scale=20.0)
            d = se3.geodesic_distance(se3.compose(e, t), se3.compose(e, I4))
            trapped = False
            for _ in range(120):
                a = mdp.greedy_oracle_policy(t, e, I4)
                t = apply_action(t, a, e)
                d_new = se3.geodesic_distance(se3.compose(e, t), se3.compose(e, I4))
                if trapped:
                    assert d_new < max_step + 1.0
                elif d_new >= d:
                    assert d < max_step + 1e-9
                    trapped = True
                d = d_new
            assert d < max_step + 1.0


class TestRewardMap:
    def test_all_negative_at_optimum(self, scene):
        volume, geometry = scene
        t_g = se3.se3_exp(Se3Vector([1, -2, 3], [0.02, 0.01, -0.03]))
        rm = mdp.ground_truth_reward_map(geometry, volume, t_g, t_g)
        assert np.any(rm.valid)
        assert np.all(np.max(rm.rewards[rm.valid], axis=-1) < 0)

    def test_spot_check_against_scalar_reward(self, scene):
        volume, geometry = scene
        rng = np.random.default_rng(8)
        t_g = se3.se3_exp(Se3Vector(rng.normal(0, 4, 3), rng.normal(0, 0.04, 3)))
        t = se3.se3_exp(Se3Vector(rng.normal(0, 4, 3), rng.normal(0, 0.04, 3)))
        rm = mdp.ground_truth_reward_map(geometry, volume, t, t_g)
        ys, xs = np.nonzero(rm.valid)
        for k in np.linspace(0, len(ys) - 1, 5).astype(int):
            y, x = int(ys[k]), int(xs[k])
            frame = projection.agent_frame_for_pixel(
                geometry, volume, t, (x + mdp.ROI_HALF, y + mdp.ROI_HALF)
            )
            f = world_frame(frame, geometry)
            for ai, a in enumerate(ACTIONS):
                assert abs(reward(t, a, f, t_g) - rm.rewards[y, x, ai]) < 1e-6

    def test_shift_matches_pretranslated_pose(self, scene):
        volume, geometry = scene
        rng = np.random.default_rng(9)
        for _ in range(3):
            t_g = se3.se3_exp(Se3Vector(rng.normal(0, 4, 3), rng.normal(0, 0.05, 3)))
            t = se3.se3_exp(Se3Vector(rng.normal(0, 4, 3), rng.normal(0, 0.05, 3)))
            data = mdp.precompute_pair_data(geometry, volume, t, t_g)
            shift = rng.uniform(-15, 15, 2)
            shortcut = mdp.reward_map_for_shift(data, shift)
            t_shifted = mdp.shifted_pose_for_targets(data, t, shift)
            scratch_data = mdp.precompute_pair_data(
                geometry, volume, t_shifted, t_g, origins=data.origins, valid=data.valid
            )
            scratch = mdp.reward_map_for_shift(scratch_data, (0.0, 0.0))
            mask = shortcut.valid
            assert np.max(np.abs(shortcut.rewards[mask] - scratch.rewards[mask])) < 1e-6

    def test_shift_range_enforced(self, scene):
        volume, geometry = scene
        with pytest.raises(ValueError):
            mdp.ground_truth_reward_map(geometry, volume, I4, I4, (25.0, 0.0))

    def test_validity_mask_covers_most_pixels(self):
        volume, _ = phantom.generate_phantom(PhantomParams(seed=4))
        geometry = biplane_geometries()[0]
        rm = mdp.ground_truth_reward_map(geometry, volume, I4, I4)
        assert float(np.mean(rm.valid)) >= 0.9

    def test_map_extent(self, scene):
        volume, geometry = scene
        rm = mdp.ground_truth_reward_map(geometry, volume, I4, I4)
        nx, ny = geometry.image_dims
        assert rm.rewards.shape == (ny - 60, nx - 60, 12)
