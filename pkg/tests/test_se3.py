import math

import numpy as np
import pytest
import scipy.linalg

from agentreg import se3
from agentreg.se3 import RigidTransform, Se3Vector


def random_tangent(rng, t_scale=10.0, w_max=3.0):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, w_max)
    return Se3Vector(rng.normal(0.0, t_scale, 3), w)


class TestExpLog:
    def test_zero_vector_is_identity(self):
        t = se3.se3_exp(Se3Vector(np.zeros(3), np.zeros(3)))
        assert np.allclose(t.matrix, np.eye(4), atol=1e-15)

    def test_pure_translation(self):
        t = se3.se3_exp(Se3Vector([1.0, 2.0, 3.0], np.zeros(3)))
        assert np.allclose(t.translation, [1.0, 2.0, 3.0])
        assert np.allclose(t.rotation, np.eye(3))

    def test_quarter_turn_about_z(self):
        t = se3.se3_exp(Se3Vector(np.zeros(3), [0.0, 0.0, math.pi / 2]))
        assert np.allclose(t.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_log_identity_is_zero(self):
        d = se3.se3_log(RigidTransform.identity())
        assert np.allclose(d.as_array(), 0.0)

    def test_log_pure_translation(self):
        d = se3.se3_log(RigidTransform.from_translation([5.0, 0.0, 0.0]))
        assert np.allclose(d.t, [5.0, 0.0, 0.0])
        assert np.allclose(d.w, 0.0)

    def test_roundtrip_against_dense_matrix_log(self):
        # independent oracle: scipy's generic matrix logarithm
        rng = np.random.default_rng(7)
        for _ in range(25):
            d = random_tangent(rng)
            t = se3.se3_exp(d)
            dense = scipy.linalg.logm(t.matrix)
            assert np.max(np.abs(dense.imag)) < 1e-9
            ours = se3.tangent_matrix(se3.se3_log(t))
            assert np.max(np.abs(dense.real - ours)) < 1e-8

    def test_roundtrip_error(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            d = random_tangent(rng)
            back = se3.se3_log(se3.se3_exp(d))
            assert np.max(np.abs(back.as_array() - d.as_array())) < 1e-9

    def test_small_angle_roundtrip(self):
        d = Se3Vector([0.3, -0.2, 0.9], [1e-9, -2e-9, 5e-10])
        back = se3.se3_log(se3.se3_exp(d))
        assert np.max(np.abs(back.as_array() - d.as_array())) < 1e-12

    def test_log_rejects_angle_near_pi(self):
        t = se3.rotation_about_axis([0.0, 0.0, 1.0], math.pi - 1e-9)
        with pytest.raises(se3.BranchCutError):
            se3.se3_log(t)

    def test_exp_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Se3Vector([np.nan, 0, 0], [0, 0, 0])

    def test_exp_rejects_outside_principal_branch(self):
        with pytest.raises(ValueError):
            se3.se3_exp(Se3Vector(np.zeros(3), [0.0, 0.0, 3.2]))


class TestGroupOps:
    def test_compose_identity(self):
        rng = np.random.default_rng(0)
        t = se3.se3_exp(random_tangent(rng))
        assert np.allclose(se3.compose(t, RigidTransform.identity()).matrix, t.matrix)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            t = se3.se3_exp(random_tangent(rng))
            assert np.max(np.abs(se3.compose(t, se3.inverse(t)).matrix - np.eye(4))) < 1e-12

    def test_z_rotations_add(self):
        a = se3.rotation_about_axis([0, 0, 1], math.radians(10.0))
        b = se3.rotation_about_axis([0, 0, 1], math.radians(20.0))
        assert np.allclose(se3.compose(a, a).matrix, b.matrix, atol=1e-12)

    def test_inverse_involution(self):
        rng = np.random.default_rng(2)
        t = se3.se3_exp(random_tangent(rng))
        assert np.max(np.abs(se3.inverse(se3.inverse(t)).matrix - t.matrix)) < 1e-12

    def test_inverse_of_translation(self):
        t = se3.inverse(RigidTransform.from_translation([1.0, 2.0, 3.0]))
        assert np.allclose(t.translation, [-1.0, -2.0, -3.0])

    def test_transform_invariants_enforced(self):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ValueError):
            RigidTransform(bad)
        bad = np.eye(4)
        bad[3, 0] = 1e-6
        with pytest.raises(ValueError):
            RigidTransform(bad)

    def test_renormalize_projects_drift(self):
        rng = np.random.default_rng(3)
        t = se3.se3_exp(random_tangent(rng))
        m = t.matrix.copy()
        m[:3, :3] += rng.normal(0.0, 1e-10, (3, 3))
        fixed = se3.renormalize(RigidTransform(m))
        r = fixed.rotation
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-14


class TestGenerators:
    def test_generator_structure(self):
        gens = se3.generators()
        assert len(gens) == 6
        for g in gens[:3]:
            assert np.count_nonzero(g) == 1
            assert g[:3, 3].sum() == 1.0
        for g in gens[3:]:
            r = g[:3, :3]
            assert np.allclose(r, -r.T)
            assert np.allclose(g[:3, 3], 0.0)

    def test_exp_matches_first_order(self):
        # finite-difference check at lambda = 1e-6
        lam = 1e-6
        for i, g in enumerate(se3.generators()):
            coeffs = np.zeros(6)
            coeffs[i] = lam
            t = se3.se3_exp(Se3Vector.from_array(coeffs))
            assert np.max(np.abs(t.matrix - (np.eye(4) + lam * g))) < 1e-9

    def test_tangent_matrix_is_generator_combination(self):
        rng = np.random.default_rng(4)
        coeffs = rng.normal(size=6)
        expected = sum(c * g for c, g in zip(coeffs, se3.generators()))
        got = se3.tangent_matrix(Se3Vector(coeffs[:3], coeffs[3:]))
        assert np.allclose(got, expected)


class TestGeodesicDistance:
    def test_zero_for_equal(self):
        rng = np.random.default_rng(5)
        t = se3.se3_exp(random_tangent(rng))
        assert se3.geodesic_distance(t, t) < 1e-12

    def test_pure_translation_345(self):
        d = se3.geodesic_distance(
            RigidTransform.identity(), RigidTransform.from_translation([3.0, 4.0, 0.0])
        )
        assert abs(d - 5.0) < 1e-9

    def test_one_degree_rotation(self):
        # direct evaluation: t=0, rotation norm 1 degree -> sqrt(2)
        rz = se3.rotation_about_axis([0, 0, 1], math.radians(1.0))
        d = se3.geodesic_distance(RigidTransform.identity(), rz)
        assert abs(d - math.sqrt(2.0)) < 1e-9
        # cross-check: Frobenius norm of the degree-scaled log matrix
        lg = se3.tangent_matrix(se3.se3_log(rz))
        lg[:3, :3] *= 180.0 / math.pi
        assert abs(np.linalg.norm(lg, "fro") - d) < 1e-9

    def test_symmetry_and_positivity(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a = se3.se3_exp(random_tangent(rng, w_max=1.2))
            b = se3.se3_exp(random_tangent(rng, w_max=1.2))
            dab = se3.geodesic_distance(a, b)
            dba = se3.geodesic_distance(b, a)
            assert abs(dab - dba) < 1e-9
            assert dab > 0.0

    def test_invariance_under_pure_rotation_frames(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            a = se3.se3_exp(random_tangent(rng, w_max=1.0))
            b = se3.se3_exp(random_tangent(rng, w_max=1.0))
            e = se3.rotation_about_axis(rng.normal(size=3), rng.uniform(0.1, 2.0))
            d0 = se3.geodesic_distance(a, b)
            d1 = se3.geodesic_distance(se3.compose(e, a), se3.compose(e, b))
            assert abs(d0 - d1) < 1e-9

    def test_invariance_under_any_frame_for_translation_moves(self):
        # relative motions that are pure translations are frame-invariant
        rng = np.random.default_rng(9)
        for _ in range(30):
            a = se3.se3_exp(Se3Vector(rng.normal(0, 10, 3), np.zeros(3)))
            b = se3.se3_exp(Se3Vector(rng.normal(0, 10, 3), np.zeros(3)))
            e = se3.se3_exp(random_tangent(rng, t_scale=100.0, w_max=2.0))
            d0 = se3.geodesic_distance(a, b)
            d1 = se3.geodesic_distance(se3.compose(e, a), se3.compose(e, b))
            assert abs(d0 - d1) < 1e-9


def chordal_objective(transforms, candidate):
    return sum(np.linalg.norm(t.matrix - candidate.matrix, "fro") ** 2 for t in transforms)


class TestChordalMean:
    def test_singleton_and_identical(self):
        rng = np.random.default_rng(10)
        t = se3.se3_exp(random_tangent(rng))
        assert np.allclose(se3.chordal_mean([t]).matrix, t.matrix, atol=1e-12)
        assert np.allclose(se3.chordal_mean([t, t, t]).matrix, t.matrix, atol=1e-12)

    def test_symmetric_rotations_cancel(self):
        a = se3.rotation_about_axis([0, 0, 1], math.radians(2.0))
        b = se3.rotation_about_axis([0, 0, 1], math.radians(-2.0))
        m = se3.chordal_mean([a, b])
        assert np.max(np.abs(m.matrix - np.eye(4))) < 1e-9

    def test_z_rotations_2_and_4_degrees(self):
        # oracle: grid search over the z angle at 1e-4 degree resolution
        a = se3.rotation_about_axis([0, 0, 1], math.radians(2.0))
        b = se3.rotation_about_axis([0, 0, 1], math.radians(4.0))
        mean = se3.chordal_mean([a, b])
        angles = np.radians(np.arange(2.0, 4.0001, 1e-4))
        costs = [
            chordal_objective([a, b], se3.rotation_about_axis([0, 0, 1], ang))
            for ang in angles
        ]
        best = angles[int(np.argmin(costs))]
        got = math.atan2(mean.rotation[1, 0], mean.rotation[0, 0])
        assert abs(got - best) < math.radians(1e-3)
        assert abs(math.degrees(got) - 3.0) < 1e-6

    def test_objective_not_above_inputs(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            ts = [se3.se3_exp(random_tangent(rng, w_max=0.5)) for _ in range(5)]
            m = se3.chordal_mean(ts)
            obj = chordal_objective(ts, m)
            for t in ts:
                assert obj <= chordal_objective(ts, t) + 1e-9

    def test_translation_averaging(self):
        ts = [RigidTransform.from_translation(v) for v in ([1, 0, 0], [0, 1, 0], [2, 2, 2])]
        m = se3.chordal_mean(ts)
        assert np.allclose(m.translation, [1.0, 1.0, 2.0 / 3.0])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            se3.chordal_mean([])


class TestSerialization:
    def test_transform_json_roundtrip(self):
        rng = np.random.default_rng(13)
        t = se3.se3_exp(random_tangent(rng))
        j = t.to_json()
        assert len(j) == 16
        assert np.allclose(RigidTransform.from_json(j).matrix, t.matrix)

    def test_vector_json_roundtrip(self):
        d = Se3Vector([1, 2, 3], [0.1, 0.2, 0.3])
        j = d.to_json()
        assert j == [1.0, 2.0, 3.0, 0.1, 0.2, 0.3]
        assert np.allclose(Se3Vector.from_array(j).as_array(), d.as_array())
