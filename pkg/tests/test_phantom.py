import numpy as np
import pytest

from agentreg import phantom
from agentreg.phantom import PhantomParams, Volume3D


@pytest.fixture(scope="module")
def small_phantom():
    params = PhantomParams(vertebra_count=5, noise_sigma=0.0, background_intensity=0.0,
                           dims=(64, 96, 64), seed=3)
    return phantom.generate_phantom(params), params


class TestGeneratePhantom:
    def test_profile_has_one_maximum_per_vertebra(self, small_phantom):
        (volume, _), params = small_phantom
        profile = volume.data.sum(axis=(0, 2))  # column sums along y
        smooth = np.convolve(profile, np.ones(3) / 3.0, mode="same")
        peaks = [
            i
            for i in range(1, len(smooth) - 1)
            if smooth[i] > smooth[i - 1] and smooth[i] >= smooth[i + 1]
            and smooth[i] > 0.5 * smooth.max()
        ]
        assert len(peaks) == params.vertebra_count

    def test_determinism(self):
        params = PhantomParams(seed=42, vertebra_count=4, dims=(64, 72, 64))
        v1, l1 = phantom.generate_phantom(params)
        v2, l2 = phantom.generate_phantom(params)
        assert np.array_equal(v1.data, v2.data)
        assert np.array_equal(l1.points, l2.points)

    def test_different_seed_differs(self):
        v1, _ = phantom.generate_phantom(PhantomParams(seed=1, vertebra_count=4, dims=(64, 72, 64)))
        v2, _ = phantom.generate_phantom(PhantomParams(seed=2, vertebra_count=4, dims=(64, 72, 64)))
        assert not np.array_equal(v1.data, v2.data)

    def test_zero_background_outside_primitives(self, small_phantom):
        (volume, _), _ = small_phantom
        # volume corners are far from every vertebra
        assert volume.data[0, 0, 0] == 0.0
        assert volume.data[-1, -1, -1] == 0.0

    def test_seven_landmarks_inside_bounds(self):
        for count in (3, 5, 7, 9):
            volume, lm = phantom.generate_phantom(
                PhantomParams(vertebra_count=count, dims=(64, 128, 64), seed=0)
            )
            assert lm.points.shape == (7, 3)
            lo, hi = volume.bounds()
            assert np.all(lm.points >= lo) and np.all(lm.points <= hi)

    def test_landmarks_at_body_centers_for_seven(self):
        params = PhantomParams(vertebra_count=7, seed=0)
        _, lm = phantom.generate_phantom(params)
        assert np.allclose(lm.points, phantom.body_centers(params))

    def test_rejects_geometry_exceeding_bounds(self):
        with pytest.raises(ValueError):
            phantom.generate_phantom(PhantomParams(vertebra_count=12, dims=(48, 48, 48)))

    def test_rejects_too_few_vertebrae(self):
        with pytest.raises(ValueError):
            PhantomParams(vertebra_count=2)

    def test_intensities_nonnegative(self):
        volume, _ = phantom.generate_phantom(PhantomParams(seed=5, noise_sigma=0.5))
        assert np.all(volume.data >= 0.0)


class TestTrilinear:
    def test_voxel_center_returns_stored_value(self, small_phantom):
        (volume, _), _ = small_phantom
        idx = (10, 20, 30)  # (ix, iy, iz)
        point = volume.origin + np.array(idx) * volume.spacing
        assert phantom.sample_trilinear(volume, point) == pytest.approx(
            float(volume.data[idx[2], idx[1], idx[0]])
        )

    def test_far_outside_returns_zero(self, small_phantom):
        (volume, _), _ = small_phantom
        assert phantom.sample_trilinear(volume, [1000.0, 1000.0, 1000.0]) == 0.0

    def test_midpoint_interpolation(self):
        data = np.zeros((2, 1, 2))
        data[0, 0, 0] = 2.0
        data[0, 0, 1] = 4.0
        volume = Volume3D(dims=(2, 1, 2), spacing=(1, 1, 1), origin=(0, 0, 0), data=data)
        assert phantom.sample_trilinear(volume, [0.5, 0.0, 0.0]) == pytest.approx(3.0)

    def test_continuity(self, small_phantom):
        (volume, _), _ = small_phantom
        rng = np.random.default_rng(0)
        lip = float(np.max(np.abs(np.diff(volume.data, axis=2)))) / float(min(volume.spacing))
        lip = max(
            lip,
            float(np.max(np.abs(np.diff(volume.data, axis=1)))) / float(min(volume.spacing)),
            float(np.max(np.abs(np.diff(volume.data, axis=0)))) / float(min(volume.spacing)),
        )
        # trilinear interpolation is piecewise linear; spot-check the bound
        lo, hi = volume.bounds()
        for _ in range(200):
            p = rng.uniform(lo, hi)
            eps = rng.normal(0.0, 0.01, 3)
            f0 = phantom.sample_trilinear(volume, p)
            f1 = phantom.sample_trilinear(volume, p + eps)
            # factor 3 for the three axes contributing independently
            assert abs(f1 - f0) <= 3.0 * lip * np.linalg.norm(eps) + 1e-12

    def test_rejects_nonfinite_point(self, small_phantom):
        (volume, _), _ = small_phantom
        with pytest.raises(ValueError):
            phantom.sample_trilinear(volume, [np.nan, 0.0, 0.0])


class TestInsertRod:
    def test_zero_intensity_unchanged(self, small_phantom):
        (volume, _), _ = small_phantom
        out = phantom.insert_rod(volume, (-20, 0, 0), (20, 0, 0), 2.0, 0.0)
        assert np.array_equal(out.data, volume.data)

    def test_outside_rod_unchanged(self, small_phantom):
        (volume, _), _ = small_phantom
        out = phantom.insert_rod(volume, (500, 500, 500), (600, 600, 600), 2.0, 9.0)
        assert np.array_equal(out.data, volume.data)

    def test_rod_raises_values(self, small_phantom):
        (volume, _), _ = small_phantom
        out = phantom.insert_rod(volume, (-20, 0, 0), (20, 0, 0), 2.0, 9.0)
        assert phantom.sample_trilinear(out, [0.0, 0.0, 0.0]) == pytest.approx(9.0)
        assert np.all(out.data >= volume.data)

    def test_idempotent(self, small_phantom):
        (volume, _), _ = small_phantom
        once = phantom.insert_rod(volume, (-20, 0, 0), (20, 0, 0), 2.0, 9.0)
        twice = phantom.insert_rod(once, (-20, 0, 0), (20, 0, 0), 2.0, 9.0)
        assert np.array_equal(once.data, twice.data)

    def test_rejects_degenerate_segment(self, small_phantom):
        (volume, _), _ = small_phantom
        with pytest.raises(ValueError):
            phantom.insert_rod(volume, (1, 1, 1), (1, 1, 1), 2.0, 9.0)

    def test_original_untouched(self, small_phantom):
        (volume, _), _ = small_phantom
        before = volume.data.copy()
        phantom.insert_rod(volume, (-20, 0, 0), (20, 0, 0), 2.0, 9.0)
        assert np.array_equal(volume.data, before)


class TestVolumeInvariants:
    def test_data_length_checked(self):
        with pytest.raises(ValueError):
            Volume3D(dims=(2, 2, 2), spacing=(1, 1, 1), origin=(0, 0, 0), data=np.zeros(7))

    def test_negative_intensity_rejected(self):
        with pytest.raises(ValueError):
            Volume3D(dims=(2, 2, 2), spacing=(1, 1, 1), origin=(0, 0, 0),
                     data=np.full(8, -1.0))

    def test_bad_spacing_rejected(self):
        with pytest.raises(ValueError):
            Volume3D(dims=(2, 2, 2), spacing=(0, 1, 1), origin=(0, 0, 0), data=np.zeros(8))
