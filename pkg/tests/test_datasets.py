"""Measurement corruption, masking and dataset serialization tests."""

import numpy as np
import pytest

from structsense.datasets import (
    TrajectoryDataset,
    corrupt_and_mask,
    load_dataset,
    save_dataset,
)
from structsense.errors import ShapeMismatchError
from structsense.graph import ObservationMask, sparsity_mask


def synthetic_truth(n_steps=4000, n_nodes=6, seed=0):
    rng = np.random.default_rng(seed)
    times = np.arange(n_steps) * 0.01
    shape = (n_steps, n_nodes, 2)
    forces = np.zeros(shape)
    forces[:, :2, :] = 3.0 * rng.standard_normal((n_steps, 2, 2))
    return TrajectoryDataset(
        times=times,
        displacements=1e-3 * rng.standard_normal(shape),
        velocities=1e-2 * rng.standard_normal(shape),
        accelerations=rng.standard_normal(shape) * np.arange(1, n_nodes + 1)[None, :, None],
        input_forces=forces,
    )


class TestCorruptAndMask:
    def test_variance_bookkeeping_is_exact(self):
        truth = synthetic_truth()
        mask = sparsity_mask(6, 0.0)
        ds = corrupt_and_mask(truth, 25.0, mask, seed=1)
        power = np.mean(truth.accelerations**2, axis=(0, 2))
        np.testing.assert_allclose(ds.acc_noise_var, power / 25.0, rtol=1e-15)
        power_f = np.mean(truth.input_forces**2, axis=(0, 2))
        np.testing.assert_allclose(ds.force_noise_var, power_f / 25.0, rtol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_empirical_snr_within_ten_percent(self, seed):
        truth = synthetic_truth(seed=seed)
        ds = corrupt_and_mask(truth, 25.0, sparsity_mask(6, 0.0), seed=seed + 50)
        noise = ds.observed_accelerations - truth.accelerations
        for node in range(6):
            signal_power = np.mean(truth.accelerations[:, node, :] ** 2)
            noise_power = np.mean(noise[:, node, :] ** 2)
            snr = signal_power / noise_power
            assert snr == pytest.approx(25.0, rel=0.1)

    def test_unmeasured_nodes_are_nan(self):
        truth = synthetic_truth()
        mask = ObservationMask(np.array([True, False, True, False, True, False]))
        ds = corrupt_and_mask(truth, 25.0, mask, seed=2)
        assert np.isnan(ds.observed_accelerations[:, [1, 3, 5], :]).all()
        assert np.isfinite(ds.observed_accelerations[:, [0, 2, 4], :]).all()
        assert np.isnan(ds.observed_forces[:, [1, 3, 5], :]).all()

    def test_input_forces_stay_clean(self):
        truth = synthetic_truth()
        ds = corrupt_and_mask(truth, 25.0, sparsity_mask(6, 50.0), seed=3)
        np.testing.assert_array_equal(ds.input_forces, truth.input_forces)
        # unforced nodes have zero power, so their observed force is exact
        measured = ds.mask.measured_indices
        quiet = [k for k in measured if k >= 2]
        np.testing.assert_array_equal(ds.observed_forces[:, quiet, :], 0.0)

    def test_infinite_snr_is_noiseless(self):
        truth = synthetic_truth()
        ds = corrupt_and_mask(truth, np.inf, sparsity_mask(6, 0.0), seed=4)
        np.testing.assert_array_equal(ds.observed_accelerations,
                                      truth.accelerations)
        np.testing.assert_array_equal(ds.acc_noise_var, 0.0)

    def test_nonpositive_snr_rejected(self):
        truth = synthetic_truth()
        with pytest.raises(ValueError):
            corrupt_and_mask(truth, 0.0, sparsity_mask(6, 0.0))

    def test_mask_size_mismatch_rejected(self):
        truth = synthetic_truth()
        with pytest.raises(ShapeMismatchError):
            corrupt_and_mask(truth, 25.0, sparsity_mask(5, 0.0))

    def test_same_seed_reproduces_noise(self):
        truth = synthetic_truth()
        a = corrupt_and_mask(truth, 25.0, sparsity_mask(6, 50.0), seed=9)
        b = corrupt_and_mask(truth, 25.0, sparsity_mask(6, 50.0), seed=9)
        np.testing.assert_array_equal(
            a.observed_accelerations[np.isfinite(a.observed_accelerations)],
            b.observed_accelerations[np.isfinite(b.observed_accelerations)],
        )


class TestDatasetValidation:
    def test_shape_mismatch_rejected(self):
        times = np.arange(10) * 0.01
        good = np.zeros((10, 3, 2))
        with pytest.raises(ShapeMismatchError):
            TrajectoryDataset(times=times, displacements=np.zeros((9, 3, 2)),
                              velocities=good, accelerations=good,
                              input_forces=good)

    def test_decreasing_times_rejected(self):
        times = np.array([0.0, 0.02, 0.01])
        arr = np.zeros((3, 2, 2))
        with pytest.raises(ShapeMismatchError):
            TrajectoryDataset(times=times, displacements=arr, velocities=arr,
                              accelerations=arr, input_forces=arr)


class TestDatasetIO:
    def test_round_trip_with_observations(self, tmp_path):
        truth = synthetic_truth(n_steps=50)
        ds = corrupt_and_mask(truth, 25.0, sparsity_mask(6, 50.0), seed=5)
        path = tmp_path / "data.txt"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.times, ds.times)
        np.testing.assert_array_equal(back.displacements, ds.displacements)
        np.testing.assert_array_equal(back.accelerations, ds.accelerations)
        np.testing.assert_array_equal(
            back.observed_accelerations[np.isfinite(back.observed_accelerations)],
            ds.observed_accelerations[np.isfinite(ds.observed_accelerations)],
        )
        assert np.isnan(back.observed_accelerations).sum() == \
            np.isnan(ds.observed_accelerations).sum()
        np.testing.assert_array_equal(back.acc_noise_var, ds.acc_noise_var)
        np.testing.assert_array_equal(back.mask.measured, ds.mask.measured)
        assert back.snr == 25.0

    def test_round_trip_truth_only(self, tmp_path):
        truth = synthetic_truth(n_steps=20)
        path = tmp_path / "truth.txt"
        save_dataset(path, truth)
        back = load_dataset(path)
        assert not back.has_observations
        assert back.mask is None
        np.testing.assert_array_equal(back.velocities, truth.velocities)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("something-else 1\n")
        with pytest.raises(ValueError):
            load_dataset(path)
