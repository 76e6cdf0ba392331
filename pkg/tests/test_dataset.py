import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spraygnn.dataset import (
    ExperimentDataset,
    LayerScan,
    augment_dataset,
    augment_inter_step,
    interpolate_layers,
    load_experiment,
    read_trajectory,
    store_augmented,
    write_trajectory,
)
from spraygnn.errors import (
    GridMismatch,
    InsufficientScans,
    MissingFile,
    NonMonotoneLayers,
    SchemaVersionMismatch,
)
from spraygnn.geometry import Trajectory, TrajectoryStep, WallGrid


def step(t, x, y, z=400.0, speed=0.5):
    return TrajectoryStep(t, np.array([x, y, z]), np.array([speed, 0.0, 0.0]), np.array([0.0, 0.0, -1.0]), 2.0)


def small_dataset(layers=2):
    grid = WallGrid(6, 5, 20.0)
    trajs = [Trajectory([step(k, 20.0 * k, 40.0) for k in range(4)]) for _ in range(layers)]
    scans = [LayerScan(l, np.full(grid.n, 1.5 * l) + 0.01 * np.arange(grid.n)) for l in range(layers + 1)]
    return ExperimentDataset(grid, layers, trajs, scans, name="tiny")


class TestInterpolateLayers:
    def test_midpoint(self):
        out = interpolate_layers([LayerScan(0, np.zeros(4)), LayerScan(10, np.full(4, 5.0))], 10)
        np.testing.assert_allclose(out[5], 2.5)

    def test_piecewise(self):
        scans = [LayerScan(0, np.zeros(3)), LayerScan(1, np.ones(3)), LayerScan(10, np.full(3, 10.0))]
        np.testing.assert_allclose(interpolate_layers(scans, 10)[4], 4.0)

    def test_random_piecewise_linear_truth(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = 50
            knots = sorted(rng.choice(np.arange(1, 15), size=2, replace=False))
            a, b, c = rng.uniform(0, 5, n), rng.uniform(5, 10, n), rng.uniform(10, 20, n)
            L = knots[1]
            truth = np.empty((L + 1, n))
            for l in range(L + 1):
                if l <= knots[0]:
                    truth[l] = a + (b - a) * l / knots[0]
                else:
                    truth[l] = b + (c - b) * (l - knots[0]) / (L - knots[0])
            scans = [LayerScan(0, truth[0]), LayerScan(knots[0], truth[knots[0]]), LayerScan(L, truth[L])]
            np.testing.assert_allclose(interpolate_layers(scans, L), truth, atol=1e-12, rtol=0)

    def test_recorded_layers_exact(self):
        rng = np.random.default_rng(3)
        scans = [LayerScan(l, rng.uniform(0, 9, 7)) for l in (0, 3, 7)]
        out = interpolate_layers(scans, 7)
        for s in scans:
            np.testing.assert_array_equal(out[s.layer], s.offsets)

    def test_extrapolation_clamped(self):
        scans = [LayerScan(0, np.array([4.0, 1.0])), LayerScan(2, np.array([2.0, 2.0]))]
        out = interpolate_layers(scans, 6)
        np.testing.assert_allclose(out[6], [0.0, 4.0])

    def test_errors(self):
        with pytest.raises(InsufficientScans):
            interpolate_layers([LayerScan(0, np.zeros(2))], 3)
        with pytest.raises(NonMonotoneLayers):
            interpolate_layers([LayerScan(0, np.zeros(2)), LayerScan(4, np.zeros(2)), LayerScan(4, np.zeros(2))], 5)
        with pytest.raises(NonMonotoneLayers):
            interpolate_layers([LayerScan(1, np.zeros(2)), LayerScan(4, np.zeros(2))], 5)


class TestAugmentInterStep:
    def test_untouched_particle(self):
        grid = WallGrid(10, 1, 100.0)
        traj = Trajectory([step(k, 0.0, 0.0) for k in range(3)])
        seq = augment_inter_step(np.zeros(grid.n), np.ones(grid.n), traj, grid)
        far = grid.n - 1
        np.testing.assert_array_equal(seq[:-1, far], 0.0)
        assert seq[-1, far] == 1.0

    def test_full_coverage_single_step(self):
        grid = WallGrid(3, 3, 10.0)
        traj = Trajectory([step(0, 10.0, 10.0)])
        seq = augment_inter_step(np.zeros(9), np.arange(9.0), traj, grid)
        np.testing.assert_array_equal(seq[1], np.arange(9.0))
        assert seq.shape == (2, 9)

    def test_one_shot_update(self):
        grid = WallGrid(8, 1, 10.0)
        traj = Trajectory([step(0, 0.0, 0.0, z=40.0), step(1, 5.0, 0.0, z=40.0), step(2, 70.0, 0.0, z=40.0)])
        seq = augment_inter_step(np.zeros(8), np.full(8, 3.0), traj, grid)
        # radius 20 mm: step 0 covers x=0,10; step 1 also covers x=20
        np.testing.assert_array_equal(seq[1], [3, 3, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(seq[2], [3, 3, 3, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(seq[3], 3.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_and_exact_end(self, seed):
        rng = np.random.default_rng(seed)
        grid = WallGrid(9, 7, 15.0)
        start = rng.uniform(0, 2, grid.n)
        end = start + rng.uniform(0, 3, grid.n)
        traj = Trajectory([step(k, *rng.uniform(0, 130, 2), z=rng.uniform(20, 80)) for k in range(6)])
        seq = augment_inter_step(start, end, traj, grid)
        assert np.all(seq >= start) and np.all(seq <= end)
        np.testing.assert_array_equal(seq[0], start)
        np.testing.assert_array_equal(seq[-1], end)

    def test_shape_mismatch(self):
        with pytest.raises(GridMismatch):
            augment_inter_step(np.zeros(3), np.zeros(4), Trajectory([step(0, 0, 0)]), WallGrid(2, 2, 1.0))


class TestAugmentDataset:
    def test_snapshot_count(self):
        ds = augment_dataset(small_dataset(3))
        assert ds.snapshot_count() == 4 * 3
        assert all(a.shape == (5, ds.grid.n) for a in ds.augmented)

    def test_layer_continuity(self):
        ds = augment_dataset(small_dataset(3))
        for l in range(1, 3):
            np.testing.assert_array_equal(ds.augmented[l][0], ds.augmented[l - 1][-1])


class TestFiles:
    def test_trajectory_roundtrip(self, tmp_path):
        traj = Trajectory([step(k, 1.0 / 3 * k, 2.5) for k in range(5)])
        write_trajectory(traj, tmp_path / "t.jsonl")
        back = read_trajectory(tmp_path / "t.jsonl")
        for a, b in zip(traj, back):
            np.testing.assert_array_equal(a.tp, b.tp)
            np.testing.assert_array_equal(a.u, b.u)
            assert a.P == b.P and a.t == b.t

    def test_roundtrip_bit_exact(self, tmp_path):
        ds = augment_dataset(small_dataset(2))
        ds.scans[1].offsets = ds.scans[1].offsets + 1.0 / 7.0
        manifest = store_augmented(ds, tmp_path / "exp")
        back = load_experiment(manifest)
        assert back.layers == ds.layers and back.grid.n == ds.grid.n
        for a, b in zip(ds.scans, back.scans):
            assert a.layer == b.layer
            np.testing.assert_array_equal(a.offsets, b.offsets)
        for a, b in zip(ds.augmented, back.augmented):
            np.testing.assert_array_equal(a, b)

    def test_missing_scan(self, tmp_path):
        manifest = store_augmented(small_dataset(2), tmp_path / "exp")
        (tmp_path / "exp" / "scan_001.csv").unlink()
        with pytest.raises(MissingFile):
            load_experiment(manifest)

    def test_short_scan(self, tmp_path):
        manifest = store_augmented(small_dataset(2), tmp_path / "exp")
        path = tmp_path / "exp" / "scan_001.csv"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(GridMismatch):
            load_experiment(manifest)

    def test_version(self, tmp_path):
        manifest = store_augmented(small_dataset(2), tmp_path / "exp")
        data = json.loads(manifest.read_text())
        data["version"] = 99
        manifest.write_text(json.dumps(data))
        with pytest.raises(SchemaVersionMismatch):
            load_experiment(manifest)
