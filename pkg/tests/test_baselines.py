import json
import math

import numpy as np
import pytest

from pedforecast.baselines import (AdapterError, CvSettings,
                                   constant_velocity_gaussians,
                                   cv_baseline_records, gaussian_to_pmf,
                                   instances_to_scene, kde_to_pmf,
                                   mixture_to_pmf, read_baseline_jsonl,
                                   record_to_pmf, records_to_scene,
                                   scott_bandwidth, write_baseline_jsonl)
from pedforecast.geometry import GridSpec, Pose2D, cell_centers
from pedforecast.perception import Detection


def random_spd(rng):
    a = rng.uniform(-1, 1, (2, 2))
    return a @ a.T + 0.3 * np.eye(2)


class TestGaussian:
    def test_concentrated_mass_stays_in_cell(self):
        # far below cell scale the captured mass all belongs to one cell
        grid = GridSpec(8, 8, 0.5)
        mean = np.array(cell_centers(grid)[3, 5])
        cov = (0.5 / 100.0) ** 2 * np.eye(2)
        out = gaussian_to_pmf(mean[None], cov[None], grid,
                              subsamples_per_cell=8, renormalize=True)
        assert out.pmf[0, 3, 5] >= 0.999

    def test_isotropic_symmetry(self):
        grid = GridSpec(10, 10, 0.4)
        out = gaussian_to_pmf(np.zeros((1, 2)), [0.6 * np.eye(2)], grid)
        pmf = out.pmf[0]
        assert np.max(np.abs(pmf - pmf[::-1, :])) < 1e-9
        assert np.max(np.abs(pmf - pmf[:, ::-1])) < 1e-9
        assert np.max(np.abs(pmf - pmf.T)) < 1e-9

    def test_six_sigma_grid_sums_to_one(self):
        grid = GridSpec(24, 24, 0.5)   # covers +-6 m = +-6 sigma
        out = gaussian_to_pmf(np.zeros((1, 2)), [np.eye(2)], grid)
        assert abs(out.pmf[0].sum() - 1.0) <= 1e-3
        assert abs(out.outside[0]) <= 1e-3

    def test_monte_carlo_binning(self):
        # seeded draw; roughly a third of seeds land a >3 sigma cell by
        # chance with 144 comparisons, this one clears every cell
        rng = np.random.default_rng(16)
        grid = GridSpec(12, 12, 0.5)
        mean = rng.uniform(-1, 1, 2)
        cov = random_spd(rng)
        out = gaussian_to_pmf(mean[None], cov[None], grid,
                              subsamples_per_cell=8)
        n = 10 ** 6
        draws = rng.multivariate_normal(mean, cov, size=n)
        counts = np.zeros(grid.shape)
        cols = np.floor(draws[:, 0] / 0.5 + 6).astype(int)
        rows = np.floor(draws[:, 1] / 0.5 + 6).astype(int)
        ok = (rows >= 0) & (rows < 12) & (cols >= 0) & (cols < 12)
        np.add.at(counts, (rows[ok], cols[ok]), 1.0)
        empirical = counts / n
        p = np.clip(out.pmf[0], 1.0 / n, 1.0 - 1.0 / n)
        tol = 3.0 * np.sqrt(p * (1.0 - p) / n)
        assert np.all(np.abs(out.pmf[0] - empirical) <= tol)

    def test_renormalize_flag(self):
        grid = GridSpec(4, 4, 0.5)   # too small, mass escapes
        raw = gaussian_to_pmf(np.zeros((1, 2)), [np.eye(2)], grid)
        assert raw.pmf[0].sum() < 0.9
        norm = gaussian_to_pmf(np.zeros((1, 2)), [np.eye(2)], grid,
                               renormalize=True)
        assert abs(norm.pmf[0].sum() - 1.0) < 1e-12
        assert norm.outside[0] == raw.outside[0]

    def test_mass_bounds(self):
        rng = np.random.default_rng(1)
        grid = GridSpec(6, 6, 1.0)
        out = gaussian_to_pmf(rng.uniform(-2, 2, (3, 2)),
                              [random_spd(rng) for _ in range(3)], grid)
        assert np.all(out.pmf >= 0)
        assert np.all(out.pmf <= 1)

    def test_rejects_bad_covariance(self):
        grid = GridSpec(4, 4, 1.0)
        with pytest.raises(AdapterError):
            gaussian_to_pmf(np.zeros((1, 2)), [-np.eye(2)], grid)
        with pytest.raises(AdapterError):
            gaussian_to_pmf(np.zeros((1, 2)),
                            [np.array([[1.0, 0.5], [-0.5, 1.0]])], grid)


class TestMixture:
    def test_weighted_sum_of_components(self):
        rng = np.random.default_rng(2)
        grid = GridSpec(8, 8, 0.5)
        comps = [(0.3, rng.uniform(-1, 1, 2), random_spd(rng)),
                 (0.7, rng.uniform(-1, 1, 2), random_spd(rng))]
        mix = mixture_to_pmf([comps], grid)
        parts = [gaussian_to_pmf(m[None], c[None], grid).pmf[0]
                 for _, m, c in comps]
        want = 0.3 * parts[0] + 0.7 * parts[1]
        assert np.max(np.abs(mix.pmf[0] - want)) < 1e-12

    def test_weights_validated(self):
        grid = GridSpec(4, 4, 1.0)
        with pytest.raises(AdapterError):
            mixture_to_pmf([[(0.5, np.zeros(2), np.eye(2))]], grid)
        with pytest.raises(AdapterError):
            mixture_to_pmf([[(-0.1, np.zeros(2), np.eye(2)),
                             (1.1, np.zeros(2), np.eye(2))]], grid)
        with pytest.raises(AdapterError):
            mixture_to_pmf([[]], grid)


class TestKde:
    def test_degenerate_samples_concentrate(self):
        grid = GridSpec(9, 9, 0.5)
        center = np.array(cell_centers(grid)[4, 4])
        samples = np.tile(center, (50, 1))
        out = kde_to_pmf([samples], grid)
        block = out.pmf[0, 3:6, 3:6]
        assert block.sum() >= 0.99

    def test_single_sample_equals_gaussian(self):
        grid = GridSpec(8, 8, 0.5)
        point = np.array([0.3, -0.2])
        kde = kde_to_pmf([point[None]], grid)
        gauss = gaussian_to_pmf(point[None], [0.01 * np.eye(2)], grid)
        assert np.max(np.abs(kde.pmf - gauss.pmf)) < 1e-12

    def test_scott_rule(self):
        rng = np.random.default_rng(3)
        samples = rng.normal(0, 2.0, (50, 2))
        sigma = math.sqrt(samples.var(axis=0, ddof=1).mean())
        assert scott_bandwidth(samples) == max(sigma * 50 ** (-1 / 6), 0.1)
        tight = rng.normal(0, 1e-4, (50, 2))
        assert scott_bandwidth(tight) == 0.1
        assert scott_bandwidth(np.zeros((1, 2))) == 0.1

    def test_matches_dense_kernel_sum(self):
        rng = np.random.default_rng(4)
        grid = GridSpec(6, 7, 0.5)
        samples = rng.uniform(-1.5, 1.5, (50, 2))
        out = kde_to_pmf([samples], grid, subsamples_per_cell=3)

        h = scott_bandwidth(samples)
        want = np.zeros(grid.shape)
        for r in range(6):
            for c in range(7):
                cx, cy = cell_centers(grid)[r, c]
                acc = 0.0
                for i in range(3):
                    for j in range(3):
                        px = cx + ((i + 0.5) / 3 - 0.5) * 0.5
                        py = cy + ((j + 0.5) / 3 - 0.5) * 0.5
                        dens = 0.0
                        for sx, sy in samples:
                            d2 = (px - sx) ** 2 + (py - sy) ** 2
                            dens += math.exp(-0.5 * d2 / h ** 2) / \
                                (2 * math.pi * h * h)
                        acc += dens / len(samples)
                want[r, c] = acc / 9 * 0.25
        assert np.max(np.abs(out.pmf[0] - want)) < 1e-9

    def test_rejects_empty_step(self):
        with pytest.raises(AdapterError):
            kde_to_pmf([np.zeros((0, 2))], GridSpec(4, 4, 1.0))


class TestInstancesToScene:
    def test_single_actor_identity_passthrough(self):
        rng = np.random.default_rng(5)
        grid = GridSpec(8, 8, 0.5)
        raw = rng.random((2, 8, 8))
        pmf = raw / raw.sum(axis=(1, 2), keepdims=True)
        out = instances_to_scene([pmf], [Pose2D(0, 0, 0)], grid, grid)
        assert np.max(np.abs(out - pmf)) < 1e-12

    def test_two_actor_union(self):
        grid = GridSpec(4, 4, 1.0)
        pmf = np.zeros((1, 4, 4))
        pmf[0, 2, 2] = 0.5
        out = instances_to_scene([pmf, pmf.copy()],
                                 [Pose2D(0, 0, 0), Pose2D(0, 0, 0)],
                                 grid, grid)
        assert abs(out[0, 2, 2] - 0.75) < 1e-12

    def test_monte_carlo_independence(self):
        rng = np.random.default_rng(6)
        grid = GridSpec(8, 8, 1.0)
        pmfs = []
        for _ in range(3):
            raw = rng.random((1, 8, 8))
            pmfs.append(raw / raw.sum())
        out = instances_to_scene(pmfs, [Pose2D(0, 0, 0)] * 3, grid, grid)

        # each actor lands on one cell per draw, independently
        n = 10 ** 5
        occ = np.zeros((n, 64), dtype=bool)
        for p in pmfs:
            draws = rng.choice(64, size=n, p=p.ravel())
            occ[np.arange(n), draws] = True
        mc = occ.mean(axis=0).reshape(8, 8)
        assert np.max(np.abs(out[0] - mc)) <= 0.01

    def test_pose_count_mismatch(self):
        grid = GridSpec(4, 4, 1.0)
        with pytest.raises(AdapterError):
            instances_to_scene([np.full((1, 4, 4), 1 / 16)], [], grid, grid)


class TestConstantVelocity:
    def test_means_follow_heading(self):
        det = Detection(0.9, 1.0, 2.0, math.pi / 2)
        means, covs = constant_velocity_gaussians(
            det, 4, CvSettings(speed=1.0, dt=0.5))
        assert np.allclose(means[:, 0], 1.0, atol=1e-12)
        assert np.allclose(means[:, 1], 2.0 + 0.5 * np.arange(1, 5))
        sig = np.sqrt(covs[:, 0, 0])
        assert np.all(np.diff(sig) > 0)
        assert np.allclose(covs[:, 0, 1], 0.0)

    def test_records_roundtrip(self, tmp_path):
        dets = [Detection(0.8, 0.0, 0.0, 0.0), Detection(0.7, 3.0, 1.0, 1.0)]
        records = cv_baseline_records(4, dets, 3)
        path = tmp_path / "baseline.jsonl"
        write_baseline_jsonl(path, records)
        back = read_baseline_jsonl(path)
        assert back == json.loads(json.dumps(records))
        assert all(r["kind"] == "gaussian" and len(r["steps"]) == 3
                   for r in back)

    def test_read_validation(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"frame_id": 0, "actor": 0, "kind": "nope", '
                        '"steps": []}\n')
        with pytest.raises(AdapterError, match="unknown kind"):
            read_baseline_jsonl(path)
        path.write_text('{"frame_id": 0}\n')
        with pytest.raises(AdapterError, match="missing"):
            read_baseline_jsonl(path)
        path.write_text('not json\n')
        with pytest.raises(AdapterError, match="bad JSON"):
            read_baseline_jsonl(path)


class TestRecordToPmf:
    grid = GridSpec(8, 8, 0.5)

    def test_pose_centering(self):
        rec = {"frame_id": 0, "actor": 0, "kind": "gaussian",
               "pose": [5.0, -3.0, 0.0],
               "steps": [{"mean": [5.0, -3.0],
                          "cov": [[0.01, 0.0], [0.0, 0.01]]}]}
        out = record_to_pmf(rec, self.grid, subsamples_per_cell=8)
        # mass lands in the four cells around the grid center
        assert out.pmf[0, 3:5, 3:5].sum() >= 0.99

    def test_heading_rotation(self):
        # one meter ahead along a pi/2 heading lands at local (+x)
        rec = {"frame_id": 0, "actor": 0, "kind": "gaussian",
               "pose": [2.0, 2.0, math.pi / 2],
               "steps": [{"mean": [2.0, 3.0],
                          "cov": [[1e-4, 0.0], [0.0, 1e-4]]}]}
        pmf = record_to_pmf(rec, self.grid).pmf[0]
        top = np.unravel_index(np.argmax(pmf), pmf.shape)
        assert top in ((3, 5), (4, 5), (3, 6), (4, 6))

    def test_mixture_and_samples_kinds(self):
        gauss = {"frame_id": 0, "actor": 0, "kind": "gaussian",
                 "pose": [0.0, 0.0, 0.3],
                 "steps": [{"mean": [0.5, 0.2],
                            "cov": [[0.04, 0.0], [0.0, 0.04]]}]}
        mix = {"frame_id": 0, "actor": 0, "kind": "mixture",
               "pose": [0.0, 0.0, 0.3],
               "steps": [{"components": [
                   {"weight": 1.0, "mean": [0.5, 0.2],
                    "cov": [[0.04, 0.0], [0.0, 0.04]]}]}]}
        a = record_to_pmf(gauss, self.grid).pmf
        b = record_to_pmf(mix, self.grid).pmf
        assert np.max(np.abs(a - b)) < 1e-12

        samp = {"frame_id": 0, "actor": 0, "kind": "samples",
                "steps": [{"points": [[0.1, 0.1], [0.2, -0.1], [0.0, 0.0]]}]}
        out = record_to_pmf(samp, self.grid)
        assert out.pmf.shape == (1, 8, 8)
        assert np.all(out.pmf >= 0)

    def test_records_to_scene(self):
        dets = [Detection(0.9, 0.0, 0.0, 0.0), Detection(0.8, 2.0, 1.0, 0.5)]
        records = cv_baseline_records(0, dets, 2)
        scene = records_to_scene(records, self.grid, GridSpec(16, 16, 0.5))
        assert scene.shape == (2, 16, 16)
        assert np.all((scene >= 0) & (scene <= 1))
        assert scene.max() > 0