import json
import math

import numpy as np
import pytest

from pedforecast.geometry import GridSpec, Pose2D, cell_centers, pose_to_world
from pedforecast.metrics import (EvalSettings, MetricError, REPORT_KEYS,
                                 avg_and_final_map, common_recall_threshold,
                                 evaluate_forecasts, expected_rmse,
                                 argmax_rmse, match_true_positives,
                                 min_rmse_at_m, motion_nll, occupancy_ap,
                                 pr_curve, reliability, suppress_detections,
                                 suppression_ranks)
from pedforecast.model import FrameForecast, PreparedFrame
from pedforecast.perception import Detection


def ap_oracle(probs, labels) -> float:
    """All-points AP by exhaustive threshold enumeration."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n_pos = labels.sum()
    if n_pos == 0:
        return 0.0
    points = []
    for tau in sorted(set(probs), reverse=True):
        kept = probs >= tau
        tp = float((labels[kept] == 1).sum())
        points.append((tp / kept.sum(), tp / n_pos))
    ap = 0.0
    prev_recall = 0.0
    for i, (_, recall) in enumerate(points):
        envelope = max(p for p, r in points if r >= recall)
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    return ap


class TestAveragePrecision:
    def test_perfect_ranking(self):
        ap, ok = occupancy_ap([0.9, 0.8, 0.7, 0.2, 0.1], [1, 1, 1, 0, 0])
        assert ap == 1.0 and ok

    def test_pinned_example(self):
        ap, ok = occupancy_ap([0.9, 0.8, 0.1], [1, 0, 1])
        assert abs(ap - 5.0 / 6.0) < 1e-12 and ok

    def test_no_positives_flagged(self):
        ap, ok = occupancy_ap([0.3, 0.6], [0, 0])
        assert ap == 0.0 and not ok

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(2, 65))
            probs = np.round(rng.random(n), 2)   # force score ties
            labels = (rng.random(n) < 0.4).astype(float)
            if labels.sum() == 0:
                labels[0] = 1.0
            ap, _ = occupancy_ap(probs, labels)
            assert abs(ap - ap_oracle(probs, labels)) < 1e-12, trial

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        probs = rng.random(40)
        labels = (rng.random(40) < 0.5).astype(float)
        labels[0] = 1.0
        base, _ = occupancy_ap(probs, labels)
        squashed, _ = occupancy_ap(1.0 / (1.0 + np.exp(-5 * probs)), labels)
        assert base == squashed

    def test_curve_invariants(self):
        rng = np.random.default_rng(5)
        curve = pr_curve(rng.random(50), (rng.random(50) < 0.3).astype(float))
        assert np.all(np.diff(curve.recall) >= 0)
        assert np.all((curve.precision >= 0) & (curve.precision <= 1))
        assert np.all((curve.recall >= 0) & (curve.recall <= 1))

    def test_rejects_bad_labels(self):
        with pytest.raises(MetricError):
            occupancy_ap([0.5], [0.5])
        with pytest.raises(MetricError):
            occupancy_ap([], [])


class TestAvgFinal:
    def test_single_step_equal(self):
        probs = [np.array([0.9, 0.1])]
        labels = [np.array([1.0, 0.0])]
        avg, final, _ = avg_and_final_map(probs, labels)
        assert avg == final == 1.0

    def test_mean_of_steps(self):
        perfect = (np.array([0.9, 0.1]), np.array([1.0, 0.0]))
        half = (np.array([0.9, 0.8, 0.1]), np.array([1.0, 0.0, 1.0]))
        avg, final, flags = avg_and_final_map(
            [perfect[0], half[0]], [perfect[1], half[1]])
        assert abs(avg - (1.0 + 5.0 / 6.0) / 2.0) < 1e-12
        assert abs(final - 5.0 / 6.0) < 1e-12
        assert flags == [True, True]

    def test_pooling_is_order_independent(self):
        rng = np.random.default_rng(11)
        a = rng.random(30)
        y = (rng.random(30) < 0.4).astype(float)
        y[:2] = 1.0
        perm = rng.permutation(30)
        avg1, _, _ = avg_and_final_map([a], [y])
        avg2, _, _ = avg_and_final_map([a[perm]], [y[perm]])
        assert avg1 == avg2


class TestReliability:
    def test_binary_oracle_is_calibrated(self):
        probs = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
        rep = reliability(probs, probs.copy())
        assert rep.ace == 0.0 and rep.mce == 0.0

    def test_single_bin_example(self):
        rep = reliability(np.array([0.9, 0.9]), np.array([1.0, 0.0]))
        assert abs(rep.ace - 0.4) < 1e-12
        assert abs(rep.mce - 0.4) < 1e-12
        assert len(rep.empty_bins) == 9

    def test_matches_binning_loop(self):
        rng = np.random.default_rng(2)
        probs = rng.random(300)
        labels = (rng.random(300) < probs).astype(float)
        rep = reliability(probs, labels, bins=10)

        gaps = []
        for b in range(10):
            lo, hi = b / 10.0, (b + 1) / 10.0
            sel = (probs >= lo) & (probs < hi) if b < 9 else (probs >= lo)
            if sel.sum() == 0:
                continue
            gaps.append(abs(probs[sel].mean() - labels[sel].mean()))
        assert abs(rep.ace - np.mean(gaps)) < 1e-12
        assert abs(rep.mce - np.max(gaps)) < 1e-12

    def test_ace_not_above_mce(self):
        rng = np.random.default_rng(9)
        rep = reliability(rng.random(100),
                          (rng.random(100) < 0.5).astype(float))
        assert rep.ace <= rep.mce

    def test_top_edge_lands_in_last_bin(self):
        rep = reliability(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
        assert rep.count[9] == 2

    def test_rejects_out_of_range(self):
        with pytest.raises(MetricError):
            reliability(np.array([1.5]), np.array([1.0]))


class TestMotionMetrics:
    grid = GridSpec(16, 16, 1.0)

    def test_uniform_nll(self):
        pmf = np.full((16, 16), 1.0 / 256.0)
        nll = motion_nll(pmf, self.grid, Pose2D(0, 0, 0), np.array([0.0, 0.0]))
        assert abs(nll - math.log(256.0)) < 1e-12

    def test_out_of_grid_is_none(self):
        pmf = np.full((16, 16), 1.0 / 256.0)
        assert motion_nll(pmf, self.grid, Pose2D(0, 0, 0),
                          np.array([50.0, 0.0])) is None

    def test_expected_rmse_half_grid(self):
        g = GridSpec(1, 2, 1.0)
        pmf = np.array([[0.5, 0.5]])
        val = expected_rmse(pmf, g, Pose2D(0, 0, 0), np.array([-0.5, 0.0]))
        assert abs(val - 0.5) < 1e-12

    def test_one_hot_everything_agrees(self):
        pmf = np.zeros((16, 16))
        pmf[3, 7] = 1.0
        pose = Pose2D(1.0, -2.0, 0.7)
        local = cell_centers(self.grid)[3, 7]
        gt = pose_to_world(pose).apply(local[None, :])[0]
        for fn in (expected_rmse, argmax_rmse):
            assert fn(pmf, self.grid, pose, gt) < 1e-9
        assert min_rmse_at_m(pmf, self.grid, pose, gt, 5) < 1e-9
        assert motion_nll(pmf, self.grid, pose, gt) < 1e-9

    def test_matches_loop_oracles(self):
        rng = np.random.default_rng(4)
        g = GridSpec(5, 6, 0.5)
        for _ in range(10):
            raw = rng.random((5, 6)) + 1e-3
            pmf = raw / raw.sum()
            pose = Pose2D(*rng.uniform(-2, 2, 2), rng.uniform(-3, 3))
            gt = pose_to_world(pose).apply(rng.uniform(-1.5, 1.5, (1, 2)))[0]

            centers = cell_centers(g).reshape(-1, 2)
            world = pose_to_world(pose).apply(centers)
            dists = np.hypot(world[:, 0] - gt[0], world[:, 1] - gt[1])
            assert abs(expected_rmse(pmf, g, pose, gt)
                       - (pmf.ravel() * dists).sum()) < 1e-12

            flat = pmf.ravel()
            for m in (1, 3, 25, flat.size):
                order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
                want = min(dists[i] for i in order[:m])
                assert abs(min_rmse_at_m(pmf, g, pose, gt, m) - want) < 1e-12
            assert argmax_rmse(pmf, g, pose, gt) == \
                min_rmse_at_m(pmf, g, pose, gt, 1)

    def test_expected_at_least_min_over_all(self):
        rng = np.random.default_rng(8)
        g = GridSpec(4, 4, 1.0)
        raw = rng.random((4, 4)) + 0.01
        pmf = raw / raw.sum()
        gt = np.array([0.3, -0.7])
        assert expected_rmse(pmf, g, Pose2D(0, 0, 0), gt) >= \
            min_rmse_at_m(pmf, g, Pose2D(0, 0, 0), gt, 16)

    def test_rejects_unnormalized(self):
        with pytest.raises(MetricError):
            expected_rmse(np.full((4, 4), 1.0), GridSpec(4, 4, 1.0),
                          Pose2D(0, 0, 0), np.zeros(2))


class TestMatching:
    def test_exact_hit_matches(self):
        dets = [Detection(0.9, 1.0, 2.0, 0.0)]
        assert match_true_positives(dets, np.array([[1.0, 2.0]])) == [0]

    def test_outside_radius_unmatched(self):
        dets = [Detection(0.9, 0.6, 0.0, 0.0)]
        assert match_true_positives(dets, np.array([[0.0, 0.0]]), 0.5) == [None]


class TestCommonRecall:
    def make_dets(self, scores, xs):
        return [Detection(s, x, 0.0, 0.0) for s, x in zip(scores, xs)]

    def test_counting_example(self):
        # 10 GT each matched by one detection scored 0.1..1.0, target 0.7
        xs = np.arange(10) * 5.0
        dets = self.make_dets(np.arange(1, 11) / 10.0, xs)
        gt = np.column_stack([xs, np.zeros(10)])
        threshold, achieved, ok = common_recall_threshold([dets], [gt], 0.7, 0.5)
        assert abs(threshold - 0.4) < 1e-12
        assert achieved == pytest.approx(0.7) and ok

    def test_pooled_matches_per_threshold_sweep(self):
        rng = np.random.default_rng(6)
        frames_dets, frames_gt = [], []
        for _ in range(4):
            n_gt = int(rng.integers(1, 5))
            gt = rng.uniform(-10, 10, (n_gt, 2))
            dets = []
            for g in gt:
                if rng.random() < 0.8:
                    dets.append(Detection(float(rng.random()),
                                          g[0] + rng.uniform(-0.3, 0.3),
                                          g[1] + rng.uniform(-0.3, 0.3), 0.0))
            for _ in range(int(rng.integers(0, 3))):
                dets.append(Detection(float(rng.random()),
                                      *rng.uniform(-10, 10, 2), 0.0))
            frames_dets.append(dets)
            frames_gt.append(gt)
        target = 0.6
        threshold, achieved, ok = common_recall_threshold(
            frames_dets, frames_gt, target, 0.5)

        def recall_at(tau):
            matched = 0
            total = 0
            for dets, gt in zip(frames_dets, frames_gt):
                kept = [d for d in dets if d.score >= tau]
                total += len(gt)
                matched += sum(m is not None
                               for m in match_true_positives(kept, gt, 0.5))
            return matched / total

        if ok:
            assert recall_at(threshold) >= target
            better = [d.score for dets in frames_dets for d in dets
                      if d.score > threshold]
            if better:
                assert recall_at(min(better)) < target or \
                    min(better) == threshold

    def test_unreachable_flagged(self):
        dets = self.make_dets([0.9], [100.0])
        threshold, achieved, ok = common_recall_threshold(
            [dets], [np.array([[0.0, 0.0]])], 0.9, 0.5)
        assert not ok and achieved == 0.0 and threshold == 0.9


class TestSuppression:
    def test_zero_fraction_keeps_all(self):
        dets = [Detection(0.5, float(i), 0.0, 0.0) for i in range(5)]
        kept, dropped = suppress_detections(dets, 3, 0.0)
        assert kept == dets and dropped == []

    def test_rounding_half_up(self):
        dets = [Detection(0.5, float(i), 0.0, 0.0) for i in range(3)]
        kept, dropped = suppress_detections(dets, 0, 0.2)
        assert len(dropped) == 1 and len(kept) == 2
        two = [Detection(0.5, float(i), 0.0, 0.0) for i in range(2)]
        kept2, dropped2 = suppress_detections(two, 0, 0.2)
        assert dropped2 == [] and len(kept2) == 2

    def test_deterministic_and_frame_dependent(self):
        dets = [Detection(0.5, float(i), 0.0, 0.0) for i in range(10)]
        _, d1 = suppress_detections(dets, 1, 0.3)
        _, d2 = suppress_detections(dets, 1, 0.3)
        _, d3 = suppress_detections(dets, 2, 0.3)
        assert d1 == d2
        assert d1 != d3

    def test_survivors_keep_order(self):
        dets = [Detection(0.1 * (i + 1), float(i), 0.0, 0.0) for i in range(6)]
        kept, dropped = suppress_detections(dets, 4, 0.5)
        xs = [d.x for d in kept]
        assert xs == sorted(xs)
        assert len(dropped) == 3

    def test_ranks_cover_all_indices(self):
        assert sorted(suppression_ranks(7, 11)) == list(range(7))

    def test_bad_fraction_rejected(self):
        with pytest.raises(MetricError):
            suppress_detections([], 0, 1.5)


def oracle_setup(horizon=2, rows=8, cols=8):
    """Frames where the forecast equals the labels and pmfs are one-hot."""
    grid = GridSpec(rows, cols, 1.0)
    actor_grid = GridSpec(4, 4, 1.0)
    rng = np.random.default_rng(0)
    frames, forecasts = [], []
    for frame_id in range(3):
        n = 2
        gt_xy = rng.uniform(-2.5, 2.5, (n, 2))
        futures = gt_xy[:, None, :] + rng.uniform(-1.0, 1.0, (n, horizon, 2))
        occupancy = np.zeros((horizon, rows, cols))
        for t in range(horizon):
            for a in range(n):
                r = int(np.floor(futures[a, t, 1] + rows / 2))
                c = int(np.floor(futures[a, t, 0] + cols / 2))
                occupancy[t, r, c] = 1.0
        poses = [Pose2D(x, y, 0.0) for x, y in gt_xy]
        dets = [Detection(0.9, p.x, p.y, 0.0) for p in poses]
        pmfs = []
        for a in range(n):
            pmf = np.zeros((horizon, 4, 4))
            for t in range(horizon):
                local = futures[a, t] - gt_xy[a]
                r = int(np.floor(local[1] + 2))
                c = int(np.floor(local[0] + 2))
                pmf[t, min(max(r, 0), 3), min(max(c, 0), 3)] = 1.0
            pmfs.append(pmf)
        frames.append(PreparedFrame(
            frame_id, np.zeros((2, rows, cols)), np.zeros((4, rows, cols)),
            poses, gt_xy, futures, np.zeros((4, 4), dtype=bool),
            np.zeros((4, 4, 4)), occupancy))
        forecasts.append(FrameForecast(frame_id, dets, pmfs,
                                       occupancy.copy(), occupancy.copy()))
    return forecasts, frames, actor_grid


class TestEvaluate:
    def test_oracle_predictor_is_perfect(self):
        forecasts, frames, actor_grid = oracle_setup()
        report = evaluate_forecasts(forecasts, frames, actor_grid,
                                    EvalSettings())
        assert report.metrics["avg_map"] == 1.0
        assert report.metrics["final_map"] == 1.0
        assert report.metrics["ace"] == 0.0
        assert report.metrics["nll"] <= 1e-9
        assert report.metrics["min_rmse_25"] <= math.sqrt(2) / 2 + 1e-9

    def test_report_keys_exact(self):
        forecasts, frames, actor_grid = oracle_setup()
        report = evaluate_forecasts(forecasts, frames, actor_grid,
                                    EvalSettings())
        payload = json.loads(report.to_json())
        assert tuple(sorted(payload)) == tuple(sorted(REPORT_KEYS))

    def test_deterministic_json(self):
        a = evaluate_forecasts(*oracle_setup()[:2],
                               oracle_setup()[2], EvalSettings())
        b = evaluate_forecasts(*oracle_setup()[:2],
                               oracle_setup()[2], EvalSettings())
        assert a.to_json() == b.to_json()

    def test_empty_dataset_rejected(self):
        with pytest.raises(MetricError):
            evaluate_forecasts([], [], GridSpec(4, 4, 1.0), EvalSettings())


@pytest.fixture(scope="module")
def tiny_eval(tmp_path_factory):
    from test_model import tiny_plan, tiny_settings, tiny_world
    from pedforecast import sim
    from pedforecast.model import make_model, prepare_frames

    out = tmp_path_factory.mktemp("evaldata")
    path = sim.generate_dataset(tiny_world(), tiny_plan(4), out)
    model = make_model(0, tiny_settings())
    return model, prepare_frames(path, model)


class TestEvaluateModel:
    def test_report_shape_and_determinism(self, tiny_eval):
        from pedforecast.metrics import evaluate_model
        model, frames = tiny_eval
        settings = EvalSettings(target_recall=0.5, match_radius=2.0)
        a = evaluate_model(model, frames, settings)
        b = evaluate_model(model, frames, settings)
        assert tuple(a.metrics) == REPORT_KEYS
        assert a.to_json() == b.to_json()
        assert "detection_threshold" in a.diagnostics
        assert a.diagnostics["ablation"] == "none"

    def test_suppression_path(self, tiny_eval):
        from pedforecast.metrics import evaluate_model
        model, frames = tiny_eval
        settings = EvalSettings(target_recall=0.5, match_radius=2.0,
                                suppress_fraction=0.5)
        report = evaluate_model(model, frames, settings)
        assert report.diagnostics["suppress_fraction"] == 0.5
        assert "suppressed_gt" in report.diagnostics

    def test_ablations_accepted(self, tiny_eval):
        from pedforecast.metrics import evaluate_model
        model, frames = tiny_eval
        for ablation in ("no-s2a", "no-scene", "no-graph"):
            settings = EvalSettings(target_recall=0.5, match_radius=2.0,
                                    ablation=ablation)
            report = evaluate_model(model, frames, settings)
            assert report.diagnostics["ablation"] == ablation

    def test_write_report_sidecar(self, tiny_eval, tmp_path):
        from pedforecast.metrics import evaluate_model, write_report
        model, frames = tiny_eval
        report = evaluate_model(model, frames, EvalSettings(
            target_recall=0.5, match_radius=2.0))
        path = tmp_path / "report.json"
        write_report(report, path)
        assert json.loads(path.read_text()) == report.metrics
        side = tmp_path / "report.diagnostics.json"
        assert side.exists()
        assert json.loads(side.read_text()) == json.loads(
            json.dumps(report.diagnostics))


def probe_setup(scene_row, agg_row, truth_row, mask_cols):
    """One frame on a 1x8 strip; rows are per-cell probabilities."""
    occupancy = np.array(truth_row, dtype=np.float64).reshape(1, 1, -1)
    n = occupancy.shape[-1]
    frame = PreparedFrame(0, np.zeros((2, 1, n)), np.zeros((4, 1, n)),
                          [], np.zeros((0, 2)), np.zeros((0, 1, 2)),
                          np.zeros((1, n), dtype=bool), np.zeros((4, 1, n)),
                          occupancy)
    forecast = FrameForecast(0, [], [],
                             np.array(scene_row).reshape(1, 1, -1),
                             np.array(agg_row).reshape(1, 1, -1))
    mask = np.zeros_like(occupancy)
    mask[0, 0, mask_cols] = 1.0
    return [forecast], [frame], [mask]


class TestMatchedPrecision:
    def test_hand_worked_operating_points(self):
        from pedforecast.metrics import matched_precision_recalls
        # aggregation F1 peaks at 0.75 with 4/4 precision; the scene head
        # holds precision 1.0 down to 0.55, catching both masked cells
        out = matched_precision_recalls(*probe_setup(
            scene_row=[0.9, 0.8, 0.7, 0.6, 0.55, 0.5, 0.1, 0.1],
            agg_row=[0.9, 0.85, 0.8, 0.75, 0.02, 0.7, 0.05, 0.04],
            truth_row=[1, 1, 1, 1, 1, 0, 0, 0],
            mask_cols=[3, 4]))
        assert out["precision_bar"] == 1.0
        assert out["aggregation_threshold"] == 0.75
        assert out["scene_threshold"] == 0.55
        assert out["scene_recall_matched"] == 1.0
        assert out["aggregation_recall_matched"] == 0.5

    def test_unreachable_bar_falls_back_to_best_precision(self):
        from pedforecast.metrics import matched_precision_recalls
        out = matched_precision_recalls(*probe_setup(
            scene_row=[0.5, 0.9], agg_row=[0.9, 0.1],
            truth_row=[1, 0], mask_cols=[0]))
        assert out["precision_bar"] == 1.0
        assert out["scene_threshold"] == 0.5
        assert out["scene_recall_matched"] == 1.0
        assert out["aggregation_recall_matched"] == 1.0

    def test_empty_mask_reports_none(self):
        from pedforecast.metrics import matched_precision_recalls
        out = matched_precision_recalls(*probe_setup(
            scene_row=[0.5, 0.9], agg_row=[0.9, 0.1],
            truth_row=[1, 0], mask_cols=[]))
        assert out["scene_recall_matched"] is None
        assert out["precision_bar"] is None

    def test_probe_joins_suppression_diagnostics(self, tiny_eval):
        from pedforecast.metrics import evaluate_model
        model, frames = tiny_eval
        report = evaluate_model(model, frames, EvalSettings(
            target_recall=0.5, match_radius=2.0, suppress_fraction=0.5))
        sg = report.diagnostics["suppressed_gt"]
        for key in ("n_cells", "scene_mean", "aggregation_mean",
                    "precision_bar", "scene_recall_matched",
                    "aggregation_recall_matched"):
            assert key in sg
