import csv
import math

import numpy as np
import pytest

from driveref.errors import InvalidConfig, InvalidInput
from driveref.evaluation import (HIST_EDGES, MetricsReport, ModelBuilder, ablation, compute_metrics,
                                 cross_dataset, direction_histograms, fold_plan, loso_case, loso_cv,
                                 measurement_analysis, metrics_from_arrays, modality_subsets, per_driver_report,
                                 pitch_histogram, score, write_csv)
from driveref.events import WINDOW, Dataset, ReferencingEvent
from driveref.geometry import direction_from_angles, yaw_pitch
from driveref.models import TrainConfig, ground_truths
from driveref.scene import (COCKPIT, ENVIRONMENT, AngularExtent, angular_extent, ground_truth_vector, hit_test,
                            target_and_pose)
from driveref.simulator import SimConfig, generate_dataset

QUICK = TrainConfig(epochs=2, seed=0)


def _gt(scenes, e):
    return ground_truth_vector(*target_and_pose(scenes, e.use_case, e.target_id, e.pose_id))


def test_perfect_predictions(small_dataset, scenes):
    events = small_dataset.events[:30]
    m = compute_metrics([(_gt(scenes, e), e) for e in events], scenes)
    assert m.mad == pytest.approx(0.0, abs=1e-6) and m.hit_rate == 1.0 and m.n == 30


def test_hand_arithmetic():
    m = metrics_from_arrays(np.array([10.0, 20.0]), np.array([True, False]))
    assert (m.mad, m.std_ad, m.hit_rate, m.n) == (15.0, 5.0, 0.5, 2)
    with pytest.raises(InvalidInput):
        compute_metrics([])
    with pytest.raises(InvalidInput):
        MetricsReport(0.0, 0.0, 0.0, 0)


def test_metrics_match_scalar_recomputation(small_dataset, scenes, rng):
    events = small_dataset.events
    dirs = rng.normal(size=(len(events), 3))
    # mix in near-correct predictions so hits and misses both occur
    dirs[::2] = np.array([_gt(scenes, e) for e in events[::2]]) + rng.normal(scale=0.02, size=(len(events[::2]), 3))
    m = compute_metrics(list(zip(dirs, events)), scenes)
    errs, hits = [], []
    for d, e in zip(dirs, events):
        g = _gt(scenes, e)
        c = sum(a * b for a, b in zip(d, g)) / math.sqrt(sum(a * a for a in d)) / math.sqrt(sum(b * b for b in g))
        errs.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
        ext = angular_extent(*target_and_pose(scenes, e.use_case, e.target_id, e.pose_id))
        yaw = math.degrees(math.atan2(d[1], d[0]))
        pitch = math.degrees(math.atan2(d[2], math.hypot(d[0], d[1])))
        mid = 0.5 * (ext.yaw_min + ext.yaw_max)
        yaw = mid + ((yaw - mid + 180.0) % 360.0 - 180.0)
        hits.append(ext.yaw_min - 2 < yaw < ext.yaw_max + 2 and ext.pitch_min - 1 < pitch < ext.pitch_max + 1)
    mean = sum(errs) / len(errs)
    std = math.sqrt(sum((x - mean) ** 2 for x in errs) / len(errs))
    assert abs(m.mad - mean) <= 1e-12
    assert abs(m.std_ad - std) <= 1e-12
    assert m.hit_rate == sum(hits) / len(hits)
    assert 0 < m.hit_rate < 1


def test_hit_rate_drops_without_tolerance(small_dataset, scenes, rng):
    events = small_dataset.events
    dirs = np.array([_gt(scenes, e) for e in events]) + rng.normal(scale=0.05, size=(len(events), 3))
    _, with_tol = score(dirs, events, scenes)
    _, without = score(dirs, events, scenes, 0.0, 0.0)
    assert without.mean() <= with_tol.mean() <= 1.0
    assert not np.any(without & ~with_tol)


def test_hit_test_brute_force(rng):
    # criterion 4: random extents and directions vs direct bound checks
    for _ in range(10_000):
        y0 = rng.uniform(-170, 150)
        p0 = rng.uniform(-80, 70)
        ext = AngularExtent(y0, y0 + rng.uniform(0, 20), p0, p0 + rng.uniform(0, 10))
        yaw = rng.uniform(ext.yaw_min - 5, ext.yaw_max + 5)
        pitch = np.clip(rng.uniform(ext.pitch_min - 3, ext.pitch_max + 3), -89.9, 89.9)
        d = direction_from_angles(yaw, pitch)
        y, p = (float(v) for v in yaw_pitch(d))
        expected = ext.yaw_min - 2 < y < ext.yaw_max + 2 and ext.pitch_min - 1 < p < ext.pitch_max + 1
        assert hit_test(d, ext) == expected


def test_fold_plan():
    subs = [f"S{i:02d}" for i in range(1, 12)]
    plan = fold_plan(subs)
    assert len(plan) == 11
    assert plan[0] == ("S01", "S02") and plan[-1] == ("S11", "S01")
    with pytest.raises(InvalidConfig):
        fold_plan(["S01", "S02"])


@pytest.fixture(scope="module")
def cv(small_dataset, scenes):
    return loso_cv(small_dataset.filter(use_case=COCKPIT), ModelBuilder("fusion", width=4), QUICK, scenes)


def test_loso_partition_and_aggregate(cv, small_dataset):
    data = small_dataset.filter(use_case=COCKPIT)
    assert [f.test_subject for f in cv.folds] == data.subjects()
    assert sum(f.metrics.n for f in cv.folds) == len(data) == cv.aggregate.n
    weighted = sum(f.metrics.n * f.metrics.mad for f in cv.folds) / cv.aggregate.n
    assert cv.aggregate.mad == pytest.approx(weighted, abs=1e-12)
    hits = sum(f.metrics.n * f.metrics.hit_rate for f in cv.folds) / cv.aggregate.n
    assert cv.aggregate.hit_rate == pytest.approx(hits, abs=1e-12)
    pooled = np.concatenate([f.errors for f in cv.folds])
    assert cv.aggregate.std_ad == pytest.approx(pooled.std(), abs=1e-12)


def test_loso_equal_folds_unweighted(cv):
    sizes = {f.metrics.n for f in cv.folds}
    assert len(sizes) == 1
    assert cv.aggregate.mad == pytest.approx(np.mean([f.metrics.mad for f in cv.folds]), abs=1e-12)


def test_per_driver_report(cv, small_dataset, scenes):
    rows = per_driver_report(cv)
    assert [r["subject"] for r in rows] == small_dataset.subjects()
    n = sum(r["n"] for r in rows)
    assert sum(r["n"] * r["mad"] for r in rows) / n == pytest.approx(cv.aggregate.mad, abs=1e-12)
    fold = cv.folds[1]
    events = [e for e in small_dataset.filter(use_case=COCKPIT).events if e.subject_id == fold.test_subject]
    again = compute_metrics(list(zip(fold.directions, events)), scenes)
    assert again.mad == pytest.approx(rows[1]["mad"], abs=1e-12)


def test_loso_deterministic_and_parallel(cv, small_dataset, scenes):
    again = loso_cv(small_dataset.filter(use_case=COCKPIT), ModelBuilder("fusion", width=4), QUICK, scenes, jobs=2)
    assert again.aggregate == cv.aggregate
    for a, b in zip(cv.folds, again.folds):
        np.testing.assert_array_equal(a.directions, b.directions)


def test_loso_needs_three_subjects(small_dataset, scenes):
    two = small_dataset.filter(subjects=["S01", "S02"])
    with pytest.raises(InvalidConfig):
        loso_cv(two, ModelBuilder("fusion", width=4), QUICK, scenes)


def test_ablation_rows(small_dataset, scenes):
    assert len(modality_subsets()) == 7
    data = small_dataset.filter(use_case=COCKPIT, subjects=["S01", "S02", "S03"])
    table = ablation(data, [("eye",), ("finger", "head")], width=2, config=TrainConfig(epochs=1), scenes=scenes)
    assert list(table) == [("eye",), ("finger", "head")]
    assert table[("finger", "head")].keys == {"modalities": "finger+head"}


def test_cross_dataset(small_dataset, scenes):
    res = cross_dataset(small_dataset.filter(use_case=COCKPIT), small_dataset.filter(use_case=ENVIRONMENT),
                        ModelBuilder("fusion", width=2), TrainConfig(epochs=1), scenes)
    assert res.aggregate.n == len(small_dataset.filter(use_case=ENVIRONMENT))
    with pytest.raises(InvalidConfig):
        cross_dataset(Dataset([]), small_dataset, ModelBuilder("fusion", width=2), QUICK, scenes)


def test_loso_case(small_dataset):
    res = loso_case(small_dataset, ModelBuilder("case", width=2), TrainConfig(epochs=1))
    assert res.n == len(small_dataset) and len(res.folds) == 4
    assert res.accuracy == pytest.approx(sum(f.accuracy * f.n for f in res.folds) / res.n)


def _toy_event(scenes, target_id, eye_off, head_off, finger_off):
    target, _ = target_and_pose(scenes, COCKPIT, target_id, None)
    gy, gp = (float(v) for v in yaw_pitch(ground_truth_vector(target)))
    features = np.zeros((WINDOW, 6, 3))
    features[:, 0] = [0.5, 0.0, 0.3]
    features[:, 1] = direction_from_angles(gy + finger_off[0], gp + finger_off[1])
    features[:, 3] = direction_from_angles(gy + eye_off[0], gp + eye_off[1])
    features[:, 5] = np.radians([gy + head_off[0], gp + head_off[1], 7.0])
    return ReferencingEvent("S01", COCKPIT, target_id, features, np.ones((WINDOW, 6), bool), 18)


def test_measurement_analysis_toy(scenes):
    ids = [t.id for t in scenes[COCKPIT].targets[:3]]
    events = [
        _toy_event(scenes, ids[0], (2, -3), (1, 1), (0, 4)),
        _toy_event(scenes, ids[1], (-4, 3), (-1, 2), (6, -2)),
        _toy_event(scenes, ids[2], (0, 6), (3, 0), (-3, 0)),
    ]
    rows = {r["modality"]: r for r in measurement_analysis(Dataset(events), scenes)}
    assert rows["eye"]["yaw_mean"] == pytest.approx(2.0, abs=1e-9)
    assert rows["eye"]["pitch_mean"] == pytest.approx(4.0, abs=1e-9)
    assert rows["head"]["yaw_mean"] == pytest.approx(5 / 3, abs=1e-9)
    assert rows["head"]["pitch_std"] == pytest.approx(np.std([1, 2, 0]), abs=1e-9)
    assert rows["finger"]["yaw_std"] == pytest.approx(np.std([0, 6, 3]), abs=1e-9)
    assert all(r["n"] == 3 for r in rows.values())
    with pytest.raises(InvalidInput):
        measurement_analysis(Dataset([]))


def test_measurement_analysis_zero_noise(scenes):
    data = generate_dataset(SimConfig(seed=2, n_subjects=2, cockpit_events=24, environment_events=36,
                                      noise_scale=0.0, dropout_scale=0.0), scenes)
    for r in measurement_analysis(data, scenes):
        assert r["yaw_mean"] < 1e-6 and r["pitch_mean"] < 1e-6


def test_histograms(small_dataset):
    hists = direction_histograms(small_dataset)
    assert {(h.use_case, h.series) for h in hists} >= {(COCKPIT, "finger_position"), (ENVIRONMENT, "eye_direction")}
    for h in hists:
        assert len(h.counts) == len(HIST_EDGES) - 1 == 180
        n = sum(e.available[e.woz_index, {"finger_position": 0, "finger_direction": 1, "eye_direction": 3,
                                          "head_direction": 5}[h.series]]
                for e in small_dataset.events if e.use_case == h.use_case)
        assert h.n == n
    counts = pitch_histogram(np.array([-90.0, -0.5, 0.0, 89.99, 90.0]))
    assert counts[0] == 1 and counts[89] == 1 and counts[90] == 1 and counts[179] == 2


def test_write_csv(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": 1e-17}]
    write_csv(tmp_path / "x.csv", rows)
    back = list(csv.DictReader(open(tmp_path / "x.csv")))
    assert [float(r["b"]) for r in back] == [0.1, 1e-17]
