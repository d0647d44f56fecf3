"""Metrics, leave-one-subject-out experiments and measurement analysis.

Angular metrics are in degrees. Fold aggregates pool the per-event errors of
all folds, which equals the event-weighted average of fold MAD and hit rate.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput
from .events import MODALITIES, Dataset, ReferencingEvent, canonical_modalities, interpolate_missing
from .geometry import angular_distance, euler_array_to_direction, yaw_pitch
from .models import (TrainConfig, build_case_model, build_fusion_model,
                     case_probabilities, ground_truths, predict_direction, train)
from .scene import COCKPIT, ENVIRONMENT, USE_CASES, angular_extent, default_scenes, hit_test, target_and_pose


@dataclass
class MetricsReport:
    mad: float
    std_ad: float
    hit_rate: float
    n: int
    keys: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidInput("metrics need at least one event")

    def to_dict(self) -> dict:
        return {**self.keys, "n": self.n, "mad": self.mad, "std_ad": self.std_ad, "hit_rate": self.hit_rate}


def metrics_from_arrays(errors: np.ndarray, hits: np.ndarray, keys: Optional[dict] = None) -> MetricsReport:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise InvalidInput("metrics need at least one event")
    return MetricsReport(float(errors.mean()), float(errors.std()), float(np.mean(hits)), int(errors.size),
                         dict(keys or {}))


def score(directions: np.ndarray, events: Sequence[ReferencingEvent], scenes: Optional[dict] = None,
          tol_yaw: float = 2.0, tol_pitch: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-event angular error (degrees) and hit flag."""
    scenes = scenes or default_scenes()
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(directions) != len(events):
        raise InvalidInput(f"{len(directions)} predictions for {len(events)} events")
    gt = ground_truths(events, scenes)
    errors = np.atleast_1d(angular_distance(directions, gt))
    hits = np.array([
        hit_test(d, angular_extent(*target_and_pose(scenes, e.use_case, e.target_id, e.pose_id)),
                 tol_yaw, tol_pitch)
        for d, e in zip(directions, events)
    ], dtype=bool)
    return errors, hits


def compute_metrics(preds: Sequence[tuple[np.ndarray, ReferencingEvent]], scenes: Optional[dict] = None,
                    keys: Optional[dict] = None) -> MetricsReport:
    if not preds:
        raise InvalidInput("no predictions to score")
    dirs = np.array([d for d, _ in preds], dtype=np.float64)
    errors, hits = score(dirs, [e for _, e in preds], scenes)
    return metrics_from_arrays(errors, hits, keys)


# ------------------------------------------------------------------ LOSO

@dataclass(frozen=True)
class ModelBuilder:
    """Picklable factory so folds can run in worker processes."""

    kind: str = "fusion"
    modalities: tuple[str, ...] = MODALITIES
    width: Optional[int] = None

    def __call__(self, seed: int):
        if self.kind == "case":
            return build_case_model(self.width or 64, seed, self.modalities)
        if self.kind == "fusion":
            return build_fusion_model(self.modalities, self.width or 128, seed)
        raise InvalidConfig(f"unknown model kind {self.kind!r}")


@dataclass
class FoldResult:
    test_subject: str
    val_subject: str
    metrics: MetricsReport
    errors: np.ndarray
    hits: np.ndarray
    directions: np.ndarray
    best_epoch: int
    history: list


@dataclass
class CVResult:
    folds: list[FoldResult]
    aggregate: MetricsReport
    keys: dict = field(default_factory=dict)


@dataclass
class CaseFold:
    test_subject: str
    val_subject: str
    accuracy: float
    n: int
    probabilities: np.ndarray
    labels: np.ndarray


@dataclass
class CaseCVResult:
    folds: list[CaseFold]
    accuracy: float
    n: int


def fold_plan(subjects: Sequence[str]) -> list[tuple[str, str]]:
    """Fold i tests subject i and validates on the next subject (cyclically)."""
    subjects = sorted(subjects)
    if len(subjects) < 3:
        raise InvalidConfig(f"leave-one-subject-out needs at least 3 subjects, got {len(subjects)}")
    return [(s, subjects[(i + 1) % len(subjects)]) for i, s in enumerate(subjects)]


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _prepared(events: Sequence[ReferencingEvent]) -> list[ReferencingEvent]:
    return [interpolate_missing(e) for e in events]


def _split(events, subjects) -> list[ReferencingEvent]:
    subjects = set(subjects)
    return [e for e in events if e.subject_id in subjects]


def _run_fusion_fold(args) -> FoldResult:
    fold, test_s, val_s, train_ev, val_ev, test_ev, builder, config, scenes = args
    assert not ({e.subject_id for e in train_ev} & ({val_s, test_s})), "subject leakage"
    seed = _fold_seed(config.seed, fold)
    model = builder(seed)
    res = train(model, train_ev, val_ev, TrainConfig(**{**config.__dict__, "seed": seed}), scenes)
    dirs = predict_direction(model, test_ev)
    errors, hits = score(dirs, test_ev, scenes)
    metrics = metrics_from_arrays(errors, hits, {"subject": test_s})
    return FoldResult(test_s, val_s, metrics, errors, hits, dirs, res.best_epoch, res.history)


def _run_case_fold(args) -> CaseFold:
    fold, test_s, val_s, train_ev, val_ev, test_ev, builder, config, _ = args
    seed = _fold_seed(config.seed, fold)
    model = builder(seed)
    train(model, train_ev, val_ev, TrainConfig(**{**config.__dict__, "seed": seed}))
    probs = case_probabilities(model, test_ev)
    labels = np.array([e.use_case == ENVIRONMENT for e in test_ev])
    acc = float(np.mean((probs >= 0.5) == labels))
    return CaseFold(test_s, val_s, acc, len(test_ev), probs, labels)


def _map(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _fold_tasks(train_pool, test_pool, builder, config, scenes):
    subjects = sorted({e.subject_id for e in train_pool} & {e.subject_id for e in test_pool})
    tasks = []
    for i, (test_s, val_s) in enumerate(fold_plan(subjects)):
        train_ev = [e for e in train_pool if e.subject_id not in (test_s, val_s)]
        val_ev = _split(train_pool, [val_s])
        test_ev = _split(test_pool, [test_s])
        tasks.append((i, test_s, val_s, train_ev, val_ev, test_ev, builder, config, scenes))
    return tasks


def _collect(folds: list[FoldResult], keys: dict) -> CVResult:
    errors = np.concatenate([f.errors for f in folds])
    hits = np.concatenate([f.hits for f in folds])
    return CVResult(folds, metrics_from_arrays(errors, hits, keys), dict(keys))


def loso_cv(dataset: Dataset, builder: Callable = ModelBuilder(), config: TrainConfig = TrainConfig(),
            scenes: Optional[dict] = None, jobs: int = 1, keys: Optional[dict] = None) -> CVResult:
    """Leave-one-subject-out cross-validation of a fusion model."""
    scenes = scenes or default_scenes()
    events = _prepared(dataset.events)
    tasks = _fold_tasks(events, events, builder, config, scenes)
    return _collect(_map(_run_fusion_fold, tasks, jobs), keys or {})


def loso_case(dataset: Dataset, builder: Callable = ModelBuilder("case"), config: TrainConfig = TrainConfig(),
              jobs: int = 1) -> CaseCVResult:
    """Leave-one-subject-out accuracy of the inside/outside classifier."""
    events = _prepared(dataset.events)
    folds = _map(_run_case_fold, _fold_tasks(events, events, builder, config, None), jobs)
    n = sum(f.n for f in folds)
    return CaseCVResult(folds, sum(f.accuracy * f.n for f in folds) / n, n)


def modality_subsets(modalities=MODALITIES) -> list[tuple[str, ...]]:
    mods = canonical_modalities(modalities)
    return [canonical_modalities(c) for k in range(1, len(mods) + 1) for c in combinations(mods, k)]


def ablation(dataset: Dataset, modality_sets: Optional[Sequence] = None, width: Optional[int] = None,
             config: TrainConfig = TrainConfig(), scenes: Optional[dict] = None,
             jobs: int = 1) -> dict[tuple[str, ...], CVResult]:
    """One LOSO run per modality subset (all seven by default)."""
    sets = modality_subsets() if modality_sets is None else [canonical_modalities(m) for m in modality_sets]
    return {
        mods: loso_cv(dataset, ModelBuilder("fusion", mods, width), config, scenes, jobs,
                      {"modalities": "+".join(mods)})
        for mods in sets
    }


def cross_dataset(train_data: Dataset, test_data: Dataset, builder: Callable = ModelBuilder(),
                  config: TrainConfig = TrainConfig(), scenes: Optional[dict] = None, jobs: int = 1,
                  keys: Optional[dict] = None) -> CVResult:
    """Train on one dataset and test on another, subject-disjoint per fold.

    Fold i trains on ``train_data`` without subjects i and i+1, validates on
    subject i+1 of ``train_data`` and tests on subject i of ``test_data``.
    """
    if not len(train_data) or not len(test_data):
        raise InvalidConfig("cross-dataset evaluation needs both datasets")
    scenes = scenes or default_scenes()
    tasks = _fold_tasks(_prepared(train_data.events), _prepared(test_data.events), builder, config, scenes)
    return _collect(_map(_run_fusion_fold, tasks, jobs), keys or {})


def per_driver_report(cv: CVResult) -> list[dict]:
    return [f.metrics.to_dict() for f in sorted(cv.folds, key=lambda f: f.test_subject)]


# ------------------------------------------------------------------ measurement analysis

_DIRECTION_SERIES = (("finger", 1), ("eye", 3), ("head", 5))


def _direction(feature: int, value: np.ndarray) -> np.ndarray:
    return euler_array_to_direction(value) if feature == 5 else value


def measurement_analysis(dataset: Dataset, scenes: Optional[dict] = None) -> list[dict]:
    """Mean/std of the unsigned yaw and pitch deviation from ground truth at the trigger frame.

    Rows per (use case, modality); events where the modality was not tracked
    at the trigger are skipped.
    """
    if not len(dataset):
        raise InvalidInput("empty dataset")
    scenes = scenes or default_scenes()
    rows = []
    for uc in USE_CASES:
        events = [e for e in dataset.events if e.use_case == uc]
        if not events:
            continue
        gy, gp = yaw_pitch(ground_truths(events, scenes))
        for name, f in _DIRECTION_SERIES:
            keep = np.array([e.available[e.woz_index, f] for e in events])
            if not keep.any():
                continue
            vecs = np.array([_direction(f, e.features[e.woz_index, f]) for e, k in zip(events, keep) if k])
            y, p = yaw_pitch(vecs)
            dy = np.abs((y - gy[keep] + 180.0) % 360.0 - 180.0)
            dp = np.abs(p - gp[keep])
            rows.append({"use_case": uc, "modality": name, "n": int(keep.sum()),
                         "yaw_mean": float(dy.mean()), "yaw_std": float(dy.std()),
                         "pitch_mean": float(dp.mean()), "pitch_std": float(dp.std())})
    return rows


HIST_EDGES = np.arange(-90.0, 91.0, 1.0)


@dataclass
class Histogram:
    use_case: str
    series: str
    counts: np.ndarray
    mean: float
    std: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def pitch_histogram(pitches: np.ndarray) -> np.ndarray:
    """Counts in 1 deg bins ``[k, k+1)`` over [-90, 90]; +90 falls in the last bin."""
    idx = np.clip(np.floor(np.asarray(pitches) + 90.0).astype(int), 0, len(HIST_EDGES) - 2)
    return np.bincount(idx, minlength=len(HIST_EDGES) - 1)


def direction_histograms(dataset: Dataset) -> list[Histogram]:
    """Pitch distributions at the trigger frame per use case.

    Series: finger-tip position (seen from the frame origin) and the finger,
    eye and head directions.
    """
    if not len(dataset):
        raise InvalidInput("empty dataset")
    out = []
    series = (("finger_position", 0), ("finger_direction", 1), ("eye_direction", 3), ("head_direction", 5))
    for uc in USE_CASES:
        events = [e for e in dataset.events if e.use_case == uc]
        if not events:
            continue
        for name, f in series:
            vals = [_direction(f, e.features[e.woz_index, f]) for e in events if e.available[e.woz_index, f]]
            if not vals:
                continue
            _, pitch = yaw_pitch(np.array(vals))
            pitch = np.atleast_1d(pitch)
            out.append(Histogram(uc, name, pitch_histogram(pitch), float(pitch.mean()), float(pitch.std())))
    return out


# ------------------------------------------------------------------ output

def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def write_csv(path, rows: list[dict]) -> None:
    Path(path).write_text(_csv(rows))


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def histogram_rows(hists: Sequence[Histogram]) -> list[dict]:
    return [
        {"use_case": h.use_case, "series": h.series, "bin_start": int(HIST_EDGES[i]), "count": int(c)}
        for h in hists for i, c in enumerate(h.counts)
    ]


def cv_summary(cv: CVResult) -> dict:
    return {**cv.aggregate.to_dict(), "folds": per_driver_report(cv)}


def write_cv(out_dir, name: str, cv: CVResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"{name}_folds.csv", per_driver_report(cv))
    write_json(out / f"{name}.json", cv_summary(cv))


def case_summary(res: CaseCVResult) -> dict:
    return {"accuracy": res.accuracy, "n": res.n,
            "folds": [{"subject": f.test_subject, "n": f.n, "accuracy": f.accuracy} for f in res.folds]}


# ------------------------------------------------------------------ benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    events_per_use_case: int = 450
    n_subjects: int = 11
    fusion_width: int = 8
    case_width: int = 8
    epochs: int = 50
    jobs: int = 1


def run_benchmark(cfg: BenchmarkConfig, out_dir=None, log: Callable[[str], None] = lambda s: None) -> dict:
    """Desk-scale end-to-end run: case accuracy, modality ordering and cross-dataset transfer.

    Returns a JSON-ready summary; with ``out_dir`` the per-experiment CSV and
    JSON files are written there as well.
    """
    from .simulator import SimConfig, generate_dataset

    sim = SimConfig(seed=cfg.seed, n_subjects=cfg.n_subjects,
                    cockpit_events=cfg.events_per_use_case, environment_events=cfg.events_per_use_case)
    data = generate_dataset(sim)
    by_case = {uc: data.filter(use_case=uc) for uc in USE_CASES}
    train_cfg = TrainConfig(epochs=cfg.epochs, seed=cfg.seed)
    scenes = default_scenes()
    summary: dict = {"config": dict(cfg.__dict__)}

    log("case classifier")
    case = loso_case(data, ModelBuilder("case", MODALITIES, cfg.case_width), train_cfg, cfg.jobs)
    summary["case"] = case_summary(case)

    single = [("finger",), ("eye",), ("head",)]
    results: dict = {}
    for uc in USE_CASES:
        for mods in [MODALITIES] + single:
            log(f"{uc} {'+'.join(mods)}")
            results[(uc, mods)] = loso_cv(by_case[uc], ModelBuilder("fusion", mods, cfg.fusion_width),
                                          train_cfg, scenes, cfg.jobs, {"use_case": uc, "modalities": "+".join(mods)})
    cross = {}
    for src, dst in ((COCKPIT, ENVIRONMENT), (ENVIRONMENT, COCKPIT)):
        log(f"{src} -> {dst}")
        cross[(src, dst)] = cross_dataset(by_case[src], by_case[dst], ModelBuilder("fusion", MODALITIES, cfg.fusion_width),
                                          train_cfg, scenes, cfg.jobs, {"train": src, "test": dst})

    summary["ablation"] = {
        uc: {"+".join(m): cv_summary(results[(uc, m)]) for m in [MODALITIES] + single} for uc in USE_CASES
    }
    summary["cross"] = {f"{s}->{d}": cv_summary(cv) for (s, d), cv in cross.items()}

    mad = {k: v.aggregate.mad for k, v in results.items()}
    best_single = {uc: min(mad[(uc, m)] for m in single) for uc in USE_CASES}
    checks = {
        "case_accuracy": case.accuracy >= 0.95,
        "fusion_vs_single_cockpit": mad[(COCKPIT, MODALITIES)] <= best_single[COCKPIT],
        "fusion_vs_single_environment": mad[(ENVIRONMENT, MODALITIES)] <= best_single[ENVIRONMENT],
        "environment_eye_vs_finger": mad[(ENVIRONMENT, ("eye",))] < mad[(ENVIRONMENT, ("finger",))],
        "cockpit_finger_vs_eye": mad[(COCKPIT, ("finger",))] < mad[(COCKPIT, ("eye",))],
        "cross_cockpit_to_environment": cross[(COCKPIT, ENVIRONMENT)].aggregate.mad
        >= 2.0 * mad[(ENVIRONMENT, MODALITIES)],
        "cross_environment_to_cockpit": cross[(ENVIRONMENT, COCKPIT)].aggregate.mad
        >= 2.0 * mad[(COCKPIT, MODALITIES)],
    }
    summary["checks"] = checks

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "case.json", summary["case"])
        for (uc, mods), cv in results.items():
            write_cv(out, f"{uc}_{'+'.join(mods)}", cv)
        for (s, d), cv in cross.items():
            write_cv(out, f"cross_{s}_to_{d}", cv)
        write_json(out / "summary.json", summary)
    return summary
