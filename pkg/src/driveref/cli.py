"""Command-line entry point: ``driveref <command> [flags]``.

Every command accepts ``--config FILE`` (JSON); explicit flags win over the
file. Exit codes: 0 ok, 1 I/O error, 2 usage/config error, 3 weight-store error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import DrivRefError, StoreError
from .events import MODALITIES, Dataset, canonical_modalities, interpolate_missing, load_dataset, save_dataset
from .geometry import yaw_pitch
from .scene import USE_CASES, default_scenes, load_scene

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_STORE = 0, 1, 2, 3

DEFAULTS = {
    "seed": None,
    "out": ".",
    "scene": [],
    "dataset": None,
    "case": None,
    "modalities": ",".join(MODALITIES),
    "scale": "desk",
    "jobs": 1,
    "store": "weights",
    "epochs": 50,
    "width": None,
    "events": None,
    "train_case": None,
    "test_case": None,
    "threshold": 0.5,
}


class ConfigError(DrivRefError):
    pass


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scene", action="append", help="scene JSON file (repeat for both use cases)")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="random seed")
    if "dataset" in names:
        p.add_argument("--dataset", help="dataset JSONL file")
    if "case" in names:
        p.add_argument("--case", choices=("cockpit", "environment", "auto"), help="use case; auto = classifier")
    if "modalities" in names:
        p.add_argument("--modalities", help="comma-separated subset of finger,eye,head")
    if "jobs" in names:
        p.add_argument("--jobs", type=int, help="parallel folds (default 1)")
    if "train" in names:
        p.add_argument("--epochs", type=int, help="training epochs (default 50)")
        p.add_argument("--width", type=int, help="conv kernels per layer (default 128 fusion, 64 case)")
    if "store" in names:
        p.add_argument("--store", help="weight store directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driveref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _common(p, "seed")
    p.add_argument("--scale", choices=("paper", "desk"), help="event counts (default desk)")

    p = sub.add_parser("train", help="train a model into the weight store")
    _common(p, "seed", "dataset", "case", "modalities", "train", "store")

    p = sub.add_parser("evaluate", help="leave-one-subject-out evaluation")
    _common(p, "seed", "dataset", "case", "modalities", "train", "jobs")

    p = sub.add_parser("ablate", help="LOSO for all seven modality subsets")
    _common(p, "seed", "dataset", "case", "train", "jobs")

    p = sub.add_parser("cross", help="train on one use case, test on another")
    _common(p, "seed", "dataset", "train", "jobs")
    p.add_argument("--train-case", dest="train_case", choices=("cockpit", "environment", "combined"))
    p.add_argument("--test-case", dest="test_case", choices=("cockpit", "environment"))

    p = sub.add_parser("analyze", help="measurement statistics and pitch histograms")
    _common(p, "dataset")

    p = sub.add_parser("infer", help="two-stage prediction for recorded events")
    _common(p, "case", "store")
    p.add_argument("--events", help="event JSONL file")
    p.add_argument("--threshold", type=float, help="classifier decision threshold (default 0.5)")

    p = sub.add_parser("benchmark", help="desk-scale end-to-end benchmark")
    _common(p, "seed", "jobs", "train")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from ``--config`` and then from the defaults."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) in (None, []):
            setattr(args, key, cfg.get(key, default))
    args.file_config = cfg
    return args


def _scenes(args) -> dict:
    scenes = default_scenes()
    for path in args.scene or []:
        if not Path(path).is_file():
            raise ConfigError(f"scene file not found: {path}")
        scene = load_scene(path)
        scenes[scene.use_case] = scene
    return scenes


def _dataset(args) -> Dataset:
    if not args.dataset:
        raise ConfigError("--dataset is required")
    return load_dataset(args.dataset)


def _modalities(args) -> tuple[str, ...]:
    mods = [m.strip() for m in str(args.modalities).split(",") if m.strip()]
    try:
        return canonical_modalities(mods)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _need_seed(args) -> int:
    if args.seed is None:
        raise ConfigError("--seed is required for this command")
    return int(args.seed)


def _train_config(args):
    from .models import TrainConfig
    return TrainConfig(epochs=int(args.epochs), seed=int(args.seed or 0))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    from .simulator import DESK_COUNTS, PAPER_COUNTS, config_from_dict, config_to_dict, generate_dataset

    seed = _need_seed(args)
    sim_raw = dict(args.file_config.get("simulator", {}))
    counts = PAPER_COUNTS if args.scale == "paper" else DESK_COUNTS
    sim_raw.setdefault("cockpit_events", counts["cockpit"])
    sim_raw.setdefault("environment_events", counts["environment"])
    sim_raw["seed"] = seed
    config = config_from_dict(sim_raw)
    scenes = _scenes(args)
    data = generate_dataset(config, scenes)
    if args.scene:
        data.scene_ref = "+".join(str(s) for s in args.scene)
    out = _out(args)
    save_dataset(data, out / "dataset.jsonl")
    manifest = {
        "seed": seed,
        "config_hash": config.digest(),
        "config": config_to_dict(config),
        "counts": {uc: sum(e.use_case == uc for e in data.events) for uc in USE_CASES},
        "subjects": data.subjects(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(data)} events to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .evaluation import write_csv
    from .models import CASE_KEY, WeightStore, build_case_model, build_fusion_model, train

    seed = _need_seed(args)
    if args.case is None:
        raise ConfigError("--case is required")
    scenes = _scenes(args)
    data = _dataset(args)
    if args.case == "auto":
        model = build_case_model(args.width or 64, seed)
        key = CASE_KEY
    else:
        data = data.filter(use_case=args.case)
        model = build_fusion_model(_modalities(args), args.width or 128, seed)
        key = args.case
    subjects = data.subjects()
    if len(subjects) < 2:
        raise ConfigError("training needs events from at least two subjects")
    val_subject = subjects[-1]
    events = [interpolate_missing(e) for e in data.events]
    train_ev = [e for e in events if e.subject_id != val_subject]
    val_ev = [e for e in events if e.subject_id == val_subject]
    res = train(model, train_ev, val_ev, _train_config(args), scenes)
    store = WeightStore(args.store)
    meta = {"seed": seed, "epochs": int(args.epochs), "best_epoch": res.best_epoch,
            "val_loss": res.best_val_loss, "val_subject": val_subject, "data_fingerprint": res.data_fingerprint}
    entry = store.save(key, model, meta)
    write_csv(entry / "history.csv", res.history)
    if args.out and args.out != ".":
        write_csv(_out(args) / "history.csv", res.history)
    print(f"saved {model.kind} model ({model.param_count} parameters) to {entry}; "
          f"best epoch {res.best_epoch}, val loss {res.best_val_loss:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import ModelBuilder, case_summary, loso_case, loso_cv, write_cv, write_json

    _need_seed(args)
    if args.case is None:
        raise ConfigError("--case is required")
    scenes = _scenes(args)
    data = _dataset(args)
    out = _out(args)
    if args.case == "auto":
        res = loso_case(data, ModelBuilder("case", MODALITIES, args.width or 64), _train_config(args), args.jobs)
        write_json(out / "case_loso.json", case_summary(res))
        print(f"case accuracy {res.accuracy:.4f} over {res.n} events")
        return EXIT_OK
    mods = _modalities(args)
    cv = loso_cv(data.filter(use_case=args.case), ModelBuilder("fusion", mods, args.width or 128),
                 _train_config(args), scenes, args.jobs, {"use_case": args.case, "modalities": "+".join(mods)})
    write_cv(out, f"loso_{args.case}_{'+'.join(mods)}", cv)
    a = cv.aggregate
    print(f"{args.case} {'+'.join(mods)}: MAD {a.mad:.3f} deg, Std.AD {a.std_ad:.3f} deg, hit rate {a.hit_rate:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import ablation, write_csv, write_json, cv_summary

    _need_seed(args)
    if args.case not in USE_CASES:
        raise ConfigError("--case must be cockpit or environment")
    scenes = _scenes(args)
    data = _dataset(args).filter(use_case=args.case)
    table = ablation(data, None, args.width or 128, _train_config(args), scenes, args.jobs)
    rows = [{"use_case": args.case, **cv.aggregate.to_dict()} for cv in table.values()]
    out = _out(args)
    write_csv(out / f"ablation_{args.case}.csv", rows)
    write_json(out / f"ablation_{args.case}.json", {"+".join(m): cv_summary(cv) for m, cv in table.items()})
    for r in rows:
        print(f"{r['modalities']:>16}: MAD {r['mad']:.3f} deg, hit rate {r['hit_rate']:.4f}")
    return EXIT_OK


def cmd_cross(args) -> int:
    from .evaluation import ModelBuilder, cross_dataset, write_cv

    _need_seed(args)
    if args.train_case is None or args.test_case is None:
        raise ConfigError("--train-case and --test-case are required")
    scenes = _scenes(args)
    data = _dataset(args)
    train_data = data if args.train_case == "combined" else data.filter(use_case=args.train_case)
    test_data = data.filter(use_case=args.test_case)
    cv = cross_dataset(train_data, test_data, ModelBuilder("fusion", MODALITIES, args.width or 128),
                       _train_config(args), scenes, args.jobs, {"train": args.train_case, "test": args.test_case})
    write_cv(_out(args), f"cross_{args.train_case}_to_{args.test_case}", cv)
    a = cv.aggregate
    print(f"{args.train_case} -> {args.test_case}: MAD {a.mad:.3f} deg, hit rate {a.hit_rate:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .evaluation import direction_histograms, histogram_rows, measurement_analysis, write_csv, write_json

    scenes = _scenes(args)
    data = _dataset(args)
    out = _out(args)
    rows = measurement_analysis(data, scenes)
    hists = direction_histograms(data)
    write_csv(out / "measurement.csv", rows)
    write_csv(out / "pitch_histograms.csv", histogram_rows(hists))
    write_json(out / "pitch_summary.json",
               [{"use_case": h.use_case, "series": h.series, "n": h.n, "mean": h.mean, "std": h.std} for h in hists])
    for r in rows:
        print(f"{r['use_case']:>11} {r['modality']:>6}: yaw {r['yaw_mean']:.2f}/{r['yaw_std']:.2f} "
              f"pitch {r['pitch_mean']:.2f}/{r['pitch_std']:.2f} (n={r['n']})")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import write_csv
    from .models import CASE_KEY, WeightStore, two_stage_predict

    if not args.events:
        raise ConfigError("--events is required")
    scenes = _scenes(args)
    data = load_dataset(args.events)
    store = WeightStore(args.store)
    force = None if args.case in (None, "auto") else args.case
    case_model = store.load(CASE_KEY, MODALITIES) if force is None else None
    rows = []
    for i, event in enumerate(data.events):
        r = two_stage_predict(case_model, store, interpolate_missing(event), scenes, force, args.threshold)
        yaw, pitch = (float(v) for v in yaw_pitch(r.direction))
        d = r.direction
        print(f"{i}\t{r.use_case}\tp_env={r.p_environment:.4f}\tdir={d[0]:.6f},{d[1]:.6f},{d[2]:.6f}\t"
              f"yaw={yaw:.2f}\tpitch={pitch:.2f}\ttarget={r.target_id}\thit={int(r.hit)}")
        rows.append({"index": i, "use_case": r.use_case, "p_environment": r.p_environment,
                     "x": d[0], "y": d[1], "z": d[2], "yaw": yaw, "pitch": pitch,
                     "target": r.target_id, "hit": int(r.hit)})
    if args.out and args.out != ".":
        write_csv(_out(args) / "predictions.csv", rows)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .evaluation import BenchmarkConfig, run_benchmark

    seed = _need_seed(args)
    kw = {"seed": seed, "jobs": int(args.jobs)}
    if args.width:
        kw.update(fusion_width=args.width, case_width=args.width)
    if args.epochs != DEFAULTS["epochs"]:
        kw["epochs"] = int(args.epochs)
    summary = run_benchmark(BenchmarkConfig(**kw), _out(args), log=lambda m: print(m, file=sys.stderr))
    for name, ok in summary["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "cross": cmd_cross,
    "analyze": cmd_analyze,
    "infer": cmd_infer,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolve(args)
        return COMMANDS[args.command](args)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STORE
    except (DrivRefError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
