"""Command-line entry point: generate, ingest, train, eval, score, analyze, experiments.

Every command takes explicit paths and writes a ``run_manifest.json`` next to
its outputs recording the command, the effective configuration, sha256 of
every input file, the seed and the tool version. Nothing time-dependent is
recorded, so identical inputs give byte-identical outputs.

Exit codes: 0 success, 2 invalid input, 3 AUC undefined, 4 train/test leakage.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .datamodel import DataFormatError, read_dataset, validate_dataset, write_dataset
from .evaluation import (
    AUCUndefinedError,
    LeakageError,
    activity_score_correlation,
    evaluate,
    score_timeseries,
    write_timeseries_csv,
)
from .ingest import SplitSpec, build_all_windows, load_manifest_samples, split_accounts, write_manifest
from .synthgen import CalibrationError, SynthConfig, generate, write_ground_truth
from .trainer import TrainConfig, grid_search, load_model, parse_key_values, save_model, train

log = logging.getLogger("groupscore")

# (row id, table, label, aggregator, time deltas, baseline) in table order
EXPERIMENTS = (
    ("baseline1", "individual", "Baseline 1: individual loss", "mean", False, 1),
    ("baseline2", "individual", "Baseline 2: activity frequencies", "m2m_gru_attn", False, 2),
    ("exp1", "aggregation", "FNN", "fnn", False, None),
    ("exp2", "aggregation", "Many-to-one GRU", "m2o_gru", False, None),
    ("exp3", "aggregation", "Many-to-many GRU + attention", "m2m_gru_attn", False, None),
    ("exp4", "aggregation", "Max probability", "max_prob", False, None),
    ("exp5", "aggregation", "Noisy-or", "noisy_or", False, None),
    ("exp6", "aggregation", "Geometric mean", "geo_mean", False, None),
    ("exp7", "time_deltas", "FNN + time deltas", "fnn", True, None),
    ("exp8", "time_deltas", "Many-to-one GRU + time deltas", "m2o_gru", True, None),
    ("exp9", "time_deltas", "Many-to-many GRU + attention + time deltas", "m2m_gru_attn", True, None),
)


class CommandError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = sha256_file(f)
    return out


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs, seed, outputs) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": _input_hashes(inputs),
        "seed": seed,
        "version": __version__,
        "outputs": sorted(str(Path(o).relative_to(out_dir)) for o in outputs),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{p}: config file not found")
    try:
        return parse_key_values(p.read_text(encoding="utf-8"), str(p))
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def _load_dataset(directory):
    d = Path(directory)
    if not d.is_dir():
        raise CommandError(f"{d}: dataset directory not found")
    ds = read_dataset(d)
    report = validate_dataset(ds.events, ds.labels, ds.individuals, ds.accounts)
    for issue in report.issues:
        log.warning("%s: %s", d, issue)
    if report.fatal:
        first = next(i for i in report.issues if i.fatal)
        raise CommandError(f"{d}: dataset failed validation: {first.kind} {first.subject}: {first.detail}")
    return ds


def _train_config(args) -> TrainConfig:
    values = _read_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "aggregator", None):
        values["aggregator"] = args.aggregator
    if getattr(args, "time_deltas", False):
        values["use_time_deltas"] = True
    if getattr(args, "baseline", None):
        values["baseline"] = args.baseline
    try:
        return TrainConfig.from_mapping(values)
    except ValueError as exc:
        raise CommandError(f"{args.config or '<flags>'}: {exc}") from None


def _guard_not_test(path: Path, header: dict) -> None:
    """Training and selection must never see held-out data."""
    if header.get("split") == "test" or "test" in path.name.lower():
        raise CommandError(f"{path}: refusing to train on a test manifest")


def _workers(args) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


def _validation_split(samples, fraction: float, seed: int):
    accounts = sorted({s.account_id for s in samples})
    fit_ids, val_ids = split_accounts(accounts, SplitSpec(fraction, seed))
    val_ids = set(val_ids)
    return [s for s in samples if s.account_id not in val_ids], [s for s in samples if s.account_id in val_ids]


def _fit(samples, cfg: TrainConfig, grid: bool, validation_fraction: float):
    if not grid:
        return train(samples, cfg), None
    fit, val = _validation_split(samples, validation_fraction, cfg.seed)
    result = grid_search(fit, val, cfg)
    return result.best, result


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> None:
    values = _read_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = SynthConfig.from_mapping(values)
        ds, truth = generate(cfg)
    except (ValueError, CalibrationError) as exc:
        raise CommandError(f"{args.config or '<defaults>'}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = list(write_dataset(ds, out).values())
    truth_path = out / "ground_truth.csv"
    write_ground_truth(truth, truth_path)
    written.append(truth_path)
    inputs = [args.config] if args.config else []
    write_run_manifest(out, "generate", cfg.as_dict(), inputs, cfg.seed, written)
    print(f"wrote {len(ds.accounts)} accounts, {len(ds.events)} events to {out}")


def cmd_ingest(args) -> None:
    ds = _load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    try:
        spec = SplitSpec(args.test_fraction, seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    account_ids = sorted({a.account_id for a in ds.accounts})
    train_ids, test_ids = split_accounts(account_ids, spec)
    windows = build_all_windows(ds, None, args.window_len, args.compress, _workers(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = str(Path(args.data).resolve())
    written = []
    for split, ids in (("train", train_ids), ("test", test_ids)):
        samples = [s for acc in ids for s in windows.get(acc, [])]
        header = {
            "data": data_dir,
            "split": split,
            "accounts": ids,
            "window_len": args.window_len,
            "compress": args.compress,
            "test_fraction": args.test_fraction,
            "seed": seed,
        }
        path = out / f"{split}.jsonl"
        write_manifest(path, samples, header)
        written.append(path)
        n_pos = sum(s.label for s in samples)
        print(f"{split}: {len(ids)} accounts, {len(samples)} windows, {n_pos} positive")
    config = {"test_fraction": args.test_fraction, "window_len": args.window_len, "compress": args.compress}
    write_run_manifest(out, "ingest", config, [args.data], seed, written)


def cmd_train(args) -> None:
    path = Path(args.data)
    if not path.is_file():
        raise CommandError(f"{path}: sample manifest not found")
    header, samples = load_manifest_samples(path)
    _guard_not_test(path, header)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    epoch_dir = out / "epochs"

    def checkpoint_epoch(epoch, scorer, loss):
        if args.epoch_checkpoints:
            save_model(epoch_dir / f"epoch_{epoch + 1:03d}", scorer, {"epoch": epoch + 1})

    try:
        if args.grid:
            result, grid = _fit(samples, cfg, True, args.validation_fraction)
        else:
            result, grid = train(samples, cfg, epoch_hook=checkpoint_epoch), None
    except (ValueError, AUCUndefinedError) as exc:
        raise CommandError(f"{path}: {exc}", 3 if isinstance(exc, AUCUndefinedError) else 2) from None

    cfg = result.config
    extra = {
        "train_config": cfg.to_dict(),
        "train_accounts": sorted({s.account_id for s in samples}),
        "data": header.get("data"),
    }
    save_model(out / "model", result.scorer, extra)
    written += [out / "model" / n for n in ("params.manifest", "params.bin", "model.json")]
    if args.epoch_checkpoints and not args.grid:
        for d in sorted(epoch_dir.iterdir()):
            written += [d / n for n in ("params.manifest", "params.bin", "model.json")]
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "loss"))
        writer.writerows((i + 1, repr(v)) for i, v in enumerate(result.loss_curve))
    written += [out / "config.txt", out / "loss_curve.csv"]
    if grid is not None:
        with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("activity_hidden", "weight_penalty", "validation_auc"))
            writer.writerows((h, w, repr(a)) for h, w, a in grid.table)
        written.append(out / "grid.csv")
    write_run_manifest(out, "train", cfg.to_dict(), [path, header["data"]], cfg.seed, written)
    print(f"trained {cfg.aggregator} on {len(samples)} windows; final loss {result.loss_curve[-1]:.5f}")


def cmd_eval(args) -> None:
    path = Path(args.data)
    if not path.is_file():
        raise CommandError(f"{path}: sample manifest not found")
    scorer, model_header = load_model(args.model)
    header, samples = load_manifest_samples(path)
    seed = 0 if args.seed is None else args.seed
    try:
        report = evaluate(scorer, samples, model_header.get("train_accounts"), args.bootstrap, seed)
    except AUCUndefinedError as exc:
        raise CommandError(f"{path}: {exc}", 3) from None
    except LeakageError as exc:
        raise CommandError(f"{path}: {exc}", 4) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_per_week_csv(out / "per_week_auc.csv")
    model_files = [Path(args.model) / n for n in ("params.manifest", "params.bin", "model.json")]
    write_run_manifest(
        out,
        "eval",
        {"bootstrap": args.bootstrap},
        [path, *model_files],
        seed,
        [out / "report.json", out / "per_week_auc.csv"],
    )
    ci = f" 95% CI [{report.ci95[0]:.3f}, {report.ci95[1]:.3f}]" if report.ci95 else ""
    print(f"pooled AUC {report.pooled_auc:.4f}{ci}; mean weekly AUC {report.mean_weekly_auc}")


def _scoring_samples(args):
    ds = _load_dataset(args.data)
    accounts = None if args.account in (None, "all") else [args.account]
    if accounts and accounts[0] not in {a.account_id for a in ds.accounts}:
        raise CommandError(f"{args.data}: unknown account {args.account!r}")
    windows = build_all_windows(ds, accounts, workers=_workers(args))
    return ds, [s for ws in windows.values() for s in ws]


def cmd_score(args) -> None:
    scorer, _ = load_model(args.model)
    _, samples = _scoring_samples(args)
    records = score_timeseries(scorer, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_timeseries_csv(records, out / "scores.csv")
    model_files = [Path(args.model) / n for n in ("params.manifest", "params.bin", "model.json")]
    write_run_manifest(
        out, "score", {"account": args.account or "all"}, [args.data, *model_files], None, [out / "scores.csv"]
    )
    print(f"wrote {len(records)} weekly scores to {out / 'scores.csv'}")


def cmd_analyze(args) -> None:
    scorer, _ = load_model(args.model)
    ds, samples = _scoring_samples(args)
    records = score_timeseries(scorer, samples)
    report = activity_score_correlation(records, ds.events, ds.labels, ds.epoch_week(), args.min_weeks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "correlation.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    model_files = [Path(args.model) / n for n in ("params.manifest", "params.bin", "model.json")]
    write_run_manifest(
        out, "analyze", {"min_weeks": args.min_weeks}, [args.data, *model_files], None, [out / "correlation.json"]
    )
    print(
        f"r(converted)={report.r_converted} r(not converted)={report.r_not_converted} "
        f"interaction p={report.interaction_p_value}"
    )


def _run_experiment(job):
    row, train_samples, test_samples, cfg, grid, validation_fraction, bootstrap = job
    result, _ = _fit(train_samples, cfg, grid, validation_fraction)
    report = evaluate(result.scorer, test_samples, {s.account_id for s in train_samples}, bootstrap, cfg.seed)
    return row, result.config, report


def cmd_experiments(args) -> None:
    ds = _load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    base = _train_config(args)
    train_ids, test_ids = split_accounts(sorted(a.account_id for a in ds.accounts), SplitSpec(args.test_fraction, seed))
    windows = build_all_windows(ds, workers=_workers(args))
    train_samples = [s for a in train_ids for s in windows.get(a, [])]
    test_samples = [s for a in test_ids for s in windows.get(a, [])]
    if not any(s.label for s in test_samples) or all(s.label for s in test_samples):
        raise CommandError(f"{args.data}: AUC undefined: the test split has a single class", 3)
    jobs = []
    for row in EXPERIMENTS:
        _, _, _, agg, deltas, baseline = row
        cfg = replace(base, aggregator=agg, use_time_deltas=deltas, baseline=baseline)
        jobs.append((row, train_samples, test_samples, cfg, args.grid, args.validation_fraction, args.bootstrap))
    workers = min(_workers(args), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_experiment, jobs))
    else:
        results = [_run_experiment(j) for j in jobs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "experiments.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            (
                "id",
                "table",
                "model",
                "aggregator",
                "time_deltas",
                "activity_hidden",
                "weight_penalty",
                "pooled_auc",
                "ci_low",
                "ci_high",
                "mean_weekly_auc",
            )
        )
        for (rid, tbl, label, agg, deltas, _), cfg, rep in results:
            lo, hi = rep.ci95 if rep.ci95 else ("", "")
            writer.writerow(
                (
                    rid,
                    tbl,
                    label,
                    agg,
                    int(deltas),
                    cfg.activity_hidden,
                    cfg.weight_penalty,
                    repr(rep.pooled_auc),
                    repr(lo) if lo != "" else "",
                    repr(hi) if hi != "" else "",
                    "" if rep.mean_weekly_auc is None else repr(rep.mean_weekly_auc),
                )
            )
            print(f"{rid:10s} {label:45s} AUC {rep.pooled_auc:.4f}")
    config = base.to_dict()
    config.update(test_fraction=args.test_fraction, grid=args.grid, bootstrap=args.bootstrap)
    write_run_manifest(out, "experiments", config, [args.data], seed, [table])


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_help, config=True, seed=True):
        p.add_argument("--data", required=True, help=data_help)
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", help="key=value configuration file")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (overrides the config file)")
        p.add_argument("--workers", type=int, default=0, help="worker processes (default: all cores)")

    def model_flags(p):
        p.add_argument("--aggregator", help="fnn, m2o_gru, m2m_gru_attn, max_prob, noisy_or or geo_mean")
        p.add_argument("--time-deltas", action="store_true", help="feed inter-activity gaps to the activity layer")
        p.add_argument("--baseline", type=int, choices=(1, 2), help="train a comparison model instead")
        p.add_argument("--grid", action="store_true", help="select hidden size and weight penalty on a validation split")
        p.add_argument("--validation-fraction", type=float, default=0.15)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=0, help="accepted for symmetry; generation is serial")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="build rolling windows and the train/test split")
    common(p, "dataset directory", config=False)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--window-len", type=int, default=4)
    p.add_argument("--compress", action="store_true", help="skip inactive weeks per individual")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit a model on a train manifest")
    common(p, "train sample manifest (.jsonl)")
    model_flags(p)
    p.add_argument("--epoch-checkpoints", action="store_true", help="also save a checkpoint after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AUC report for a checkpoint on a test manifest")
    common(p, "test sample manifest (.jsonl)", config=False)
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--bootstrap", type=int, default=1000, help="account-level bootstrap resamples (0 disables)")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (
        ("score", cmd_score, "weekly account and individual score time series"),
        ("analyze", cmd_analyze, "correlation between weekly activity volume and score"),
    ):
        p = sub.add_parser(name, help=text)
        common(p, "dataset directory", config=False, seed=False)
        p.add_argument("--model", required=True, help="checkpoint directory")
        if name == "score":
            p.add_argument("--account", default="all", help="account id, or 'all'")
        else:
            p.add_argument("--account", default="all", help=argparse.SUPPRESS)
            p.add_argument("--min-weeks", type=int, default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("experiments", help="train and evaluate the nine models and two baselines")
    common(p, "dataset directory")
    model_flags(p)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(func=cmd_experiments)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
