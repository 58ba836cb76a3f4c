"""Command-line entry points.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import yaml

from .distill import SegmentSpec, run_direct_kd, run_pkd_chain, train_stage
from .evaluation import evaluate
from .experiment import (
    ConfigError,
    ExperimentConfig,
    _save_stage,
    dataset_for_seed,
    load_config,
    load_dataset,
    parse_config,
    run_experiment,
    split_validation,
)
from .features import SampleRecord, extract_spatial_features
from .flow import TvL1Params, flow_to_export, tv_l1_flow
from .formats import read_flow, read_frames, write_features, write_flow
from .model import SetrModel
from .synthetic import SyntheticSpec, generate_synthetic_dataset

log = logging.getLogger("setr_pkd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    return parse_config({})


def cmd_extract_flow(args) -> int:
    params = TvL1Params()
    if args.params:
        try:
            params = TvL1Params.from_dict(yaml.safe_load(Path(args.params).read_text()) or {})
        except (OSError, yaml.YAMLError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad TV-L1 parameters: {exc}") from exc
    seq = read_frames(args.input)
    if len(seq.frames) < 2:
        raise RuntimeError("need at least two frames to compute flow")
    exported = []
    for i, (a, b) in enumerate(zip(seq.frames[:-1], seq.frames[1:])):
        exported.append(flow_to_export(tv_l1_flow(a, b, params), args.clip))
        log.info("flow pair %d/%d", i + 1, len(seq.frames) - 1)
    write_flow(args.output, exported)
    return EXIT_OK


def cmd_featurize(args) -> int:
    flows = [q.dequantize() for q in read_flow(args.input)]
    feats = extract_spatial_features(flows)
    duration = args.duration if args.duration is not None else len(flows) / args.fps
    record = SampleRecord(args.sample_id, args.patient_id, args.label, duration, feats)
    write_features(args.output, record)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    raw = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        raw = raw.get("synthetic", raw)
    try:
        spec = SyntheticSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic_dataset(spec)
    with open(out / "index.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "patient_id", "label", "duration", "frames"])
        for r in records:
            write_features(out / f"{r.sample_id}.feat", r)
            writer.writerow([r.sample_id, r.patient_id, r.label, r.duration, r.frame_count])
    (out / "synthetic.yaml").write_text(yaml.safe_dump(asdict(spec), sort_keys=True))
    return EXIT_OK


def _train_val(cfg: ExperimentConfig, seed: int):
    records = dataset_for_seed(cfg, seed)
    return split_validation(records, cfg.val_fraction, seed, 0)


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    train, val = _train_val(cfg, seed)
    stage = train_stage(train, val, SegmentSpec(cfg.k, cfg.k - 1), cfg.model, cfg.distill, seed)
    out = Path(args.out)
    _save_stage(stage, out)
    _write_log(out / f"{stage.name}.csv", stage.log)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    train, val = _train_val(cfg, seed)
    out = Path(args.out)
    if args.mode == "pkd":
        stages = run_pkd_chain(train, val, cfg.k, cfg.model, cfg.distill, seed)
    else:
        if cfg.k < 2:
            raise ConfigError("direct distillation needs k >= 2")
        teacher = train_stage(train, val, SegmentSpec(cfg.k, cfg.k - 1), cfg.model, cfg.distill, seed)
        levels = [args.target_level] if args.target_level is not None else range(cfg.k - 1)
        stages = [teacher] + [
            run_direct_kd(train, val, cfg.k, lv, cfg.model, cfg.distill, seed, teacher=teacher) for lv in levels
        ]
    for stage in stages:
        _save_stage(stage, out)
        _write_log(out / f"{stage.name}.csv", stage.log)
    return EXIT_OK


def _write_log(path: Path, rows) -> None:
    columns = ["stage", "epoch", "ce", "kl", "mse", "total", "val_accuracy"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_evaluate(args) -> int:
    records = load_dataset(args.data)
    checkpoints = [Path(c) for c in args.checkpoint]
    if len(checkpoints) == 1:
        model = SetrModel.load(checkpoints[0])
    else:
        model = {}
        for path in checkpoints:
            level = yaml.safe_load(path.with_suffix(".yaml").read_text())["level"]
            if level in model:
                raise ConfigError(f"two checkpoints for level {level}")
            model[level] = SetrModel.load(path)
    fractions = [Fraction(f) for f in args.fractions]
    try:
        scores = evaluate(model, records, fractions, args.k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["fraction", "precision", "recall", "f1", "accuracy", "tp", "fp", "fn", "tn"])
        for fraction in fractions:
            m = scores[fraction]
            writer.writerow([str(fraction), m.precision, m.recall, m.f1, m.accuracy, m.tp, m.fp, m.fn, m.tn])
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _experiment_config(args)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    results = run_experiment(cfg, args.out, jobs=args.jobs)
    failed = [f for r in results for f in r.failures]
    for failure in failed:
        log.error(failure)
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setr-pkd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML key-value config")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("extract-flow", help="TV-L1 flow for every consecutive frame pair")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--clip", type=float, default=16.0)
    p.add_argument("--params", help="YAML file of TV-L1 parameters")
    p.set_defaults(func=cmd_extract_flow)

    p = sub.add_parser("featurize", help="flow file -> 512-D per-frame feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--patient-id", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("gen-synthetic", help="write a synthetic cohort as feature files")
    common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="supervised SETR on full samples")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="progressive or direct distillation chain")
    common(p)
    p.add_argument("--mode", choices=["pkd", "direct"], default="pkd")
    p.add_argument("--target-level", type=int)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="metrics per prefix fraction")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", action="append", required=True, help="feature file or directory")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--fractions", nargs="+", default=["1/4", "1/2", "3/4", "1"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="cross-validated experiment with metric tables and plot data")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.error("failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
