"""Cross-validated plain / PKD / direct-KD experiments driven by a YAML config.

Example config::

    k: 8
    seeds: [0, 1, 2]
    folds: 5
    arms: [plain, pkd, direct]
    fractions: ["1/4", "1/2", "3/4", "1"]
    tau: 10
    alpha: 0.2
    beta: 0.5
    epochs: 50
    model: {n_tokens: 16, dim: 32, heads: 4, layers: 1}
    synthetic: {patients: 40, noise: 0.5}

``dataset`` (a directory of feature files, or a list of them) replaces
``synthetic`` for real data.  ``mode: pkd`` is shorthand for ``arms: [pkd]``.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .distill import (
    DistillConfig,
    SegmentSpec,
    StageError,
    TrainedStage,
    run_direct_kd,
    run_pkd_chain,
    train_stage,
)
from .evaluation import DEFAULT_FRACTIONS, evaluate, fold_summary, fraction_level, kfold_split
from .features import SampleRecord
from .formats import read_features
from .model import SetrConfig
from .synthetic import SyntheticSpec, generate_synthetic_dataset

log = logging.getLogger(__name__)

ARMS = ("plain", "pkd", "direct")
METRIC_COLUMNS = ["arm", "seed", "fold", "fraction", "precision", "recall", "f1", "accuracy", "tp", "fp", "fn", "tn"]
LOG_COLUMNS = ["stage", "epoch", "ce", "kl", "mse", "total", "val_accuracy"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    k: int = 4
    seeds: list[int] = field(default_factory=lambda: [0])
    folds: int = 5
    stratified: bool = True
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    fractions: list[Fraction] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    val_fraction: float = 0.25
    distill: DistillConfig = field(default_factory=DistillConfig)
    model: SetrConfig = field(default_factory=SetrConfig)
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    dataset: list[str] = field(default_factory=list)
    save_checkpoints: bool = True

    def levels(self) -> list[int]:
        return sorted({fraction_level(f, self.k) for f in self.fractions})

    def to_dict(self) -> dict:
        out = {
            "k": self.k,
            "seeds": list(self.seeds),
            "folds": self.folds,
            "stratified": self.stratified,
            "arms": list(self.arms),
            "fractions": [str(f) for f in self.fractions],
            "val_fraction": self.val_fraction,
            "model": asdict(self.model),
            "save_checkpoints": self.save_checkpoints,
        }
        out.update(asdict(self.distill))
        if self.dataset:
            out["dataset"] = list(self.dataset)
        elif self.synthetic is not None:
            out["synthetic"] = asdict(self.synthetic)
        return out


_DISTILL_KEYS = {f.name for f in fields(DistillConfig)}


def parse_config(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    try:
        distill = DistillConfig(**{key: raw.pop(key) for key in list(raw) if key in _DISTILL_KEYS})
        if "mode" in raw:
            mode = raw.pop("mode")
            if "arms" in raw:
                raise ConfigError("give either 'mode' or 'arms', not both")
            raw["arms"] = [mode]
        arms = [str(a) for a in raw.pop("arms", ARMS)]
        unknown_arms = set(arms) - set(ARMS)
        if unknown_arms:
            raise ConfigError(f"unknown arms {sorted(unknown_arms)}; expected {ARMS}")
        dataset = raw.pop("dataset", [])
        if isinstance(dataset, str):
            dataset = [dataset]
        synthetic = raw.pop("synthetic", {})
        cfg = ExperimentConfig(
            k=int(raw.pop("k", 4)),
            seeds=[int(s) for s in np.atleast_1d(raw.pop("seeds", [0]))],
            folds=int(raw.pop("folds", 5)),
            stratified=bool(raw.pop("stratified", True)),
            arms=arms,
            fractions=[Fraction(str(f)) for f in raw.pop("fractions", [str(f) for f in DEFAULT_FRACTIONS])],
            val_fraction=float(raw.pop("val_fraction", 0.25)),
            distill=distill,
            model=SetrConfig(**raw.pop("model", {})),
            synthetic=None if dataset else SyntheticSpec(**(synthetic or {})),
            dataset=[str(d) for d in dataset],
            save_checkpoints=bool(raw.pop("save_checkpoints", True)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    if cfg.k < 1:
        raise ConfigError("k must be >= 1")
    try:
        cfg.levels()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.folds < 2:
        raise ConfigError("evaluation needs at least 2 folds")
    if not 0 <= cfg.val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key-value mapping")
    raw.update(overrides or {})
    return parse_config(raw)


def load_dataset(paths: Sequence[str]) -> list[SampleRecord]:
    files: list[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.feat")) if p.is_dir() else [p])
    if not files:
        raise ConfigError(f"no feature files found in {list(paths)}")
    return [read_features(f) for f in files]


def dataset_for_seed(cfg: ExperimentConfig, seed: int) -> list[SampleRecord]:
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    spec = SyntheticSpec(**{**asdict(cfg.synthetic), "seed": cfg.synthetic.seed + seed})
    return generate_synthetic_dataset(spec)


def split_validation(pool: Sequence[SampleRecord], val_fraction: float, seed: int, fold: int):
    """Hold out whole training patients for checkpoint selection."""
    patients = sorted({r.patient_id for r in pool})
    n_val = int(round(val_fraction * len(patients)))
    if n_val == 0:
        return list(pool), []
    rng = np.random.default_rng([seed, fold, 7919])
    held = set(rng.choice(patients, size=n_val, replace=False).tolist())
    return [r for r in pool if r.patient_id not in held], [r for r in pool if r.patient_id in held]


@dataclass
class FoldResult:
    seed: int
    fold: int
    metric_rows: list[dict] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)


def _save_stage(stage: TrainedStage, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stage.model.save(
        directory / f"{stage.name}.ckpt",
        extra={
            "k": stage.spec.k,
            "level": stage.spec.level,
            "fraction": str(stage.spec.fraction),
            "teacher_level": stage.teacher_level,
            "best_epoch": stage.best_epoch,
        },
    )


def _check_isolation(stages: Sequence[TrainedStage], test: Sequence[SampleRecord]) -> None:
    test_ids = {r.sample_id for r in test}
    for stage in stages:
        leaked = test_ids & (set(stage.train_ids) | set(stage.val_ids))
        if leaked:
            raise RuntimeError(f"test samples leaked into {stage.name}: {sorted(leaked)}")


def run_fold(cfg: ExperimentConfig, seed: int, fold: int, out_dir: Path | None) -> FoldResult:
    records = dataset_for_seed(cfg, seed)
    plan = kfold_split(records, cfg.folds, cfg.stratified, seed)
    pool, test = plan.split(records, fold)
    train, val = split_validation(pool, cfg.val_fraction, seed, fold)
    result = FoldResult(seed, fold)
    result.splits = {
        "train": [r.sample_id for r in train],
        "val": [r.sample_id for r in val],
        "test": [r.sample_id for r in test],
    }
    k, top = cfg.k, cfg.k - 1
    stages: list[TrainedStage] = []
    per_arm: dict[str, dict[int, object]] = {}
    try:
        teacher = train_stage(train, val, SegmentSpec(k, top), cfg.model, cfg.distill, seed)
        stages.append(teacher)
        if "plain" in cfg.arms:
            per_arm["plain"] = teacher.model
        if "pkd" in cfg.arms:
            chain = run_pkd_chain(train, val, k, cfg.model, cfg.distill, seed, teacher=teacher)
            stages.extend(chain[1:])
            per_arm["pkd"] = {s.spec.level: s.model for s in chain}
        if "direct" in cfg.arms:
            direct = {top: teacher.model}
            for level in cfg.levels():
                if level < top:
                    stage = run_direct_kd(train, val, k, level, cfg.model, cfg.distill, seed, teacher=teacher)
                    stages.append(stage)
                    direct[level] = stage.model
            per_arm["direct"] = direct
    except (StageError, FloatingPointError, ValueError) as exc:
        result.failures.append(f"seed {seed} fold {fold}: {exc}")
        log.error("seed %d fold %d failed: %s", seed, fold, exc)
        return result
    _check_isolation(stages, test)
    for stage in stages:
        result.log_rows.extend(stage.log)
        if out_dir is not None and cfg.save_checkpoints:
            _save_stage(stage, out_dir / "checkpoints" / f"seed{seed}" / f"fold{fold}")
    for arm in cfg.arms:
        scores = evaluate(per_arm[arm], test, cfg.fractions, k, cfg.model.classes)
        for fraction in cfg.fractions:
            m = scores[fraction]
            result.metric_rows.append(
                {
                    "arm": arm,
                    "seed": seed,
                    "fold": fold,
                    "fraction": str(fraction),
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "accuracy": m.accuracy,
                    "tp": m.tp,
                    "fp": m.fp,
                    "fn": m.fn,
                    "tn": m.tn,
                }
            )
    return result


def _run_fold_job(args):
    return run_fold(*args)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def summarize(metric_rows: Sequence[dict], arms: Sequence[str], fractions: Sequence[Fraction]) -> list[dict]:
    """Mean and std over every (seed, fold) of each arm and fraction."""
    summary = []
    for arm in arms:
        for fraction in fractions:
            rows = [r for r in metric_rows if r["arm"] == arm and r["fraction"] == str(fraction)]
            if not rows:
                continue
            stats = fold_summary(rows)
            entry = {"arm": arm, "fraction": str(fraction), "n": len(rows)}
            for name, (mean, std) in stats.items():
                entry[f"{name}_mean"] = mean
                entry[f"{name}_std"] = std
            summary.append(entry)
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[FoldResult]:
    """Run every (seed, fold) and write the report files into ``out_dir``.

    Written files: ``config.yaml``, ``metrics.csv``, ``summary.csv``,
    ``plot_<arm>.dat`` (fraction, mean accuracy), ``logs/``, ``splits/``,
    ``checkpoints/`` and ``failures.txt`` when anything failed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    tasks = [(cfg, seed, fold, out) for seed in cfg.seeds for fold in range(cfg.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, tasks))
    else:
        results = [run_fold(*t) for t in tasks]

    (out / "logs").mkdir(exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    metric_rows: list[dict] = []
    failures: list[str] = []
    for r in results:
        metric_rows.extend(r.metric_rows)
        failures.extend(r.failures)
        _write_csv(out / "logs" / f"seed{r.seed}_fold{r.fold}.csv", LOG_COLUMNS, r.log_rows)
        (out / "splits" / f"seed{r.seed}_fold{r.fold}.yaml").write_text(yaml.safe_dump(r.splits, sort_keys=True))
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows)
    summary = summarize(metric_rows, cfg.arms, cfg.fractions)
    if summary:
        _write_csv(out / "summary.csv", list(summary[0]), summary)
    for arm in cfg.arms:
        lines = [
            f"{float(Fraction(s['fraction'])):.6f} {s['accuracy_mean']!r}" for s in summary if s["arm"] == arm
        ]
        (out / f"plot_{arm}.dat").write_text("\n".join(lines) + "\n")
    failure_file = out / "failures.txt"
    if failures:
        failure_file.write_text("\n".join(failures) + "\n")
    elif failure_file.exists():
        failure_file.unlink()
    return results
