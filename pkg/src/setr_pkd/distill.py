"""Prefix segmentation, the distillation objective and the PKD / direct-KD chains."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptState, Value, adamw_step
from .features import SampleRecord, token_inputs
from .model import SetrConfig, SetrModel, SetrOutput, predict

log = logging.getLogger(__name__)

SEGMENT_COUNTS = (4, 8, 16)


class StageError(RuntimeError):
    """A training stage produced a non-finite loss."""


@dataclass(frozen=True)
class SegmentSpec:
    k: int
    level: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.level < self.k:
            raise ValueError(f"level must be in [0, {self.k}), got {self.level}")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.level + 1, self.k)

    @property
    def is_full(self) -> bool:
        return self.level == self.k - 1


@dataclass
class DistillConfig:
    tau: float = 10.0
    alpha: float = 0.2
    beta: float = 0.5
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warm_start: bool = False
    class_weights: list[float] | None = None

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class LossBreakdown:
    ce: float
    kl: float
    mse: float
    total: float


def prefix_frame_count(frames: int, spec: SegmentSpec) -> int:
    """``round((level + 1) / k * frames)`` with halves rounded up."""
    num = 2 * (spec.level + 1) * frames + spec.k
    return num // (2 * spec.k)


def split_prefix(record: SampleRecord, spec: SegmentSpec) -> SampleRecord:
    """Keep the leading ``(level + 1) / k`` of a sample (frames and duration)."""
    if record.frame_count < spec.k:
        raise ValueError(f"record {record.sample_id} has {record.frame_count} frames, fewer than k={spec.k}")
    if spec.is_full:
        return record
    keep = prefix_frame_count(record.frame_count, spec)
    return SampleRecord(
        record.sample_id,
        record.patient_id,
        record.label,
        (spec.level + 1) * record.duration / spec.k,
        record.features[:keep],
    )


def prefix_inputs(records: Sequence[SampleRecord], spec: SegmentSpec, n_tokens: int) -> np.ndarray:
    """Stack the sampled ``(N, F)`` token inputs of every record's prefix."""
    return np.stack([token_inputs(split_prefix(r, spec), n_tokens) for r in records])


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kd_losses(
    teacher: SetrOutput | None,
    student: SetrOutput,
    labels,
    cfg: DistillConfig,
) -> tuple[LossBreakdown, Value]:
    """CE + alpha * KL + beta * MSE, averaged over the batch.

    The teacher is treated as a constant.  Without a teacher only CE is used.
    Returns the scalar breakdown and the differentiable total.
    """
    ce = ad.cross_entropy(student.logits, labels, cfg.class_weights)
    if teacher is None:
        return LossBreakdown(ce.item(), 0.0, 0.0, ce.item()), ce
    t_logits = teacher.logits.data
    t_patch = teacher.patch_tokens.data
    if t_logits.shape != student.logits.shape or t_patch.shape != student.patch_tokens.shape:
        raise ValueError(
            f"teacher/student shapes differ: logits {t_logits.shape} vs {student.logits.shape}, "
            f"patches {t_patch.shape} vs {student.patch_tokens.shape}"
        )
    batch, n_patch = t_patch.shape[0], t_patch.shape[1]
    log_qt = _log_softmax_np(t_logits / cfg.tau)
    qt = np.exp(log_qt)
    log_qs = ad.log_softmax(ad.scale(student.logits, 1.0 / cfg.tau))
    per_class = ad.mul(Value(qt), ad.sub(Value(log_qt), log_qs))
    kl = ad.scale(ad.sum(per_class), cfg.tau**2 / batch)
    diff = ad.sub(student.patch_tokens, Value(t_patch))
    mse = ad.scale(ad.sum(ad.mul(diff, diff)), 1.0 / (batch * n_patch))
    total = ad.add(ad.add(ce, ad.scale(kl, cfg.alpha)), ad.scale(mse, cfg.beta))
    return LossBreakdown(ce.item(), kl.item(), mse.item(), total.item()), total


@dataclass
class TrainedStage:
    spec: SegmentSpec
    model: SetrModel
    name: str
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    teacher_level: int | None = None


def stage_name(spec: SegmentSpec, role: str | None = None) -> str:
    if role is None:
        if spec.is_full:
            role = "teacher"
        elif spec.level == 0:
            role = "student"
        else:
            role = "subteacher"
    return f"{role}_{spec.level}"


def stage_rng(seed: int, level: int) -> np.random.Generator:
    """Every stage at a given level draws from the same stream, whoever teaches it."""
    return np.random.default_rng(np.random.SeedSequence([seed, level]))


def infer(model: SetrModel, inputs: np.ndarray, batch: int = 64) -> SetrOutput:
    """Eval-mode forward over many samples, returning constant outputs."""
    logits, cls, patch = [], [], []
    for start in range(0, len(inputs), batch):
        out = model(inputs[start : start + batch], training=False)
        logits.append(out.logits.data)
        cls.append(out.class_token.data)
        patch.append(out.patch_tokens.data)
    return SetrOutput(
        Value(np.concatenate(logits)), Value(np.concatenate(cls)), Value(np.concatenate(patch))
    )


def _batch(out: SetrOutput, idx: np.ndarray) -> SetrOutput:
    return SetrOutput(
        Value(out.logits.data[idx]), Value(out.class_token.data[idx]), Value(out.patch_tokens.data[idx])
    )


def _evaluate_split(model, inputs, labels, teacher_out, cfg) -> tuple[LossBreakdown, float]:
    out = infer(model, inputs)
    parts, _ = kd_losses(teacher_out, out, labels, cfg)
    accuracy = float(np.mean(predict(out.logits) == labels))
    return parts, accuracy


def train_stage(
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    spec: SegmentSpec,
    model_config: SetrConfig,
    cfg: DistillConfig,
    seed: int,
    teacher: TrainedStage | None = None,
    name: str | None = None,
) -> TrainedStage:
    """Train one SETR on the ``spec`` prefix, distilling from ``teacher`` if given.

    The teacher sees its own (longer) prefix of each sample in eval mode.  The
    returned model holds the parameters of the epoch with the lowest validation
    total loss (the last epoch when ``val`` is empty).
    """
    if teacher is not None:
        if teacher.spec.k != spec.k:
            raise ValueError("teacher and student must share k")
        if teacher.spec.level <= spec.level:
            raise ValueError(f"teacher level {teacher.spec.level} must exceed student level {spec.level}")
    if not train:
        raise ValueError("empty training set")
    name = name or stage_name(spec)
    rng = stage_rng(seed, spec.level)
    if cfg.warm_start and teacher is not None:
        model = teacher.model.copy()
    else:
        model = SetrModel.create(model_config, rng)
    n = model_config.n_tokens

    x_train = prefix_inputs(train, spec, n)
    y_train = np.array([r.label for r in train])
    x_val = prefix_inputs(val, spec, n) if val else None
    y_val = np.array([r.label for r in val])
    t_train = t_val = None
    if teacher is not None:
        t_train = infer(teacher.model, prefix_inputs(train, teacher.spec, n))
        if val:
            t_val = infer(teacher.model, prefix_inputs(val, teacher.spec, n))

    state = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_loss = np.inf
    best_state = model.state_dict()
    best_epoch = 0
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        if len(order) < cfg.batch_size:
            order = np.resize(order, cfg.batch_size)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            with ad.recording():
                out = model(x_train[idx], training=True, rng=rng)
                parts, total = kd_losses(
                    _batch(t_train, idx) if t_train is not None else None, out, y_train[idx], cfg
                )
            values = np.array([parts.ce, parts.kl, parts.mse, parts.total])
            if not np.all(np.isfinite(values)):
                raise StageError(f"{name}: non-finite loss at epoch {epoch}, step {steps}: {parts}")
            # Gibbs' inequality, up to rounding
            if parts.kl < -1e-12:
                raise StageError(f"{name}: negative KL {parts.kl} at epoch {epoch}")
            if abs(parts.total - (parts.ce + cfg.alpha * parts.kl + cfg.beta * parts.mse)) > 1e-12:
                raise StageError(f"{name}: loss breakdown does not add up: {parts}")
            ad.backward(total)
            params = {k: p.data for k, p in model.params.items()}
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            adamw_step(params, grads, state)
            sums += values
            steps += 1
        means = sums / steps
        row = {"stage": name, "epoch": epoch, "ce": means[0], "kl": means[1], "mse": means[2], "total": means[3]}
        if val:
            val_parts, val_acc = _evaluate_split(model, x_val, y_val, t_val, cfg)
            row.update(val_total=val_parts.total, val_kl=val_parts.kl, val_accuracy=val_acc)
            if val_parts.total < best_loss:
                best_loss = val_parts.total
                best_state = model.state_dict()
                best_epoch = epoch
        else:
            row.update(val_total=float("nan"), val_kl=float("nan"), val_accuracy=float("nan"))
            best_state = model.state_dict()
            best_epoch = epoch
        rows.append(row)
        log.debug("%s epoch %d total %.4f", name, epoch, means[3])
    model.load_state_dict(best_state)
    return TrainedStage(
        spec=spec,
        model=model,
        name=name,
        log=rows,
        best_epoch=best_epoch,
        train_ids=[r.sample_id for r in train],
        val_ids=[r.sample_id for r in val],
        teacher_level=teacher.spec.level if teacher is not None else None,
    )


def run_pkd_chain(
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    k: int,
    model_config: SetrConfig,
    cfg: DistillConfig,
    seed: int,
    teacher: TrainedStage | None = None,
) -> list[TrainedStage]:
    """Teacher on the full sample, then each level distils from the one above.

    Returns the ``k`` stages ordered from level ``k - 1`` down to 0.
    """
    if teacher is None:
        teacher = train_stage(train, val, SegmentSpec(k, k - 1), model_config, cfg, seed)
    stages = [teacher]
    for level in range(k - 2, -1, -1):
        stages.append(train_stage(train, val, SegmentSpec(k, level), model_config, cfg, seed, teacher=stages[-1]))
    return stages


def run_direct_kd(
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    k: int,
    target_level: int,
    model_config: SetrConfig,
    cfg: DistillConfig,
    seed: int,
    teacher: TrainedStage | None = None,
) -> TrainedStage:
    """One distillation hop from the full-sample teacher to ``target_level``."""
    if not 0 <= target_level < k - 1:
        raise ValueError(f"target level must be in [0, {k - 1}), got {target_level}")
    if teacher is None:
        teacher = train_stage(train, val, SegmentSpec(k, k - 1), model_config, cfg, seed)
    elif teacher.spec != SegmentSpec(k, k - 1):
        raise ValueError("direct KD needs the full-sample teacher")
    spec = SegmentSpec(k, target_level)
    return train_stage(train, val, spec, model_config, cfg, seed, teacher=teacher, name=stage_name(spec, "direct"))
