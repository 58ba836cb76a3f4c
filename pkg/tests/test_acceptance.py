"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL verdict line that is printed in the terminal
summary.  The distillation ablation is the slow one (tens of minutes serial).
"""
from __future__ import annotations

import io
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from setr_pkd import autodiff as ad
from setr_pkd.autodiff import Value
from setr_pkd.distill import (
    DistillConfig,
    SegmentSpec,
    infer,
    kd_losses,
    prefix_inputs,
    split_prefix,
    train_stage,
)
from setr_pkd.experiment import load_config, parse_config, run_experiment
from setr_pkd.features import FEATURE_DIM, SampleRecord
from setr_pkd.flow import FlowField, Frame, flow_to_export, tv_l1_flow
from setr_pkd.formats import (
    FrameSequence,
    read_checkpoint,
    read_features,
    read_flow,
    read_frames,
    to_bytes,
    write_checkpoint,
    write_features,
    write_flow,
    write_frames,
)
from setr_pkd.model import SetrConfig, SetrModel, SetrOutput, init_params, predict, setr_forward
from setr_pkd.synthetic import SyntheticSpec, generate_synthetic_dataset

from conftest import record_verdict
from oracles import central_difference, rel_error

ABLATION_CONFIG = Path(__file__).resolve().parents[1] / "scripts" / "configs" / "ablation.yaml"


def verdict(name, passed, detail=""):
    record_verdict(name, bool(passed), detail)
    assert passed, f"{name}: {detail}"


# -- gradient correctness --------------------------------------------------


def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = SetrConfig(n_tokens=6, dim=16, heads=2, layers=1, classes=2, dropout=0.0)
    params = init_params(cfg, rng)
    for p in params.values():
        p.data = rng.normal(0.0, 0.3, size=p.shape) + (1.0 if p.name.endswith("gamma") else 0.0)
    teacher = SetrModel.create(cfg, rng)
    t_out = teacher(rng.normal(size=(2, 6, FEATURE_DIM)))
    feats = rng.normal(size=(2, 6, FEATURE_DIM))
    labels = np.array([1, 0])
    kd = DistillConfig(tau=10.0, alpha=0.2, beta=0.5)

    def loss():
        return kd_losses(t_out, setr_forward(feats, params, cfg), labels, kd)[1]

    for p in params.values():
        p.zero_grad()
    with ad.recording():
        total = loss()
    ad.backward(total)
    worst, worst_name = 0.0, ""
    for name, p in params.items():
        num = central_difference(lambda: float(loss().data), p.data, h=1e-5)
        err = rel_error(p.grad, num)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    verdict(
        "gradient correctness: rel. error < 1e-4 for every parameter, < 60 s",
        worst < 1e-4 and elapsed < 60,
        f"worst {worst:.2e} at {worst_name}, {elapsed:.1f} s",
    )


# -- loss identities -------------------------------------------------------


def _outputs(logits, patches):
    return SetrOutput(
        Value(logits, requires_grad=True), Value(np.zeros((logits.shape[0], 1))), Value(patches, requires_grad=True)
    )


def test_loss_identities():
    rng = np.random.default_rng(7)
    cfg = DistillConfig()
    logits, patches = rng.normal(0, 3, (8, 2)), rng.normal(size=(8, 6, 4))
    labels = rng.integers(0, 2, 8)
    same, _ = kd_losses(_outputs(logits, patches), _outputs(logits.copy(), patches.copy()), labels, cfg)
    zero_weights = DistillConfig(alpha=0.0, beta=0.0)
    other = _outputs(rng.normal(0, 3, (8, 2)), rng.normal(size=(8, 6, 4)))
    degenerate, _ = kd_losses(_outputs(logits, patches), other, labels, zero_weights)
    ce = ad.cross_entropy(other.logits, labels).item()
    worst_kl = math.inf
    for _ in range(10_000):
        scale = 10 ** rng.uniform(-2, 2)
        parts, _ = kd_losses(
            _outputs(rng.normal(0, scale, (1, 2)), np.zeros((1, 1, 1))),
            _outputs(rng.normal(0, scale, (1, 2)), np.zeros((1, 1, 1))),
            [0],
            cfg,
        )
        worst_kl = min(worst_kl, parts.kl)
    ok = abs(same.kl) <= 1e-12 and degenerate.total == degenerate.ce == ce and worst_kl >= 0
    verdict(
        "loss identities: KL(identical)=0, total=CE at alpha=beta=0, KL>=0 on 10,000 pairs",
        ok,
        f"KL(identical)={same.kl:.1e}, total-CE={degenerate.total - ce:.1e}, min KL={worst_kl:.2e}",
    )


# -- segment formula -------------------------------------------------------


def test_segment_formula_and_nesting():
    rec = SampleRecord("s", "p", 1, 114.0, np.zeros((228, FEATURE_DIM)))
    durations = [split_prefix(rec, SegmentSpec(4, j)).duration for j in range(4)]
    rng = np.random.default_rng(11)
    violations = 0
    for k in (4, 8, 16):
        for _ in range(1000):
            frames = int(rng.integers(k, 4000))
            feats = np.zeros((frames, 1))
            feats[:, 0] = np.arange(frames)
            sample = SampleRecord("s", "p", 0, float(rng.uniform(1, 300)), feats)
            prev = None
            for j in range(k):
                cur = split_prefix(sample, SegmentSpec(k, j)).features[:, 0]
                if prev is not None and not (len(prev) <= len(cur) and np.array_equal(cur[: len(prev)], prev)):
                    violations += 1
                prev = cur
            if len(prev) != frames:
                violations += 1
    verdict(
        "segment formula: 114 s, k=4 -> 28.5/57/85.5/114 s; nesting on 1,000 samples for k=4,8,16",
        durations == [28.5, 57.0, 85.5, 114.0] and violations == 0,
        f"durations {durations}, nesting violations {violations}",
    )


# -- optical flow oracle ---------------------------------------------------


def test_optical_flow_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    size, pad, border = 128, 16, 8
    worst = 0.0
    for _ in range(5):
        texture = ndimage.gaussian_filter(rng.random((size + 2 * pad,) * 2), 2.0)
        texture = (texture - texture.min()) / (texture.max() - texture.min())
        prev = Frame(texture[pad : pad + size, pad : pad + size])
        for dx, dy in [(1, 0), (0, 2), (2, 1)]:
            nxt = Frame(texture[pad - dy : pad - dy + size, pad - dx : pad - dx + size])
            flow = tv_l1_flow(prev, nxt)
            inner = (slice(border, -border),) * 2
            epe = np.hypot(flow.u[inner] - dx, flow.v[inner] - dy).mean()
            worst = max(worst, float(epe))
    elapsed = time.perf_counter() - start
    verdict(
        "optical flow oracle: interior mean EPE < 0.25 px on 5 textures x 3 shifts, < 2 min",
        worst < 0.25 and elapsed < 120,
        f"worst EPE {worst:.3f} px, {elapsed:.1f} s",
    )


# -- distillation ablation -------------------------------------------------


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = load_config(ABLATION_CONFIG)
    start = time.perf_counter()
    results = run_experiment(cfg, tmp_path_factory.mktemp("ablation"), jobs=1)
    elapsed = time.perf_counter() - start
    rows = [row for r in results for row in r.metric_rows]
    failures = [f for r in results for f in r.failures]

    def seed_mean(arm, seed, fraction):
        vals = [r["f1"] for r in rows if r["arm"] == arm and r["seed"] == seed and r["fraction"] == fraction]
        return float(np.mean(vals))

    return cfg, rows, failures, elapsed, seed_mean


def test_progressive_beats_direct_early(ablation):
    cfg, rows, failures, elapsed, seed_mean = ablation
    early = ["1/8", "1/4"]
    pkd = np.array([np.mean([seed_mean("pkd", s, f) for f in early]) for s in cfg.seeds])
    direct = np.array([np.mean([seed_mean("direct", s, f) for f in early]) for s in cfg.seeds])
    wins = int(np.sum(pkd >= direct))
    ok = not failures and len(cfg.seeds) == 5 and wins >= 4 and pkd.mean() > direct.mean() and elapsed < 1800
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(pkd, direct))
    verdict(
        "progressive vs direct: early-fraction F1 PKD >= direct in >=4/5 seeds, strictly greater seed-mean, < 30 min",
        ok,
        f"PKD/direct per seed {per_seed}; wins {wins}/5; means {pkd.mean():.3f}/{direct.mean():.3f}; {elapsed / 60:.1f} min",
    )


def test_monotone_in_fraction(ablation):
    cfg, rows, failures, elapsed, seed_mean = ablation
    fractions = ["1/4", "1/2", "3/4", "1"]
    worst_drop = 0.0
    curves = []
    for arm in cfg.arms:
        curve = [np.mean([seed_mean(arm, s, f) for s in cfg.seeds]) for f in fractions]
        curves.append(f"{arm} " + "/".join(f"{c:.3f}" for c in curve))
        worst_drop = max(worst_drop, float(np.max(-np.diff(curve))))
    verdict(
        "monotonicity: seed-mean F1 non-decreasing over 1/4..1 for every arm, tolerance 0.02",
        not failures and worst_drop <= 0.02,
        f"largest drop {worst_drop:.3f}; " + "; ".join(curves),
    )


# -- teacher trainability --------------------------------------------------


def test_teacher_trainability():
    base = load_config(ABLATION_CONFIG)
    hits = []
    for seed in range(5):
        spec = SyntheticSpec(**{**base.synthetic.__dict__, "noise": 0.1, "seed": seed})
        records = generate_synthetic_dataset(spec)
        stage = train_stage(records, [], SegmentSpec(base.k, base.k - 1), base.model, DistillConfig(epochs=50), seed)
        inputs = prefix_inputs(records, stage.spec, base.model.n_tokens)
        labels = np.array([r.label for r in records])
        hits.append(float(np.mean(predict(infer(stage.model, inputs).logits) == labels)))
    passed = sum(h >= 0.95 for h in hits)
    verdict(
        "teacher trainability: >= 95% training accuracy at noise 0.1 within 50 epochs in >= 4/5 seeds",
        passed >= 4,
        "train accuracy per seed " + ", ".join(f"{h:.3f}" for h in hits),
    )


# -- determinism -----------------------------------------------------------


def test_run_experiment_determinism(tmp_path):
    raw = {
        "k": 4,
        "seeds": [0, 1],
        "folds": 2,
        "epochs": 3,
        "batch_size": 4,
        "model": {"n_tokens": 4, "dim": 8, "heads": 2, "layers": 1},
        "synthetic": {"patients": 8, "frames": [12, 20]},
    }
    run_experiment(parse_config(raw), tmp_path / "a", jobs=1)
    run_experiment(parse_config(raw), tmp_path / "b", jobs=1)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differing = [str(p) for p in files_a if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    ckpts = sum(1 for p in files_a if p.suffix == ".ckpt")
    verdict(
        "determinism: run_experiment --jobs 1 twice gives bitwise-identical reports and checkpoints",
        files_a == files_b and not differing and ckpts > 0,
        f"{len(files_a)} files ({ckpts} checkpoints), {len(differing)} differ",
    )


# -- format round-trips ----------------------------------------------------


def test_format_round_trips():
    rng = np.random.default_rng(3)
    state = SetrModel.create(SetrConfig(n_tokens=4, dim=8, heads=2, layers=1), rng).state_dict()
    feats = rng.random((9, FEATURE_DIM))
    record = SampleRecord("P007-S1", "P007", 1, 9.0, feats)
    frames = FrameSequence([Frame(rng.random((12, 20))) for _ in range(3)], 25.0)
    flows = [flow_to_export(FlowField(rng.normal(0, 4, (12, 20)), rng.normal(0, 4, (12, 20)))) for _ in range(2)]
    cases = [
        ("checkpoint", write_checkpoint, read_checkpoint, state),
        ("features", write_features, read_features, record),
        ("frames", write_frames, read_frames, frames),
        ("flow", write_flow, read_flow, flows),
    ]
    broken = []
    for name, write, read, obj in cases:
        first = to_bytes(write, obj)
        second = to_bytes(write, read(io.BytesIO(first)))
        if first != second:
            broken.append(name)
    verdict(
        "format round-trips: write -> read -> write is bitwise identical for all four formats",
        not broken,
        "all identical" if not broken else "differs: " + ", ".join(broken),
    )
