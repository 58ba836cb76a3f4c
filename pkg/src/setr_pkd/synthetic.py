"""Seeded synthetic cohorts standing in for clinical recordings.

Each patient contributes one "normal" sample (label 0, low-amplitude drift) and
one "TCS" sample (label 1) whose rhythmic, high-amplitude motion pattern ramps
in over the course of the sample.  Early in a TCS sample the two classes look
alike, which is what makes short prefixes hard to classify.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FEATURE_DIM, SampleRecord, extract_spatial_features
from .flow import FlowField


@dataclass
class SyntheticSpec:
    patients: int = 40
    samples_per_patient: int = 2
    classes: int = 2
    frames: tuple[int, int] = (64, 160)
    frame_rate: float = 1.0
    normal_amplitude: tuple[float, float] = (0.2, 0.5)
    tcs_peak_amplitude: tuple[float, float] = (1.0, 2.0)
    ramp_power: float = 1.0
    # spread of the fraction of the sample at which the TCS pattern starts
    onset: tuple[float, float] = (0.0, 0.1)
    rhythm: tuple[float, float] = (0.15, 0.35)
    patient_mix: float = 0.5
    noise: float = 0.5
    mode: str = "features"
    flow_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        self.frames = tuple(self.frames)
        self.normal_amplitude = tuple(self.normal_amplitude)
        self.tcs_peak_amplitude = tuple(self.tcs_peak_amplitude)
        self.onset = tuple(self.onset)
        self.rhythm = tuple(self.rhythm)
        if self.classes != 2:
            raise ValueError("the generator produces binary cohorts only")
        if self.patients < 1 or self.samples_per_patient < 1:
            raise ValueError("need at least one patient and one sample per patient")
        if self.frames[0] < 1 or self.frames[1] < self.frames[0]:
            raise ValueError(f"bad frame range {self.frames}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.mode not in ("features", "flow"):
            raise ValueError(f"mode must be 'features' or 'flow', got {self.mode!r}")
        if self.normal_amplitude == self.tcs_peak_amplitude and self.rhythm[1] == 0:
            raise ValueError("class archetypes must differ")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def class_signal(spec: SyntheticSpec, progress: np.ndarray, onset: float) -> np.ndarray:
    """Strength in [0, 1] of the TCS pattern at each point of a sample."""
    ramp = np.clip((progress - onset) / max(1.0 - onset, 1e-9), 0.0, 1.0)
    return ramp**spec.ramp_power


@dataclass
class _Archetypes:
    normal: np.ndarray
    tcs_a: np.ndarray
    tcs_b: np.ndarray
    posture: dict[str, np.ndarray] = field(default_factory=dict)


def _archetypes(rng: np.random.Generator, patients: int) -> _Archetypes:
    base = rng.gamma(0.5, 1.0, size=(3, FEATURE_DIM))
    arch = _Archetypes(_unit(base[0]), _unit(base[1]), _unit(base[2]))
    for p in range(patients):
        arch.posture[f"P{p:03d}"] = _unit(rng.gamma(0.5, 1.0, size=FEATURE_DIM))
    return arch


def _feature_sample(spec, rng, arch, patient_id, label, frames) -> np.ndarray:
    t = np.arange(frames)
    progress = t / max(frames - 1, 1)
    resting = _unit((1.0 - spec.patient_mix) * arch.normal + spec.patient_mix * arch.posture[patient_id])
    amp = rng.uniform(*spec.normal_amplitude)
    drift = amp * (1.0 + 0.2 * np.sin(2 * np.pi * t / rng.uniform(20, 60) + rng.uniform(0, 2 * np.pi)))
    if label == 0:
        directions = np.broadcast_to(resting, (frames, FEATURE_DIM))
        amplitude = drift
    else:
        s = class_signal(spec, progress, rng.uniform(*spec.onset))[:, None]
        freq = rng.uniform(*spec.rhythm)
        phase = 0.5 * (1.0 + np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)))[:, None]
        seizure = phase * arch.tcs_a + (1.0 - phase) * arch.tcs_b
        directions = (1.0 - s) * resting + s * seizure
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        peak = rng.uniform(*spec.tcs_peak_amplitude)
        amplitude = drift + (peak - drift) * s[:, 0]
    feats = amplitude[:, None] * directions
    if spec.noise > 0:
        noise = rng.normal(size=(frames, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)
        feats = feats + spec.noise * amplitude[:, None] * noise
    return feats


def _flow_sample(spec, rng, label, frames) -> np.ndarray:
    size = spec.flow_size
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    t = np.arange(frames)
    progress = t / max(frames - 1, 1)
    drift_dir = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(*spec.normal_amplitude)
    s = class_signal(spec, progress, rng.uniform(*spec.onset)) if label == 1 else np.zeros(frames)
    peak = rng.uniform(*spec.tcs_peak_amplitude)
    freq = rng.uniform(*spec.rhythm)
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.05)
    flows = []
    for i in range(frames):
        angle = drift_dir + 0.3 * np.sin(i / 10.0)
        u = amp * np.cos(angle) * np.ones((size, size))
        v = amp * np.sin(angle) * np.ones((size, size))
        jerk = s[i] * peak * np.sin(2 * np.pi * freq * i) * blob
        u = u + jerk * (yy - cy) * 4.0
        v = v - jerk * (xx - cx) * 4.0
        if spec.noise > 0:
            u = u + spec.noise * amp * rng.normal(size=u.shape)
            v = v + spec.noise * amp * rng.normal(size=v.shape)
        flows.append(FlowField(u, v))
    return extract_spatial_features(flows)


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[SampleRecord]:
    rng = np.random.default_rng(spec.seed)
    arch = _archetypes(rng, spec.patients)
    records = []
    for p in range(spec.patients):
        patient_id = f"P{p:03d}"
        for s in range(spec.samples_per_patient):
            label = s % 2
            frames = int(rng.integers(spec.frames[0], spec.frames[1] + 1))
            if spec.mode == "features":
                feats = _feature_sample(spec, rng, arch, patient_id, label, frames)
            else:
                feats = _flow_sample(spec, rng, label, frames)
            records.append(
                SampleRecord(f"{patient_id}-S{s}", patient_id, label, frames / spec.frame_rate, feats)
            )
    return records
