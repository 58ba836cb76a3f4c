"""Per-frame motion descriptors and frame sampling.

The descriptor stands in for a pretrained flow network: a 4x4 spatial grid of
16-bin orientation histograms, each bin holding a pixel-count statistic and a
magnitude statistic, giving 512 values per flow field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowField

GRID = 4
ORIENTATION_BINS = 16
FEATURE_DIM = GRID * GRID * ORIENTATION_BINS * 2
MIN_MAGNITUDE = 1e-12


@dataclass
class SampleRecord:
    sample_id: str
    patient_id: str
    label: int
    duration: float
    features: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (frames, dim) with frames >= 1, got {self.features.shape}")
        if self.label < 0:
            raise ValueError("label must be non-negative")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]


def orientation_bin(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bin index with bin 0 centred on angle 0 (pure +x motion)."""
    width = 2.0 * np.pi / ORIENTATION_BINS
    angle = np.arctan2(v, u)
    return np.floor(angle / width + 0.5).astype(np.int64) % ORIENTATION_BINS


def flow_descriptor(flow: FlowField) -> np.ndarray:
    """512-D descriptor of one flow field, L2-normalised (zero if no motion)."""
    u, v = flow.u, flow.v
    h, w = u.shape
    magnitude = np.hypot(u, v)
    moving = magnitude > MIN_MAGNITUDE
    bins = orientation_bin(u, v)
    rows = np.minimum(np.arange(h) * GRID // h, GRID - 1)
    cols = np.minimum(np.arange(w) * GRID // w, GRID - 1)
    cell = rows[:, None] * GRID + cols[None, :]
    cell_pixels = np.bincount(cell.ravel(), minlength=GRID * GRID).astype(np.float64)

    slot = (cell * ORIENTATION_BINS + bins)[moving]
    n_slots = GRID * GRID * ORIENTATION_BINS
    counts = np.bincount(slot, minlength=n_slots).astype(np.float64)
    mags = np.bincount(slot, weights=magnitude[moving], minlength=n_slots)
    per_cell = np.repeat(cell_pixels, ORIENTATION_BINS)
    desc = np.stack([counts / per_cell, mags / per_cell], axis=-1).ravel()
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


def extract_spatial_features(flows: list[FlowField]) -> np.ndarray:
    if not flows:
        raise ValueError("need at least one flow field")
    return np.stack([flow_descriptor(f) for f in flows])


def sample_frames(prefix_frames: int, n_tokens: int) -> np.ndarray:
    """Uniform floor-stride indices ``floor(i * prefix / N)`` for ``i < N``.

    Short prefixes repeat frames, so the result always has ``N`` entries.
    """
    if prefix_frames < 1:
        raise ValueError("prefix must contain at least one frame")
    return (np.arange(n_tokens, dtype=np.int64) * prefix_frames) // n_tokens


def token_inputs(record: SampleRecord, n_tokens: int) -> np.ndarray:
    """The ``N x 512`` feature rows fed to the tokenizer for a record."""
    return record.features[sample_frames(record.frame_count, n_tokens)]
