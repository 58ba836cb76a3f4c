"""Binary file formats: checkpoints, raw frame sequences, flow exports, features.

All integers and floats are little-endian.  Every reader is the exact inverse
of its writer, so write -> read -> write reproduces the same bytes.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from os import PathLike
from typing import BinaryIO

import numpy as np

from .features import FEATURE_DIM, SampleRecord
from .flow import Frame, QuantizedFlow

CHECKPOINT_MAGIC = b"SETRCKPT"
VIDEO_MAGIC = b"SETRVID0"
FLOW_MAGIC = b"SETRFLW0"
FEATURE_MAGIC = b"SETRFEAT"
CHECKPOINT_VERSION = 1
FEATURE_VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(data)})")
    return data


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _expect_magic(f: BinaryIO, magic: bytes) -> None:
    found = _read_exact(f, len(magic))
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}")


def _write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f: BinaryIO) -> str:
    (n,) = _unpack(f, "<I")
    return _read_exact(f, n).decode("utf-8")


def _open(target, mode: str):
    if isinstance(target, (str, PathLike)):
        return open(target, mode)
    return _Borrowed(target)


class _Borrowed:
    def __init__(self, f):
        self.f = f

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        return False


# -- checkpoints -----------------------------------------------------------


def write_checkpoint(target, arrays: dict[str, np.ndarray]) -> None:
    with _open(target, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(source) -> dict[str, np.ndarray]:
    with _open(source, "rb") as f:
        _expect_magic(f, CHECKPOINT_MAGIC)
        version, count = _unpack(f, "<II")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(f)
            (rank,) = _unpack(f, "<I")
            shape = _unpack(f, f"<{rank}Q") if rank else ()
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8")
            arrays[name] = data.astype(np.float64).reshape(shape)
        return arrays


# -- raw frame sequences ---------------------------------------------------


@dataclass
class FrameSequence:
    frames: list[Frame]
    fps: float


def write_frames(target, seq: FrameSequence) -> None:
    if not seq.frames:
        raise ValueError("cannot write an empty frame sequence")
    h, w = seq.frames[0].intensities.shape
    with _open(target, "wb") as f:
        f.write(VIDEO_MAGIC)
        f.write(struct.pack("<IIId", w, h, len(seq.frames), seq.fps))
        for frame in seq.frames:
            if frame.intensities.shape != (h, w):
                raise ValueError("all frames must share one size")
            f.write(np.floor(frame.intensities * 255.0 + 0.5).astype(np.uint8).tobytes())


def read_frames(source) -> FrameSequence:
    with _open(source, "rb") as f:
        _expect_magic(f, VIDEO_MAGIC)
        w, h, n, fps = _unpack(f, "<IIId")
        frames = []
        for _ in range(n):
            plane = np.frombuffer(_read_exact(f, w * h), dtype=np.uint8).reshape(h, w)
            frames.append(Frame(plane / 255.0))
        return FrameSequence(frames, fps)


# -- flow exports ----------------------------------------------------------


def write_flow(target, flows: list[QuantizedFlow]) -> None:
    """Only the u and v planes are written; no intensity data exists here."""
    if not flows:
        raise ValueError("cannot write an empty flow sequence")
    h, w = flows[0].u.shape
    clip = flows[0].clip
    with _open(target, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<IIId", w, h, len(flows), clip))
        for q in flows:
            if q.u.shape != (h, w) or q.v.shape != (h, w) or q.clip != clip:
                raise ValueError("all flow planes must share size and clip")
            f.write(np.asarray(q.u, dtype=np.uint8).tobytes())
            f.write(np.asarray(q.v, dtype=np.uint8).tobytes())


def read_flow(source) -> list[QuantizedFlow]:
    with _open(source, "rb") as f:
        _expect_magic(f, FLOW_MAGIC)
        w, h, n, clip = _unpack(f, "<IIId")
        flows = []
        for _ in range(n):
            u = np.frombuffer(_read_exact(f, w * h), dtype=np.uint8).reshape(h, w).copy()
            v = np.frombuffer(_read_exact(f, w * h), dtype=np.uint8).reshape(h, w).copy()
            flows.append(QuantizedFlow(u, v, clip))
        return flows


# -- feature files ---------------------------------------------------------


def write_features(target, record: SampleRecord) -> None:
    feats = np.asarray(record.features)
    if feats.shape[1] != FEATURE_DIM:
        raise ValueError(f"feature dim must be {FEATURE_DIM}, got {feats.shape[1]}")
    if not 0 <= record.label <= 255:
        raise ValueError("label must fit in one byte")
    with _open(target, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", FEATURE_VERSION))
        _write_str(f, record.sample_id)
        _write_str(f, record.patient_id)
        f.write(struct.pack("<BdII", record.label, record.duration, feats.shape[0], feats.shape[1]))
        f.write(feats.astype("<f4").tobytes())


def read_features(source) -> SampleRecord:
    with _open(source, "rb") as f:
        _expect_magic(f, FEATURE_MAGIC)
        (version,) = _unpack(f, "<I")
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        sample_id = _read_str(f)
        patient_id = _read_str(f)
        label, duration, frames, dim = _unpack(f, "<BdII")
        if dim != FEATURE_DIM:
            raise FormatError(f"feature dim must be {FEATURE_DIM}, got {dim}")
        raw = np.frombuffer(_read_exact(f, 4 * frames * dim), dtype="<f4")
        return SampleRecord(sample_id, patient_id, label, duration, raw.astype(np.float64).reshape(frames, dim))


def to_bytes(writer, obj) -> bytes:
    buf = io.BytesIO()
    writer(buf, obj)
    return buf.getvalue()
