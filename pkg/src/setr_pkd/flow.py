"""Dense TV-L1 optical flow on grayscale frames.

Coarse-to-fine primal-dual solver in the Zach/Pock/Bischof formulation, with
the thresholding step and warping scheme of the usual reference implementation.
Intensities enter as floats in [0, 1] and are rescaled to [0, 255] inside the
solver so the customary lambda/theta defaults keep their meaning.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MIN_PYRAMID_SIZE = 8
MIN_FLOW_SIZE = 16
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class Frame:
    """A grayscale image, row-major, intensities in [0, 1]."""

    intensities: np.ndarray

    def __post_init__(self) -> None:
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 2 or self.intensities.size == 0:
            raise ValueError(f"frame must be a non-empty 2-D array, got shape {self.intensities.shape}")
        if not np.all(np.isfinite(self.intensities)):
            raise ValueError("frame intensities must be finite")
        if self.intensities.min() < 0.0 or self.intensities.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(np.clip(rgb @ np.asarray(LUMA_WEIGHTS), 0.0, 1.0))


@dataclass
class FlowField:
    """Per-pixel displacement: frame0(x, y) ~ frame1(x + u, y + v)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u and v must be equal 2-D shapes, got {self.u.shape} and {self.v.shape}")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class TvL1Params:
    lam: float = 0.15
    theta: float = 0.3
    tau: float = 0.125
    warps: int = 5
    iterations: int = 30
    levels: int = 5
    scale: float = 0.5
    epsilon: float = 1e-4
    median_filter: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 0.125:
            raise ValueError(f"tau must be in (0, 0.125] for a stable dual step, got {self.tau}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 < self.scale < 1.0:
            raise ValueError("scale must be in (0, 1)")
        if self.warps < 1 or self.iterations < 1:
            raise ValueError("warps and iterations must be >= 1")

    @classmethod
    def from_dict(cls, values: dict) -> "TvL1Params":
        known = set(asdict(cls()))
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown TV-L1 parameters: {sorted(unknown)}")
        return cls(**values)


def _resize(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and replicated borders."""
    h, w = image.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode="nearest")


def _level_shape(shape: tuple[int, int], scale: float, level: int) -> tuple[int, int]:
    factor = scale**level
    return (int(round(shape[0] * factor)), int(round(shape[1] * factor)))


def build_pyramid(frame: Frame, levels: int, scale: float) -> list[Frame]:
    """Gaussian pyramid, finest first.

    Levels that would shrink below 8x8 are dropped with a warning.
    """
    image = frame.intensities
    usable = 1
    while usable < levels and min(_level_shape(image.shape, scale, usable)) >= MIN_PYRAMID_SIZE:
        usable += 1
    if usable < levels:
        log.warning("pyramid clamped from %d to %d levels for a %dx%d frame", levels, usable, *image.shape)
    sigma = 0.6 * np.sqrt(1.0 / scale**2 - 1.0)
    pyramid = [frame]
    current = image
    for level in range(1, usable):
        smoothed = ndimage.gaussian_filter(current, sigma, mode="nearest")
        current = np.clip(_resize(smoothed, _level_shape(image.shape, scale, level)), 0.0, 1.0)
        pyramid.append(Frame(current))
    return pyramid


def _bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(image, [yy + v, xx + u], order=1, mode="nearest")


def warp(frame: Frame, flow: FlowField) -> Frame:
    """Sample ``frame`` at (x + u, y + v) with bilinear interpolation."""
    if (frame.height, frame.width) != (flow.height, flow.width):
        raise ValueError(
            f"frame {frame.height}x{frame.width} and flow {flow.height}x{flow.width} differ in size"
        )
    out = _bilinear(frame.intensities, flow.u, flow.v)
    return Frame(np.clip(out, 0.0, 1.0))


def _outside(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = u.shape
    yy, xx = np.mgrid[0:h, 0:w]
    x = xx + u
    y = yy + v
    return (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)


def _centered_gradient(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(image, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


def _forward_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :-1] = f[:, 1:] - f[:, :-1]
    fy[:-1, :] = f[1:, :] - f[:-1, :]
    return fx, fy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_forward_gradient`."""
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def tv_l1_energy(prev: np.ndarray, nxt: np.ndarray, u: np.ndarray, v: np.ndarray, lam: float) -> float:
    """TV-L1 objective on [0, 255]-scaled intensities."""
    i0 = prev * 255.0
    i1w = _bilinear(nxt * 255.0, u, v)
    ux, uy = _forward_gradient(u)
    vx, vy = _forward_gradient(v)
    tv = np.sqrt(ux**2 + uy**2).sum() + np.sqrt(vx**2 + vy**2).sum()
    return float(tv + lam * np.abs(i1w - i0).sum())


def _solve_level(
    i0: np.ndarray,
    i1: np.ndarray,
    u1: np.ndarray,
    u2: np.ndarray,
    params: TvL1Params,
    trace: list[float] | None,
) -> tuple[np.ndarray, np.ndarray]:
    lt = params.lam * params.theta
    taut = params.tau / params.theta
    i1x, i1y = _centered_gradient(i1)
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    eps2 = params.epsilon**2
    for _ in range(params.warps):
        i1w = _bilinear(i1, u1, u2)
        i1wx = _bilinear(i1x, u1, u2)
        i1wy = _bilinear(i1y, u1, u2)
        # no data term where the warp leaves the frame; TV fills those pixels in
        outside = _outside(u1, u2)
        i1wx[outside] = 0.0
        i1wy[outside] = 0.0
        grad = i1wx**2 + i1wy**2
        rho_c = i1w - i1wx * u1 - i1wy * u2 - i0
        rho_c[outside] = 0.0
        safe = grad > 1e-10
        for _ in range(params.iterations):
            rho = rho_c + i1wx * u1 + i1wy * u2
            d1 = np.zeros_like(u1)
            d2 = np.zeros_like(u2)
            low = rho < -lt * grad
            high = rho > lt * grad
            mid = ~(low | high) & safe
            d1[low] = lt * i1wx[low]
            d2[low] = lt * i1wy[low]
            d1[high] = -lt * i1wx[high]
            d2[high] = -lt * i1wy[high]
            ratio = np.zeros_like(rho)
            ratio[mid] = rho[mid] / grad[mid]
            d1[mid] = -ratio[mid] * i1wx[mid]
            d2[mid] = -ratio[mid] * i1wy[mid]
            v1 = u1 + d1
            v2 = u2 + d2
            new_u1 = v1 + params.theta * _divergence(p11, p12)
            new_u2 = v2 + params.theta * _divergence(p21, p22)
            change = np.mean((new_u1 - u1) ** 2 + (new_u2 - u2) ** 2)
            u1, u2 = new_u1, new_u2
            u1x, u1y = _forward_gradient(u1)
            u2x, u2y = _forward_gradient(u2)
            ng1 = 1.0 + taut * np.sqrt(u1x**2 + u1y**2)
            ng2 = 1.0 + taut * np.sqrt(u2x**2 + u2y**2)
            p11 = (p11 + taut * u1x) / ng1
            p12 = (p12 + taut * u1y) / ng1
            p21 = (p21 + taut * u2x) / ng2
            p22 = (p22 + taut * u2y) / ng2
            if change < eps2:
                break
        if params.median_filter:
            u1 = ndimage.median_filter(u1, size=3, mode="nearest")
            u2 = ndimage.median_filter(u2, size=3, mode="nearest")
        if trace is not None:
            trace.append(tv_l1_energy(i0 / 255.0, i1 / 255.0, u1, u2, params.lam))
    return u1, u2


def tv_l1_flow(
    prev: Frame,
    nxt: Frame,
    params: TvL1Params | None = None,
    trace: list[float] | None = None,
) -> FlowField:
    """Estimate the flow that warps ``nxt`` back onto ``prev``.

    If ``trace`` is given, the TV-L1 energy after every warp of the finest
    level is appended to it.
    """
    params = params or TvL1Params()
    if prev.intensities.shape != nxt.intensities.shape:
        raise ValueError(
            f"frame sizes differ: {prev.intensities.shape} vs {nxt.intensities.shape}"
        )
    if min(prev.intensities.shape) < MIN_FLOW_SIZE:
        raise ValueError(f"frames must be at least {MIN_FLOW_SIZE}x{MIN_FLOW_SIZE}")
    pyr0 = build_pyramid(prev, params.levels, params.scale)
    pyr1 = build_pyramid(nxt, params.levels, params.scale)
    coarsest = pyr0[-1].intensities.shape
    u1 = np.zeros(coarsest)
    u2 = np.zeros(coarsest)
    for level in range(len(pyr0) - 1, -1, -1):
        i0 = pyr0[level].intensities * 255.0
        i1 = pyr1[level].intensities * 255.0
        if u1.shape != i0.shape:
            sy = i0.shape[0] / u1.shape[0]
            sx = i0.shape[1] / u1.shape[1]
            u1 = _resize(u1, i0.shape) * sx
            u2 = _resize(u2, i0.shape) * sy
        u1, u2 = _solve_level(i0, i1, u1, u2, params, trace if level == 0 else None)
    return FlowField(u1, u2)


def flow_sequence(frames: list[Frame], params: TvL1Params | None = None) -> list[FlowField]:
    """Flow for every consecutive frame pair."""
    return [tv_l1_flow(a, b, params) for a, b in zip(frames[:-1], frames[1:])]


@dataclass
class QuantizedFlow:
    """8-bit export of one flow field; only motion channels are stored."""

    u: np.ndarray
    v: np.ndarray
    clip: float

    def dequantize(self) -> FlowField:
        return FlowField(
            self.u.astype(np.float64) / 127.5 * self.clip - self.clip,
            self.v.astype(np.float64) / 127.5 * self.clip - self.clip,
        )


def _quantize_plane(x: np.ndarray, clip: float) -> np.ndarray:
    scaled = (np.clip(x, -clip, clip) / clip + 1.0) * 127.5
    return np.floor(scaled + 0.5).astype(np.uint8)


def flow_to_export(flow: FlowField, clip: float = 16.0) -> QuantizedFlow:
    """Clip to [-clip, clip] and map linearly onto 0..255, rounding half up."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    return QuantizedFlow(_quantize_plane(flow.u, clip), _quantize_plane(flow.v, clip), float(clip))
