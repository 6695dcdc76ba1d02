"""Synthetic flow data, .flo file I/O, color rendering, and metrics.

Everything here is tape-free numpy; only the forward model needs
gradients.  Flow arrays follow the package convention: channel 0 is u
(column displacement), channel 1 is v (row displacement).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import EIGHTH, FULL, FlowField
from .matcher import CostVolume

FLO_MAGIC = 202021.25
_MAX_FLO_EXTENT = 100_000

TEXTURES = ("blobs", "gradients", "checker")
WARPS = ("translation", "affine", "affine_sin")

# Displacement-magnitude bins (full-resolution pixels), half-open.
BIN_RANGES: dict[str, tuple[float, float]] = {
    "s0-10": (0.0, 10.0),
    "s10-40": (10.0, 40.0),
    "s40+": (40.0, math.inf),
}


@dataclass
class SynthSpec:
    """Recipe for one synthetic pair; identical specs give identical bits."""

    size: tuple[int, int] = (64, 64)      # (H, W), each divisible by 8
    texture: str = "blobs"
    warp: str = "affine"
    max_displacement: float = 12.0
    seed: int = 0
    translation: tuple[float, float] | None = None  # fixed (u, v) override

    def __post_init__(self):
        H, W = self.size
        if H % 8 or W % 8 or H <= 0 or W <= 0:
            raise ValueError(f"size {H}x{W} must be positive and divisible by 8")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.warp not in WARPS:
            raise ValueError(f"warp must be one of {WARPS}, got {self.warp!r}")
        if not 0 < self.max_displacement < min(H, W) / 2:
            raise ValueError(
                f"max_displacement {self.max_displacement} must lie in (0, {min(H, W) / 2}) "
                f"for a {H}x{W} image")
        if self.translation is not None and self.warp != "translation":
            raise ValueError("a fixed translation requires warp='translation'")


@dataclass
class FlowSample:
    """Image pair, dense ground-truth flow, and the occlusion mask.

    occlusion[r, c] is True when pixel (r, c) of image1 maps outside
    image2's frame, so it has no visible correspondence.
    """

    image1: np.ndarray   # (3, H, W) float32 in [0, 1]
    image2: np.ndarray
    flow: FlowField      # full resolution
    occlusion: np.ndarray  # (H, W) bool


def _bilinear_np(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Plain-numpy bilinear sample of (C, H, W) at float (row, col) arrays."""
    C, H, W = grid.shape
    r = np.clip(rows, 0, H - 1)
    c = np.clip(cols, 0, W - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), H - 2) if H > 1 else np.zeros_like(r, np.int64)
    c0 = np.minimum(np.floor(c).astype(np.int64), W - 2) if W > 1 else np.zeros_like(c, np.int64)
    wr = r - r0
    wc = c - c0
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    out = ((1 - wr) * (1 - wc) * grid[:, r0, c0] + (1 - wr) * wc * grid[:, r0, c1]
           + wr * (1 - wc) * grid[:, r1, c0] + wr * wc * grid[:, r1, c1])
    return out.astype(grid.dtype)


def _texture(rng: np.random.Generator, kind: str, Hc: int, Wc: int) -> np.ndarray:
    """Smooth (3, Hc, Wc) canvas in [0, 1]; smoothness keeps resampling honest."""
    rr = np.arange(Hc, dtype=np.float64)[:, None]
    cc = np.arange(Wc, dtype=np.float64)[None, :]
    canvas = np.zeros((3, Hc, Wc), dtype=np.float64)

    if kind in ("gradients", "checker"):
        for ch in range(3):
            for _ in range(4):
                wavelength = rng.uniform(0.25, 1.2) * min(Hc, Wc)
                theta = rng.uniform(0, 2 * np.pi)
                phase = rng.uniform(0, 2 * np.pi)
                proj = (rr * np.cos(theta) + cc * np.sin(theta)) / wavelength
                canvas[ch] += rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * proj + phase)
    if kind == "checker":
        # Soft-edged board: hard edges would not survive bilinear resampling.
        period = rng.uniform(14, 22)
        phase_r, phase_c = rng.uniform(0, 2 * np.pi, size=2)
        board = np.sin(2 * np.pi * rr / period + phase_r) * np.sin(2 * np.pi * cc / period + phase_c)
        canvas += 0.8 * np.tanh(1.3 * board)
    if kind in ("blobs", "checker"):
        n_blobs = max(24, (Hc * Wc) // 40)
        centers_r = rng.uniform(0, Hc, n_blobs)
        centers_c = rng.uniform(0, Wc, n_blobs)
        radii = rng.uniform(1.6, 5.0, n_blobs)
        amps = rng.uniform(-0.9, 0.9, (n_blobs, 3))
        for i in range(n_blobs):
            bump = np.exp(-((rr - centers_r[i]) ** 2 + (cc - centers_c[i]) ** 2)
                          / (2 * radii[i] ** 2))
            canvas += amps[i][:, None, None] * bump

    std = canvas.std()
    if std > 0:
        canvas = (canvas - canvas.mean()) / std
    return (0.5 + 0.45 * np.tanh(canvas)).astype(np.float32)


def _make_warp(rng: np.random.Generator, spec: SynthSpec):
    """Analytic forward warp f(rows, cols) -> (u, v) and its inverse g(rows, cols).

    All families are built so the largest displacement over the image does
    not exceed spec.max_displacement.
    """
    H, W = spec.size
    cr, cc = (H - 1) / 2.0, (W - 1) / 2.0
    md = spec.max_displacement

    if spec.warp == "translation":
        if spec.translation is not None:
            tu, tv = float(spec.translation[0]), float(spec.translation[1])
            if math.hypot(tu, tv) > md:
                raise ValueError(
                    f"fixed translation {spec.translation} exceeds max_displacement {md}")
        else:
            angle = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0.3, 1.0) * md
            tu, tv = mag * math.cos(angle), mag * math.sin(angle)

        def fwd(rows, cols):
            return np.full_like(rows, tu, dtype=np.float64), np.full_like(rows, tv, np.float64)

        def inv(rows, cols):
            return rows - tv, cols - tu

        return fwd, inv

    # Affine part, shared by both remaining families.
    D = rng.uniform(-0.08, 0.08, size=(2, 2))          # deviation from identity
    b = rng.uniform(-0.4, 0.4, size=2) * md            # (d_row, d_col)
    sin_terms = []
    if spec.warp == "affine_sin":
        for _ in range(2):                             # one term per flow component
            amp = rng.uniform(0.1, 0.3) * md
            wavelength = rng.uniform(0.8, 1.6) * max(H, W)
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            sin_terms.append((amp, wavelength, theta, phase))

    def displacement(rows, cols, scale):
        rc, cl = rows - cr, cols - cc
        dv = scale * (D[0, 0] * rc + D[0, 1] * cl + b[0])
        du = scale * (D[1, 0] * rc + D[1, 1] * cl + b[1])
        for i, (amp, wl, th, ph) in enumerate(sin_terms):
            proj = (rows * math.cos(th) + cols * math.sin(th)) / wl
            wave = scale * amp * np.sin(2 * np.pi * proj + ph)
            if i == 0:
                dv = dv + wave
            else:
                du = du + wave
        return du, dv

    # One linear rescale caps the magnitude; every term scales with `scale`.
    grid_r, grid_c = np.mgrid[0:H, 0:W].astype(np.float64)
    du, dv = displacement(grid_r, grid_c, 1.0)
    peak = float(np.hypot(du, dv).max())
    scale = min(1.0, 0.98 * md / peak) if peak > 0 else 1.0
    # Keep the sinusoidal part a contraction so the inverse iteration converges.
    slope = sum(abs(s * scale) * 2 * np.pi / wl for s, wl, _, _ in sin_terms)
    if slope > 0.5:
        scale *= 0.5 / slope

    A = np.eye(2) + D * scale
    A_inv = np.linalg.inv(A)

    def fwd(rows, cols):
        return displacement(rows, cols, scale)

    def inv(rows, cols):
        # Affine-only closed form; sinusoidal part handled by fixed point.
        tr = rows - b[0] * scale - cr
        tc = cols - b[1] * scale - cc
        xr = A_inv[0, 0] * tr + A_inv[0, 1] * tc + cr
        xc = A_inv[1, 0] * tr + A_inv[1, 1] * tc + cc
        if sin_terms:
            for _ in range(30):
                du_i, dv_i = displacement(xr, xc, scale)
                xr = rows - dv_i
                xc = cols - du_i
        return xr, xc

    return fwd, inv


def synth_pair(spec: SynthSpec) -> FlowSample:
    """Render a deterministic image pair with exact dense ground truth.

    image2 is produced by sampling a shared oversized canvas at inversely
    warped coordinates, so image1 and the warped image2 agree photometrically
    everywhere the target stays in frame.
    """
    rng = np.random.default_rng(spec.seed)
    H, W = spec.size
    pad = int(math.ceil(spec.max_displacement)) + 2
    canvas = _texture(rng, spec.texture, H + 2 * pad, W + 2 * pad)
    fwd, inv = _make_warp(rng, spec)

    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    du, dv = fwd(rows, cols)
    flow = np.stack([du, dv]).astype(np.float32)

    tr, tc = rows + dv, cols + du
    occlusion = (tr < 0) | (tr > H - 1) | (tc < 0) | (tc > W - 1)

    image1 = canvas[:, pad:pad + H, pad:pad + W].copy()
    src_r, src_c = inv(rows, cols)
    image2 = _bilinear_np(canvas, src_r + pad, src_c + pad)
    return FlowSample(image1, image2, FlowField(flow, FULL), occlusion)


def make_dataset(count: int, spec: SynthSpec) -> list[FlowSample]:
    """count pairs drawn from the same recipe with consecutive seeds."""
    samples = []
    for i in range(count):
        s = SynthSpec(spec.size, spec.texture, spec.warp, spec.max_displacement,
                      spec.seed + i, spec.translation)
        samples.append(synth_pair(s))
    return samples


# -- .flo files ------------------------------------------------------------


def write_flo(path: str, flow: FlowField | np.ndarray):
    """Write a flow field in the standard .flo layout (little-endian)."""
    arr = flow.require(FULL).array if isinstance(flow, FlowField) else np.asarray(flow)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {arr.shape}")
    _, H, W = arr.shape
    with open(path, "wb") as f:
        np.asarray([FLO_MAGIC], dtype="<f4").tofile(f)
        np.asarray([W, H], dtype="<i4").tofile(f)
        np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tofile(f)


def read_flo(path: str) -> FlowField:
    """Read a .flo file; raises ValueError naming the file on any defect."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise ValueError(f"{path}: too short to be a .flo file ({len(blob)} bytes)")
    magic = np.frombuffer(blob, dtype="<f4", count=1)[0]
    if not np.isclose(magic, FLO_MAGIC):
        raise ValueError(f"{path}: bad .flo magic number {magic!r}")
    W, H = (int(x) for x in np.frombuffer(blob, dtype="<i4", count=2, offset=4))
    if not (0 < W <= _MAX_FLO_EXTENT and 0 < H <= _MAX_FLO_EXTENT):
        raise ValueError(f"{path}: implausible .flo extents {W}x{H}")
    expected = 12 + 8 * H * W
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated or oversized .flo payload ({len(blob)} bytes, expected {expected})")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(H, W, 2)
    return FlowField(np.ascontiguousarray(data.transpose(2, 0, 1)), FULL)


# -- rendering -------------------------------------------------------------


def flow_to_color(flow: FlowField | np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Direction-as-hue, magnitude-as-saturation rendering; (H, W, 3) uint8.

    Zero flow renders white.  max_norm fixes the saturation scale (defaults
    to the field's own maximum).
    """
    from matplotlib.colors import hsv_to_rgb

    arr = flow.array if isinstance(flow, FlowField) else np.asarray(flow)
    u, v = arr[0].astype(np.float64), arr[1].astype(np.float64)
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag.max())
    hsv = np.zeros(u.shape + (3,), dtype=np.float64)
    hsv[..., 0] = (np.arctan2(-v, -u) / (2 * np.pi) + 0.5) % 1.0
    hsv[..., 1] = np.clip(mag / max_norm, 0, 1) if max_norm > 0 else 0.0
    hsv[..., 2] = 1.0
    return (hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


# -- metrics ---------------------------------------------------------------


@dataclass
class EpeReport:
    """Average endpoint error overall, per displacement bin, and outlier rate."""

    aepe: float
    fl_all: float
    count: int
    bins: dict[str, tuple[float, int]]  # name -> (aepe, pixel count)

    def rows(self) -> list[tuple[str, float, int]]:
        out = [(name, *self.bins[name]) for name in BIN_RANGES]
        out.append(("All", self.aepe, self.count))
        return out


def epe_metrics(pred: FlowField | np.ndarray, gt: FlowField | np.ndarray,
                valid: np.ndarray | None = None) -> EpeReport:
    """Endpoint-error statistics over the valid mask (default: all pixels).

    Bins partition pixels by ground-truth magnitude; the outlier rate
    counts pixels whose error exceeds both 3 px and 5% of the true
    magnitude.  Raises if no pixel is valid.
    """
    p = pred.require(FULL).array if isinstance(pred, FlowField) else np.asarray(pred)
    g = gt.require(FULL).array if isinstance(gt, FlowField) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if valid is None:
        valid = np.ones(p.shape[1:], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("epe_metrics: no valid pixels to evaluate")

    epe = np.hypot(*(p - g)).astype(np.float64)[valid]
    mag = np.hypot(g[0], g[1]).astype(np.float64)[valid]
    bins = {}
    for name, (lo, hi) in BIN_RANGES.items():
        sel = (mag >= lo) & (mag < hi)
        cnt = int(sel.sum())
        bins[name] = (float(epe[sel].mean()) if cnt else float("nan"), cnt)
    outlier = (epe > 3.0) & (epe > 0.05 * mag)
    return EpeReport(float(epe.mean()), float(outlier.mean()), n, bins)


# -- cost-volume inspection ------------------------------------------------


def costvol_vis(cv: CostVolume | np.ndarray, gt_flow: FlowField,
                bin_name: str, window: int = 8) -> np.ndarray:
    """Average local match distribution around the true target, per bin.

    For every source position whose full-resolution ground-truth magnitude
    falls in the named bin, take a softmax of the cost slice over the
    (2*window)^2 patch whose top-left sits window cells up-left of the
    rounded true target, and average these maps.  Positions whose window
    leaves the target map are skipped; raises if the bin ends up empty.
    A sharp matcher concentrates mass at the center cell (window, window).
    """
    vals = cv.values.data if isinstance(cv, CostVolume) else np.asarray(cv)
    if vals.ndim != 4:
        raise ValueError(f"cost volume must be 4-d, got shape {vals.shape}")
    if bin_name not in BIN_RANGES:
        raise ValueError(f"unknown bin {bin_name!r}; expected one of {list(BIN_RANGES)}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    gt = gt_flow.require(EIGHTH)
    H1, W1, H2, W2 = vals.shape
    if gt.shape[1:] != (H1, W1):
        raise ValueError(
            f"flow spatial size {gt.shape[1:]} does not match cost volume source {H1}x{W1}")
    lo, hi = BIN_RANGES[bin_name]
    arr = gt.array
    acc = np.zeros((2 * window, 2 * window), dtype=np.float64)
    used = 0
    for i in range(H1):
        for j in range(W1):
            u, v = float(arr[0, i, j]), float(arr[1, i, j])
            if not lo <= 8.0 * math.hypot(u, v) < hi:
                continue
            tr = int(math.floor(i + v + 0.5))
            tc = int(math.floor(j + u + 0.5))
            r0, c0 = tr - window, tc - window
            if r0 < 0 or c0 < 0 or r0 + 2 * window > H2 or c0 + 2 * window > W2:
                continue
            patch = vals[i, j, r0:r0 + 2 * window, c0:c0 + 2 * window].astype(np.float64)
            e = np.exp(patch - patch.max())
            acc += e / e.sum()
            used += 1
    if used == 0:
        raise ValueError(
            f"costvol_vis: no usable source positions in bin {bin_name!r} "
            f"(window {window} must fit inside the target map)")
    return acc / used


def coarse_from_full(gt: FlowField) -> FlowField:
    """Average-pool a full-resolution flow to 1/8 grid units."""
    arr = gt.require(FULL).array
    _, H, W = arr.shape
    pooled = arr.reshape(2, H // 8, 8, W // 8, 8).mean(axis=(2, 4)) / 8.0
    return FlowField(pooled.astype(np.float32), EIGHTH)
