"""Iterative flow refinement with a convolutional GRU.

Each step samples the cost volume around the current flow estimate
(bilinear lookup over a small offset stencil), feeds that plus the flow
and a context map into a ConvGRU, and emits a residual flow update.
Weights are shared across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import EIGHTH, FULL, FlowField
from .matcher import CostVolume
from .numerics import (
    ParamStore,
    Tensor,
    add_conv,
    concat,
    conv2d,
    relu,
    reshape,
    sample_volumes,
    sigmoid,
    tanh,
    transpose,
    upsample_bilinear,
)


@dataclass
class RefinerConfig:
    """Iteration count, lookup stencil, and GRU width."""

    iters: int = 4
    radius: int = 3
    hidden_dim: int = 32
    ball: str = "l1"

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.ball not in ("l1", "linf"):
            raise ValueError(f"ball must be 'l1' or 'linf', got {self.ball!r}")


def lookup_offsets(radius: int, ball: str = "l1") -> np.ndarray:
    """Integer (row, col) stencil offsets, sorted by row then column.

    The default L1 ball is strict: ||delta||_1 < radius, which gives
    2 r^2 - 2 r + 1 offsets.  The 'linf' variant uses the full square of
    side 2r - 1.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    offs = []
    for dr in range(-(radius - 1), radius):
        for dc in range(-(radius - 1), radius):
            if ball == "l1" and abs(dr) + abs(dc) >= radius:
                continue
            offs.append((dr, dc))
    return np.asarray(offs, dtype=np.int64)


def lookup(cv: CostVolume, flow: FlowField, radius: int = 3, ball: str = "l1") -> Tensor:
    """Sample the cost volume around flow-displaced targets.

    For source pixel x and each stencil offset delta, bilinearly reads
    C(x, x + f(x) + delta); samples outside the target map are 0.  Output
    is (K, H1, W1) with offsets in sorted (row, col) order.  Gradients
    flow into both the cost volume and the flow.
    """
    flow.require(EIGHTH)
    H1, W1 = cv.source_shape
    H2, W2 = cv.target_shape
    if flow.shape[1] != H1 or flow.shape[2] != W1:
        raise ValueError(
            f"flow spatial size {flow.shape[1:]} does not match cost volume source {H1}x{W1}")
    offs = lookup_offsets(radius, ball)
    K = offs.shape[0]
    P = H1 * W1
    vol = reshape(cv.values, (P, H2, W2))

    fv = flow.values if isinstance(flow.values, Tensor) else Tensor(flow.values)
    rows = np.arange(H1, dtype=fv.dtype)[:, None] * np.ones((1, W1), dtype=fv.dtype)
    cols = np.ones((H1, 1), dtype=fv.dtype) * np.arange(W1, dtype=fv.dtype)[None, :]
    r_c = reshape(fv[1] + rows, (P, 1)) + offs[:, 0].astype(fv.dtype)[None, :]
    c_c = reshape(fv[0] + cols, (P, 1)) + offs[:, 1].astype(fv.dtype)[None, :]
    coords = concat([reshape(r_c, (P, K, 1)), reshape(c_c, (P, K, 1))], axis=2)

    sampled = sample_volumes(vol, coords)                  # (P, K)
    return reshape(transpose(sampled, (1, 0)), (K, H1, W1))


@dataclass
class RefinerParams:
    """Context/initial-hidden projections, motion encoder, GRU gates, flow head."""

    context_w: Tensor
    context_b: Tensor
    hidden_w: Tensor
    hidden_b: Tensor
    motion1_w: Tensor
    motion1_b: Tensor
    motion2_w: Tensor
    motion2_b: Tensor
    reset_w: Tensor
    reset_b: Tensor
    update_w: Tensor
    update_b: Tensor
    cand_w: Tensor
    cand_b: Tensor
    head_w: Tensor
    head_b: Tensor

    _NAMES = ("context", "hidden_init", "motion1", "motion2",
              "gate_reset", "gate_update", "candidate", "flow_head")

    @classmethod
    def create(cls, store: ParamStore, prefix: str, feat_dim: int, cfg: RefinerConfig,
               rng: np.random.Generator, dtype=np.float32) -> "RefinerParams":
        ch = cfg.hidden_dim
        K = lookup_offsets(cfg.radius, cfg.ball).shape[0]
        x_dim = 2 + 2 * ch  # flow + context + encoded motion
        dims = {
            "context": (ch, feat_dim), "hidden_init": (ch, feat_dim),
            "motion1": (ch, K + 2), "motion2": (ch, ch),
            "gate_reset": (ch, ch + x_dim), "gate_update": (ch, ch + x_dim),
            "candidate": (ch, ch + x_dim), "flow_head": (2, ch),
        }
        tensors = []
        for name in cls._NAMES:
            c_out, c_in = dims[name]
            tensors.extend(add_conv(store, f"{prefix}.{name}", rng, c_out, c_in, 3, dtype))
        return cls(*tensors)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "RefinerParams":
        tensors = []
        for name in cls._NAMES:
            tensors.append(store[f"{prefix}.{name}.weight"])
            tensors.append(store[f"{prefix}.{name}.bias"])
        return cls(*tensors)


@dataclass
class GruState:
    """Recurrent hidden map plus the static context map."""

    hidden: Tensor
    context: Tensor
    step: int = 0


def _conv3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return conv2d(x, w, stride=1, padding=1) + reshape(b, (b.shape[0], 1, 1))


def init_state(feat1: Tensor, params: RefinerParams) -> GruState:
    """Project image-1 features into the context map and initial hidden state."""
    context = relu(_conv3(feat1, params.context_w, params.context_b))
    hidden = tanh(_conv3(feat1, params.hidden_w, params.hidden_b))
    return GruState(hidden, context)


def gru_update(state: GruState, flow: Tensor, cv: CostVolume,
               params: RefinerParams, cfg: RefinerConfig) -> tuple[GruState, Tensor]:
    """One GRU step: returns the new state and a (2, H, W) flow residual."""
    lk = lookup(cv, FlowField(flow, EIGHTH), cfg.radius, cfg.ball)
    m = relu(_conv3(concat([lk, flow], axis=0), params.motion1_w, params.motion1_b))
    m = relu(_conv3(m, params.motion2_w, params.motion2_b))
    x = concat([flow, state.context, m], axis=0)
    hx = concat([state.hidden, x], axis=0)
    r = sigmoid(_conv3(hx, params.reset_w, params.reset_b))
    z = sigmoid(_conv3(hx, params.update_w, params.update_b))
    cand = tanh(_conv3(concat([r * state.hidden, x], axis=0), params.cand_w, params.cand_b))
    hidden = (1.0 - z) * state.hidden + z * cand
    delta = _conv3(hidden, params.head_w, params.head_b)
    return GruState(hidden, state.context, state.step + 1), delta


def refine(feat1: Tensor, cv: CostVolume, init_flow: FlowField,
           params: RefinerParams, cfg: RefinerConfig) -> list[FlowField]:
    """Run cfg.iters GRU steps from init_flow; returns the estimate after
    each step (the initial flow itself is not included)."""
    init_flow.require(EIGHTH)
    state = init_state(feat1, params)
    flow = init_flow.values if isinstance(init_flow.values, Tensor) else Tensor(init_flow.values)
    out: list[FlowField] = []
    for _ in range(cfg.iters):
        state, delta = gru_update(state, flow, cv, params, cfg)
        flow = flow + delta
        out.append(FlowField(flow, EIGHTH))
    return out


def upsample_flow(flow: FlowField) -> FlowField:
    """Bilinear 8x upsampling with displacement values scaled by 8."""
    flow.require(EIGHTH)
    fv = flow.values if isinstance(flow.values, Tensor) else Tensor(flow.values)
    return FlowField(upsample_bilinear(fv, 8) * 8.0, FULL)
