"""Losses, the ground-truth match set, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import FlowSample, epe_metrics
from .fields import FULL, FlowField
from .numerics import (
    ParamStore,
    Tensor,
    absolute,
    gather_flat,
    log_clamped,
    no_grad,
    tmean,
    tsum,
)
from .pipeline import ModelConfig, ModelParams, PipelineOutput, forward


@dataclass
class GtMatchSet:
    """Which 1/8-grid cells have a trustworthy integer correspondence.

    targets[i, j] is the rounded (row, col) target cell; mask marks cells
    that are unoccluded at their full-resolution anchor and whose target
    stays inside the map.
    """

    targets: np.ndarray  # (H1, W1, 2) int
    mask: np.ndarray     # (H1, W1) bool


def gt_match_set(gt: FlowField, occlusion: np.ndarray) -> GtMatchSet:
    """Project full-resolution ground truth onto the 1/8 matching grid.

    Each grid cell (i, j) is anchored at full-resolution center
    (8i + 3.5, 8j + 3.5); the flow there (sampled bilinearly, divided by 8)
    rounds to the target cell.  Occlusion is read at the floor of the
    anchor, the nearest whole pixel toward the origin.
    """
    arr = gt.require(FULL).array
    _, H, W = arr.shape
    if occlusion.shape != (H, W):
        raise ValueError(
            f"occlusion shape {occlusion.shape} does not match flow {H}x{W}")
    H1, W1 = H // 8, W // 8
    ir, jc = np.mgrid[0:H1, 0:W1]
    cr = 8.0 * ir + 3.5
    cc = 8.0 * jc + 3.5
    from .dataio import _bilinear_np

    f = _bilinear_np(arr, cr, cc) / 8.0          # (2, H1, W1) in grid units
    tr = np.floor(ir + f[1] + 0.5).astype(np.int64)
    tc = np.floor(jc + f[0] + 0.5).astype(np.int64)
    occ = occlusion[np.floor(cr).astype(np.int64), np.floor(cc).astype(np.int64)]
    in_bounds = (tr >= 0) & (tr < H1) & (tc >= 0) & (tc < W1)
    return GtMatchSet(np.stack([tr, tc], axis=-1), (~occ) & in_bounds)


def matching_loss(confidence: Tensor, gt: GtMatchSet) -> tuple[Tensor, bool]:
    """Mean negative log confidence at the true matches.

    Returns (loss, empty): when the ground-truth match set is empty the
    loss is a constant zero and empty is True so callers can flag it.
    """
    H1, W1, H2, W2 = confidence.shape
    if gt.mask.shape != (H1, W1):
        raise ValueError(
            f"match-set shape {gt.mask.shape} does not match confidence source {H1}x{W1}")
    if not gt.mask.any():
        return Tensor(np.zeros((), dtype=confidence.dtype)), True
    src = np.flatnonzero(gt.mask.reshape(-1))
    tgt = gt.targets.reshape(-1, 2)[src]
    flat_idx = src * (H2 * W2) + tgt[:, 0] * W2 + tgt[:, 1]
    picked = gather_flat(confidence, flat_idx)
    return -tmean(log_clamped(picked, 1e-12)), False


def sequence_loss(flows: list[FlowField], gt: FlowField, decay: float = 0.8,
                  valid: np.ndarray | None = None) -> Tensor:
    """Decay-weighted L1 over the refinement sequence at full resolution.

    The i-th of T estimates carries weight decay^(T-i); each term is the
    mean absolute error over pixels and both flow channels.
    """
    if not flows:
        raise ValueError("sequence_loss needs at least one flow estimate")
    g = gt.require(FULL)
    garr = g.array
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            raise ValueError("sequence_loss: no valid pixels")
        weights = valid.astype(garr.dtype)
        denom = 2.0 * float(valid.sum())
    T = len(flows)
    total = None
    for i, f in enumerate(flows, start=1):
        fv = f.require(FULL).values
        if not isinstance(fv, Tensor):
            fv = Tensor(fv)
        if fv.shape != garr.shape:
            raise ValueError(
                f"flow estimate {i} has shape {fv.shape}, ground truth is {garr.shape}")
        diff = absolute(fv - garr)
        if valid is not None:
            term = tsum(diff * weights[None]) * (1.0 / denom)
        else:
            term = tmean(diff)
        term = term * (decay ** (T - i))
        total = term if total is None else total + term
    return total


@dataclass
class LossConfig:
    """Weights tying the matching and refinement objectives together."""

    match_weight: float = 1.0
    decay: float = 0.8

    def __post_init__(self):
        if self.match_weight < 0:
            raise ValueError(f"match_weight must be >= 0, got {self.match_weight}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")


@dataclass
class LossBreakdown:
    total: Tensor
    sequence: Tensor
    matching: Tensor
    match_set_empty: bool


def total_loss(output: PipelineOutput, sample: FlowSample,
               cfg: LossConfig | None = None) -> LossBreakdown:
    """Refinement loss plus weighted matching loss for one sample."""
    cfg = cfg or LossConfig()
    gt_set = gt_match_set(sample.flow, sample.occlusion)
    l_match, empty = matching_loss(output.confidence, gt_set)
    l_seq = sequence_loss(output.flows_full, sample.flow, cfg.decay,
                          valid=~sample.occlusion)
    return LossBreakdown(l_seq + l_match * cfg.match_weight, l_seq, l_match, empty)


class Adam:
    """Standard Adam with in-place parameter updates."""

    def __init__(self, store: ParamStore, lr: float = 2e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m += (1 - self.b1) * (p.grad - m)
            v += (1 - self.b2) * (p.grad * p.grad - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    """Optimization schedule; seed covers batch order only (init is separate)."""

    steps: int = 600
    lr: float = 2e-3
    warmup: int = 30
    clip: float = 1.0
    batch_size: int = 2
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")


@dataclass
class TraceRow:
    """One logged optimization step."""

    step: int
    total: float
    sequence: float
    matching: float
    train_aepe: float

    HEADER = "step\ttotal_loss\tsequence_loss\tmatching_loss\ttrain_aepe"

    def line(self) -> str:
        return (f"{self.step}\t{self.total:.6f}\t{self.sequence:.6f}"
                f"\t{self.matching:.6f}\t{self.train_aepe:.6f}")


def train(model: ModelParams, cfg: ModelConfig, dataset: list[FlowSample],
          tcfg: TrainConfig | None = None, lcfg: LossConfig | None = None,
          *, use_matching_init: bool = True, on_row=None) -> list[TraceRow]:
    """Adam loop over the dataset with gradient accumulation per batch.

    Aborts with an error naming the step if the loss goes non-finite.
    Returns the logged trace (always including the final step); on_row, if
    given, receives each TraceRow as it is produced.
    """
    if not dataset:
        raise ValueError("train: the dataset is empty")
    tcfg = tcfg or TrainConfig()
    lcfg = lcfg or LossConfig()
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(model.store, lr=tcfg.lr)
    trace: list[TraceRow] = []
    for step in range(1, tcfg.steps + 1):
        picks = rng.integers(0, len(dataset), size=tcfg.batch_size)
        model.store.zero_grad()
        tot = seq = mat = aepe = 0.0
        for idx in picks:
            sample = dataset[idx]
            out = forward(model, cfg, sample.image1, sample.image2,
                          use_matching_init=use_matching_init)
            losses = total_loss(out, sample, lcfg)
            if not math.isfinite(float(losses.total.data)):
                raise ValueError(f"train: non-finite loss at step {step}")
            (losses.total * (1.0 / tcfg.batch_size)).backward()
            tot += float(losses.total.data) / tcfg.batch_size
            seq += float(losses.sequence.data) / tcfg.batch_size
            mat += float(losses.matching.data) / tcfg.batch_size
            with no_grad():
                rep = epe_metrics(out.final_flow, sample.flow, valid=~sample.occlusion)
            aepe += rep.aepe / tcfg.batch_size
        model.store.clip_grad_norm(tcfg.clip)
        lr = tcfg.lr * min(1.0, step / tcfg.warmup) if tcfg.warmup else tcfg.lr
        opt.step(lr)
        if step % tcfg.log_every == 0 or step == tcfg.steps or step == 1:
            row = TraceRow(step, tot, seq, mat, aepe)
            trace.append(row)
            if on_row is not None:
                on_row(row)
    return trace


def evaluate(model: ModelParams, cfg: ModelConfig, dataset: list[FlowSample],
             *, use_matching_init: bool = True):
    """Pooled endpoint-error report over a dataset (non-occluded pixels)."""
    preds, gts, valids = [], [], []
    with no_grad():
        for sample in dataset:
            out = forward(model, cfg, sample.image1, sample.image2,
                          use_matching_init=use_matching_init)
            preds.append(out.final_flow.array)
            gts.append(sample.flow.array)
            valids.append(~sample.occlusion)
    pred = np.concatenate([p.reshape(2, -1) for p in preds], axis=1)[:, None, :]
    gt = np.concatenate([g.reshape(2, -1) for g in gts], axis=1)[:, None, :]
    valid = np.concatenate([v.reshape(-1) for v in valids])[None, :]
    return epe_metrics(pred, gt, valid)
