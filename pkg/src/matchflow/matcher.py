"""Global matching between two feature maps.

Every position of map 1 is scored against every position of map 2 by a
plain dot product, giving a 4-d cost volume.  A softmax over each last
pair of axes, taken in both directions and multiplied, yields a matching
confidence; mutually consistent argmax pairs become a coarse integer
flow estimate at 1/8 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import EIGHTH, FlowField
from .numerics import Tensor, matmul, mul, reshape, softmax, transpose

# All-pairs scoring is quadratic in map area; at 1/8 scale this bound
# corresponds to full-resolution inputs of at most 96x96 pixels.
MAX_POSITIONS = 144


@dataclass
class CostVolume:
    """All-pairs similarity scores, shaped (H1, W1, H2, W2)."""

    values: Tensor

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass
class MatchResult:
    """Forward and backward argmax maps plus the mutual-consistency mask.

    target_12[i, j] holds the (row, col) in map 2 best matching (i, j);
    target_21 is the reverse direction; mutual marks map-1 positions whose
    best match points straight back at them.
    """

    target_12: np.ndarray  # (H1, W1, 2) int
    target_21: np.ndarray  # (H2, W2, 2) int
    mutual: np.ndarray     # (H1, W1) bool


def build_cost_volume(feat1: Tensor, feat2: Tensor) -> CostVolume:
    """Dot-product similarity of every map-1 position with every map-2 position."""
    if feat1.ndim != 3 or feat2.ndim != 3:
        raise ValueError(
            f"feature maps must be (d, H, W), got {feat1.shape} and {feat2.shape}")
    if feat1.shape[0] != feat2.shape[0]:
        raise ValueError(
            f"feature dims differ: {feat1.shape[0]} vs {feat2.shape[0]}")
    d, H1, W1 = feat1.shape
    _, H2, W2 = feat2.shape
    for tag, h, w in (("source", H1, W1), ("target", H2, W2)):
        if h * w > MAX_POSITIONS:
            raise ValueError(
                f"{tag} map {h}x{w} has {h * w} positions, above the all-pairs bound of "
                f"{MAX_POSITIONS} (full-resolution inputs must be at most 96x96 pixels)")
    f1 = reshape(transpose(feat1, (1, 2, 0)), (H1 * W1, d))
    f2 = reshape(transpose(feat2, (1, 2, 0)), (H2 * W2, d))
    scores = matmul(f1, transpose(f2, (1, 0)))
    return CostVolume(reshape(scores, (H1, W1, H2, W2)))


def match_confidence(cv: CostVolume, temperature: float = 1.0) -> Tensor:
    """Product of the source-to-target and target-to-source softmaxes.

    Returns a (H1, W1, H2, W2) tensor; slicing [i, j] gives a distribution-
    product over map-2 positions.  temperature divides the scores first.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    H1, W1 = cv.source_shape
    H2, W2 = cv.target_shape
    flat = reshape(cv.values, (H1 * W1, H2 * W2))
    if temperature != 1.0:
        flat = flat * (1.0 / temperature)
    fwd = softmax(flat, axis=1)
    bwd = softmax(flat, axis=0)
    return reshape(mul(fwd, bwd), (H1, W1, H2, W2))


def select_matches(confidence: Tensor | np.ndarray) -> MatchResult:
    """Argmax in both directions plus the mutual-consistency mask.

    Ties resolve to the smallest row-major linear index.  This is a hard
    selection; no gradients flow through it.
    """
    conf = confidence.data if isinstance(confidence, Tensor) else np.asarray(confidence)
    if conf.ndim != 4:
        raise ValueError(f"confidence must be 4-d, got shape {conf.shape}")
    H1, W1, H2, W2 = conf.shape
    flat = conf.reshape(H1 * W1, H2 * W2)
    fwd = flat.argmax(axis=1)   # first occurrence = smallest row-major index
    bwd = flat.argmax(axis=0)
    mutual = bwd[fwd] == np.arange(H1 * W1)
    target_12 = np.stack([fwd // W2, fwd % W2], axis=-1).reshape(H1, W1, 2)
    target_21 = np.stack([bwd // W1, bwd % W1], axis=-1).reshape(H2, W2, 2)
    return MatchResult(target_12.astype(np.int64), target_21.astype(np.int64),
                       mutual.reshape(H1, W1))


def coarse_flow(match: MatchResult) -> FlowField:
    """Integer displacement field from mutual matches; zero elsewhere.

    Output is at 1/8 resolution and carries no gradient; it seeds the
    iterative refiner.
    """
    H1, W1 = match.mutual.shape
    rows = np.arange(H1)[:, None]
    cols = np.arange(W1)[None, :]
    u = (match.target_12[:, :, 1] - cols) * match.mutual
    v = (match.target_12[:, :, 0] - rows) * match.mutual
    values = np.stack([u, v]).astype(np.float32)
    return FlowField(Tensor(values), EIGHTH)
