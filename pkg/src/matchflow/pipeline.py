"""End-to-end model assembly: features -> global match -> GRU refinement.

This module owns the parameter namespace ("features.*", "refiner.*") and
the single forward() used by training, evaluation, and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureParams, PolaConfig, extract_context
from .fields import EIGHTH, FlowField
from .matcher import CostVolume, MatchResult, build_cost_volume, coarse_flow, match_confidence, select_matches
from .numerics import ParamStore, Tensor
from .refiner import RefinerConfig, RefinerParams, refine, upsample_flow


@dataclass
class ModelConfig:
    """Complete hyperparameter bundle for one model instance."""

    features: PolaConfig = field(default_factory=PolaConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    temperature: float = 1.0

    @classmethod
    def desk(cls, *, dim: int = 32, blocks: int = 2, patch_size: int = 4, heads: int = 4,
             iters: int = 4, radius: int = 3, hidden_dim: int = 32, ball: str = "l1",
             temperature: float = 1.0) -> "ModelConfig":
        """Small configuration that trains in minutes on a CPU."""
        return cls(
            PolaConfig(patch_size=patch_size, heads=heads, dim=dim, blocks=blocks),
            RefinerConfig(iters=iters, radius=radius, hidden_dim=hidden_dim, ball=ball),
            temperature,
        )


@dataclass
class ModelParams:
    """Typed views into one ParamStore."""

    store: ParamStore
    features: FeatureParams
    refiner: RefinerParams


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fresh parameters; weights uniform in +-1/sqrt(fan_in), biases zero,
    offset-bias tables zero.  The same seed always yields identical bits."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    feats = FeatureParams.create(store, "features", cfg.features, rng, dtype)
    ref = RefinerParams.create(store, "refiner", cfg.features.dim, cfg.refiner, rng, dtype)
    return ModelParams(store, feats, ref)


def bind_model(store: ParamStore, cfg: ModelConfig) -> ModelParams:
    """Rebind typed views onto an existing (e.g. deserialized) store."""
    feats = FeatureParams.from_store(store, "features", cfg.features)
    ref = RefinerParams.from_store(store, "refiner")
    return ModelParams(store, feats, ref)


@dataclass
class PipelineOutput:
    """Everything the forward pass produces, coarse through refined."""

    feat1: Tensor
    feat2: Tensor
    cost_volume: CostVolume
    confidence: Tensor
    match: MatchResult
    init_flow: FlowField                 # eighth resolution, zero outside mutual set
    flows_eighth: list[FlowField]        # one per GRU iteration
    flows_full: list[FlowField]          # same, upsampled to input resolution

    @property
    def final_flow(self) -> FlowField:
        """Upsampled last estimate (falls back to the coarse seed if iters=0)."""
        if self.flows_full:
            return self.flows_full[-1]
        return upsample_flow(self.init_flow)


def forward(model: ModelParams, cfg: ModelConfig, image1, image2,
            *, use_matching_init: bool = True) -> PipelineOutput:
    """Run the full pipeline on an image pair.

    Images are (3, H, W) arrays or tensors with values in [0, 1] and H, W
    divisible by 8.  With use_matching_init=False the GRU starts from zero
    flow instead of the global-match estimate (ablation switch).
    """
    img1 = image1 if isinstance(image1, Tensor) else Tensor(np.asarray(image1))
    img2 = image2 if isinstance(image2, Tensor) else Tensor(np.asarray(image2))
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")

    feat1 = extract_context(img1, model.features, cfg.features)
    feat2 = extract_context(img2, model.features, cfg.features)
    cv = build_cost_volume(feat1, feat2)
    conf = match_confidence(cv, cfg.temperature)
    match = select_matches(conf)
    init = coarse_flow(match)
    if not use_matching_init:
        init = FlowField(Tensor(np.zeros_like(init.array)), EIGHTH)
    flows = refine(feat1, cv, init, model.refiner, cfg.refiner)
    flows_full = [upsample_flow(f) for f in flows]
    return PipelineOutput(feat1, feat2, cv, conf, match, init, flows, flows_full)
