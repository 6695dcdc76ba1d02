"""Line-oriented run configuration: `key = value` with `#` comments.

One flat namespace covers model geometry, refinement, losses, training,
and data generation.  Unknown keys are rejected; CLI --set overrides win
over file values.  The defaults form a complete working desk-scale run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .dataio import SynthSpec
from .pipeline import ModelConfig
from .supervision import LossConfig, TrainConfig


@dataclass
class RunConfig:
    # model geometry
    dim: int = 32
    blocks: int = 2
    patch_size: int = 4
    heads: int = 4
    temperature: float = 1.0
    # refinement
    iters: int = 4
    radius: int = 3
    hidden_dim: int = 32
    lookup_ball: str = "l1"
    # losses
    match_weight: float = 1.0
    decay: float = 0.8
    # training
    steps: int = 400
    lr: float = 2e-3
    warmup: int = 30
    clip: float = 1.0
    batch_size: int = 2
    seed: int = 0
    log_every: int = 25
    # data
    image_size: int = 64
    texture: str = "blobs"
    warp: str = "affine"
    max_disp: float = 12.0
    num_pairs: int = 8

    def model_config(self) -> ModelConfig:
        return ModelConfig.desk(dim=self.dim, blocks=self.blocks, patch_size=self.patch_size,
                                heads=self.heads, iters=self.iters, radius=self.radius,
                                hidden_dim=self.hidden_dim, ball=self.lookup_ball,
                                temperature=self.temperature)

    def loss_config(self) -> LossConfig:
        return LossConfig(match_weight=self.match_weight, decay=self.decay)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, warmup=self.warmup, clip=self.clip,
                           batch_size=self.batch_size, seed=self.seed, log_every=self.log_every)

    def synth_spec(self, seed_offset: int = 0) -> SynthSpec:
        return SynthSpec(size=(self.image_size, self.image_size), texture=self.texture,
                         warp=self.warp, max_displacement=self.max_disp,
                         seed=self.seed + seed_offset)

    def text(self) -> str:
        """Full configuration as parseable `key = value` lines."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r} expects a {kind}, got {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Parse `key = value` lines on top of base (or the defaults)."""
    cfg = base or RunConfig()
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), base, source=path)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply repeatable `--set key=value` pairs on top of cfg."""
    lines = []
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        lines.append(item)
    return parse_config("\n".join(lines), cfg, source="<override>")
