"""Feature extraction: a strided conv stem followed by transformer blocks
whose attention is windowed per patch but overlaps into the 3x3 patch
neighborhood, so every position sees context beyond its own patch.

Feature maps are channels-first (d, H, W).  The stem downsamples by 8, so
callers must hand in images whose height and width are multiples of 8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ParamStore,
    Tensor,
    add_conv,
    add_linear,
    attention,
    concat,
    conv2d,
    extract_windows,
    layer_norm,
    linear,
    gather_flat,
    pad_hw,
    relu,
    reshape,
    transpose,
)


@dataclass
class PolaConfig:
    """Geometry of the attention feature extractor.

    Defaults are the full-scale settings; desk runs shrink dim/blocks/
    patch_size.  dim must divide evenly into heads.
    """

    patch_size: int = 7
    heads: int = 8
    dim: int = 256
    blocks: int = 6

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {self.blocks}")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ValueError(
                f"dim ({self.dim}) must be divisible by heads ({self.heads})")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def window(self) -> int:
        """Key-window side length: the patch plus one patch of overlap each way."""
        return 3 * self.patch_size

    @property
    def bias_extent(self) -> int:
        """Side length of the relative-offset bias table."""
        return 4 * self.patch_size - 1


@dataclass
class AttentionParams:
    """Per-head projections, output projection, and relative-offset bias tables."""

    q_weight: list[Tensor]
    q_bias: list[Tensor]
    k_weight: list[Tensor]
    k_bias: list[Tensor]
    v_weight: list[Tensor]
    v_bias: list[Tensor]
    out_weight: Tensor
    out_bias: Tensor
    bias_tables: list[Tensor]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: PolaConfig,
               rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        dk, ext = cfg.head_dim, cfg.bias_extent
        qw, qb, kw, kb, vw, vb, tables = [], [], [], [], [], [], []
        for h in range(cfg.heads):
            for ws, bs, tag in ((qw, qb, "q"), (kw, kb, "k"), (vw, vb, "v")):
                w, b = add_linear(store, f"{prefix}.head{h}.{tag}", rng, dk, cfg.dim, dtype)
                ws.append(w)
                bs.append(b)
            # Offset bias starts flat; geometry preferences are learned.
            tables.append(store.add(f"{prefix}.head{h}.offset_bias",
                                    np.zeros((ext, ext), dtype=dtype)))
        ow, ob = add_linear(store, f"{prefix}.out", rng, cfg.dim, cfg.dim, dtype)
        return cls(qw, qb, kw, kb, vw, vb, ow, ob, tables)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, cfg: PolaConfig) -> "AttentionParams":
        qw = [store[f"{prefix}.head{h}.q.weight"] for h in range(cfg.heads)]
        qb = [store[f"{prefix}.head{h}.q.bias"] for h in range(cfg.heads)]
        kw = [store[f"{prefix}.head{h}.k.weight"] for h in range(cfg.heads)]
        kb = [store[f"{prefix}.head{h}.k.bias"] for h in range(cfg.heads)]
        vw = [store[f"{prefix}.head{h}.v.weight"] for h in range(cfg.heads)]
        vb = [store[f"{prefix}.head{h}.v.bias"] for h in range(cfg.heads)]
        tables = [store[f"{prefix}.head{h}.offset_bias"] for h in range(cfg.heads)]
        return cls(qw, qb, kw, kb, vw, vb,
                   store[f"{prefix}.out.weight"], store[f"{prefix}.out.bias"], tables)


@dataclass
class BlockParams:
    """Pre-norm transformer block: attention and MLP, each behind a layer norm."""

    attn: AttentionParams
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: PolaConfig,
               rng: np.random.Generator, dtype=np.float32) -> "BlockParams":
        attn = AttentionParams.create(store, f"{prefix}.attn", cfg, rng, dtype)
        n1g = store.add(f"{prefix}.norm1.gain", np.ones(cfg.dim, dtype=dtype))
        n1b = store.add(f"{prefix}.norm1.bias", np.zeros(cfg.dim, dtype=dtype))
        n2g = store.add(f"{prefix}.norm2.gain", np.ones(cfg.dim, dtype=dtype))
        n2b = store.add(f"{prefix}.norm2.bias", np.zeros(cfg.dim, dtype=dtype))
        w1, b1 = add_linear(store, f"{prefix}.mlp.fc1", rng, 4 * cfg.dim, cfg.dim, dtype)
        w2, b2 = add_linear(store, f"{prefix}.mlp.fc2", rng, cfg.dim, 4 * cfg.dim, dtype)
        return cls(attn, n1g, n1b, n2g, n2b, w1, b1, w2, b2)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, cfg: PolaConfig) -> "BlockParams":
        return cls(
            AttentionParams.from_store(store, f"{prefix}.attn", cfg),
            store[f"{prefix}.norm1.gain"], store[f"{prefix}.norm1.bias"],
            store[f"{prefix}.norm2.gain"], store[f"{prefix}.norm2.bias"],
            store[f"{prefix}.mlp.fc1.weight"], store[f"{prefix}.mlp.fc1.bias"],
            store[f"{prefix}.mlp.fc2.weight"], store[f"{prefix}.mlp.fc2.bias"],
        )


@dataclass
class StemParams:
    """Three strided convolutions taking an RGB image down to 1/8 resolution."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: PolaConfig,
               rng: np.random.Generator, dtype=np.float32) -> "StemParams":
        c1, c2 = stem_channels(cfg.dim)
        w1, b1 = add_conv(store, f"{prefix}.conv1", rng, c1, 3, 7, dtype)
        w2, b2 = add_conv(store, f"{prefix}.conv2", rng, c2, c1, 3, dtype)
        w3, b3 = add_conv(store, f"{prefix}.conv3", rng, cfg.dim, c2, 3, dtype)
        return cls(w1, b1, w2, b2, w3, b3)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "StemParams":
        return cls(*(store[f"{prefix}.conv{i}.{p}"] for i in (1, 2, 3) for p in ("weight", "bias")))


@dataclass
class FeatureParams:
    """Stem plus the stack of attention blocks."""

    stem: StemParams
    blocks: list[BlockParams] = field(default_factory=list)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: PolaConfig,
               rng: np.random.Generator, dtype=np.float32) -> "FeatureParams":
        stem = StemParams.create(store, f"{prefix}.stem", cfg, rng, dtype)
        blocks = [BlockParams.create(store, f"{prefix}.block{b}", cfg, rng, dtype)
                  for b in range(cfg.blocks)]
        return cls(stem, blocks)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, cfg: PolaConfig) -> "FeatureParams":
        stem = StemParams.from_store(store, f"{prefix}.stem")
        blocks = [BlockParams.from_store(store, f"{prefix}.block{b}", cfg)
                  for b in range(cfg.blocks)]
        return cls(stem, blocks)


def stem_channels(dim: int) -> tuple[int, int]:
    """Intermediate stem widths scale with the final dim (64/128 at dim 256)."""
    return max(dim // 4, 4), max(dim // 2, 8)


def _conv_relu(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    y = conv2d(x, w, stride=stride, padding=padding)
    return relu(y + reshape(b, (b.shape[0], 1, 1)))


def extract_initial(image: Tensor, stem: StemParams) -> Tensor:
    """Run the downsampling stem: (3, H, W) in [0, 1] -> (dim, H/8, W/8)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected an image shaped (3, H, W), got {image.shape}")
    H, W = image.shape[1], image.shape[2]
    if H % 8 or W % 8:
        raise ValueError(
            f"image size {H}x{W} is not divisible by 8; pad the image to a multiple of 8 first")
    x = image * 2.0 - 1.0  # center pixel values for better conditioning
    x = _conv_relu(x, stem.conv1_w, stem.conv1_b, stride=2, padding=3)
    x = _conv_relu(x, stem.conv2_w, stem.conv2_b, stride=2, padding=1)
    x = _conv_relu(x, stem.conv3_w, stem.conv3_b, stride=2, padding=1)
    return x


def _window_geometry(M: int):
    """Static query/key index buffers for one patch and its 3x3 window.

    Returns (bias_idx, off_r, off_c): bias_idx maps (query, key) pairs to a
    flat index into the (4M-1)^2 offset-bias table; off_r/off_c give each
    window position's offset from the patch origin, in [-M, 2M).
    """
    q = np.arange(M * M)
    qr, qc = q // M, q % M
    w = np.arange(9 * M * M)
    wr, wc = w // (3 * M), w % (3 * M)
    off_r = wr - M
    off_c = wc - M
    rel_r = off_r[None, :] - qr[:, None] + (2 * M - 1)
    rel_c = off_c[None, :] - qc[:, None] + (2 * M - 1)
    bias_idx = rel_r * (4 * M - 1) + rel_c
    return bias_idx, off_r, off_c


_GEOMETRY_CACHE: dict[int, tuple] = {}


def _geometry(M: int):
    if M not in _GEOMETRY_CACHE:
        _GEOMETRY_CACHE[M] = _window_geometry(M)
    return _GEOMETRY_CACHE[M]


def pola(x: Tensor, params: AttentionParams, cfg: PolaConfig) -> Tensor:
    """Patch-overlap attention over a (dim, H, W) feature map.

    The map is tiled into MxM patches (zero-padded up to a multiple of M);
    the queries of each patch attend to the 3Mx3M window centered on it.
    Keys that fall outside the original map are masked to exact zero
    weight, and the output is cropped back to (dim, H, W).
    """
    M = cfg.patch_size
    d, H, W = x.shape
    if d != cfg.dim:
        raise ValueError(f"feature map has {d} channels but config says {cfg.dim}")
    Hp = -(-H // M) * M
    Wp = -(-W // M) * M
    xp = pad_hw(x, ((0, Hp - H), (0, Wp - W))) if (Hp != H or Wp != W) else x
    nH, nW = Hp // M, Wp // M
    P = nH * nW

    bias_idx, off_r, off_c = _geometry(M)

    # Queries: (P, M*M, d) in row-major patch order.
    q_src = transpose(xp, (1, 2, 0))                       # (Hp, Wp, d)
    q_src = reshape(q_src, (nH, M, nW, M, d))
    q_src = transpose(q_src, (0, 2, 1, 3, 4))
    q_src = reshape(q_src, (P, M * M, d))

    # Keys/values: each patch's 3Mx3M surrounding window, flattened row-major.
    win = extract_windows(xp, k=3 * M, stride=M, padding=M)  # (nH, nW, 3M, 3M, d)
    win = reshape(win, (P, 9 * M * M, d))

    # A window key is usable only if it lands inside the original HxW map;
    # both kinds of padding (overlap and alignment) are masked out.
    prow = (np.arange(P) // nW) * M
    pcol = (np.arange(P) % nW) * M
    key_r = prow[:, None] + off_r[None, :]
    key_c = pcol[:, None] + off_c[None, :]
    mask = (key_r >= 0) & (key_r < H) & (key_c >= 0) & (key_c < W)
    mask = mask[:, None, :]                                  # (P, 1, 9M^2)

    heads = []
    for h in range(cfg.heads):
        qh = linear(q_src, params.q_weight[h], params.q_bias[h])
        kh = linear(win, params.k_weight[h], params.k_bias[h])
        vh = linear(win, params.v_weight[h], params.v_bias[h])
        bh = gather_flat(params.bias_tables[h], bias_idx)    # (M^2, 9M^2)
        heads.append(attention(qh, kh, vh, bias=bh, mask=mask))
    out = heads[0] if cfg.heads == 1 else concat(heads, axis=2)
    out = linear(out, params.out_weight, params.out_bias)    # (P, M^2, d)

    out = reshape(out, (nH, nW, M, M, d))
    out = transpose(out, (0, 2, 1, 3, 4))
    out = reshape(out, (Hp, Wp, d))
    out = transpose(out, (2, 0, 1))
    if Hp != H or Wp != W:
        out = out[:, :H, :W]
    return out


def _channels_last_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d, H, W = x.shape
    flat = reshape(transpose(x, (1, 2, 0)), (H * W, d))
    return layer_norm(flat, gain, bias)


def _to_map(flat: Tensor, d: int, H: int, W: int) -> Tensor:
    return transpose(reshape(flat, (H, W, d)), (2, 0, 1))


def transformer_block(x: Tensor, bp: BlockParams, cfg: PolaConfig) -> Tensor:
    """Pre-norm residual block: x + attn(LN(x)), then + MLP(LN(.))."""
    d, H, W = x.shape
    normed = _to_map(_channels_last_norm(x, bp.norm1_gain, bp.norm1_bias), d, H, W)
    mid = pola(normed, bp.attn, cfg) + x
    flat = _channels_last_norm(mid, bp.norm2_gain, bp.norm2_bias)
    hidden = relu(linear(flat, bp.mlp_w1, bp.mlp_b1))
    return _to_map(linear(hidden, bp.mlp_w2, bp.mlp_b2), d, H, W) + mid


def extract_context(image: Tensor, params: FeatureParams, cfg: PolaConfig) -> Tensor:
    """Full feature pipeline: stem then every transformer block."""
    x = extract_initial(image, params.stem)
    for bp in params.blocks:
        x = transformer_block(x, bp, cfg)
    return x
