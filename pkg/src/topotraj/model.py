"""Waypoint transformer: CNN backbone, waypoint feature/positional encoders,
transformer encoder-decoder with learned queries, and the ablation variants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .diffcore import (
    ConfigError,
    Conv2d,
    DepthwiseConv2d,
    DiffArray,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    ResidualBlock,
    default_dtype,
    ops,
)
from .raster import GridSpec, coarse_centers

VARIANTS = ("full", "transformer0", "transformer1", "transformer2", "transformer3", "heatmap_only")


@dataclass
class ModelConfig:
    height: int = 160
    width: int = 160
    num_waypoints: int = 12
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_hidden: int = 512
    stem_channels: int = 32
    block_channels: Tuple[int, ...] = (32, 64, 128, 192)
    fpn_channels: int = 96
    variant: str = "full"
    pre_norm: bool = True
    detach_heatmaps: bool = False
    seed: int = 0

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.validate()

    @property
    def d(self) -> int:
        return (self.height // 8) * (self.width // 8)

    def validate(self) -> None:
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"grid {self.height}x{self.width} must be positive and divisible by 8")
        if self.num_waypoints < 2:
            raise ConfigError(f"need at least 2 waypoints, got {self.num_waypoints}")
        if self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d = (H0/8)(W0/8) = {self.d} not divisible by {self.heads} heads")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.block_channels) != 4:
            raise ConfigError("block_channels needs four entries (blocks 2-5)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["block_channels"] = list(self.block_channels)
        return out

    @property
    def uses_road(self) -> bool:
        return self.variant in ("full", "transformer2", "transformer3")

    @property
    def uses_positional(self) -> bool:
        return self.variant in ("full", "transformer1", "transformer3", "heatmap_only")

    @property
    def uses_transformer(self) -> bool:
        return self.variant != "heatmap_only"

    @property
    def uses_decoder(self) -> bool:
        return self.variant not in ("transformer3", "heatmap_only")


@dataclass
class ModelOutput:
    trajectory: DiffArray            # (B, N, 2) ego meters
    trajectory_norm: Optional[DiffArray]  # (B, N, 2) in [0, 1]; None for heatmap_only
    heatmaps: Optional[DiffArray] = None  # (B, N, H0/4, W0/4)
    road_mask: Optional[DiffArray] = None  # (B, 1, H0/4, W0/4)
    extras: dict = field(default_factory=dict)


def _flatten_channels(x: DiffArray) -> DiffArray:
    B, C, H, W = x.shape
    return ops.reshape(x, (B, C, H * W))


class Backbone(Module):
    """Two-conv stem, four residual blocks down to 1/16, and a pyramid that
    sums 1x1 projections of blocks 2-5 at 1/4 resolution."""

    def __init__(self, rng, cfg: ModelConfig, in_channels: int = 4):
        c0 = cfg.stem_channels
        c2, c3, c4, c5 = cfg.block_channels
        f = cfg.fpn_channels
        self.stem1 = Conv2d(rng, in_channels, c0, 3, 1)
        self.stem2 = Conv2d(rng, c0, c0, 3, 1)
        self.block2 = ResidualBlock(rng, c0, c2, 2)
        self.block3 = ResidualBlock(rng, c2, c3, 2)
        self.block4 = ResidualBlock(rng, c3, c4, 2)
        self.block5 = ResidualBlock(rng, c4, c5, 2)
        self.lat2 = Conv2d(rng, c2, f, 1, 2)
        self.lat3 = Conv2d(rng, c3, f, 1, 1)
        self.lat4 = Conv2d(rng, c4, f, 1, 1)
        self.lat5 = Conv2d(rng, c5, f, 1, 1)

    def __call__(self, x: DiffArray) -> DiffArray:
        h = ops.relu(self.stem1(x))
        h = ops.relu(self.stem2(h))
        b2 = self.block2(h)
        b3 = self.block3(b2)
        b4 = self.block4(b3)
        b5 = self.block5(b4)
        p = ops.add(self.lat2(b2), self.lat3(b3))
        p = ops.add(p, ops.upsample2x(self.lat4(b4)))
        # 1/16 rounds up when H0/8 or W0/8 is odd; trim back to the 1/4 size
        up5 = ops.upsample2x(ops.upsample2x(self.lat5(b5)))
        return ops.add(p, ops.crop(up5, p.shape[2], p.shape[3]))


class WaypointFeatureEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.use_road = cfg.uses_road
        self.branch1 = Conv2d(rng, cfg.fpn_channels, cfg.num_waypoints, 3, 2)
        if self.use_road:
            self.road_head = Conv2d(rng, cfg.fpn_channels, 1, 3, 1)
            self.road_embed = Conv2d(rng, 1, cfg.num_waypoints, 3, 2)

    def __call__(self, feat: DiffArray) -> Tuple[DiffArray, Optional[DiffArray]]:
        x1 = _flatten_channels(self.branch1(feat))
        if not self.use_road:
            return x1, None
        road = ops.sigmoid(self.road_head(feat))
        x2 = _flatten_channels(self.road_embed(road))
        return ops.add(x1, x2), road


class WaypointPositionalEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.detach = cfg.detach_heatmaps
        self.cells = (cfg.height // 4) * (cfg.width // 4)
        self.logits = Conv2d(rng, cfg.fpn_channels, cfg.num_waypoints, 3, 1)
        if cfg.uses_transformer:  # the heatmap-only readout never embeds its heatmaps
            self.embed = DepthwiseConv2d(rng, cfg.num_waypoints, 3, 2)

    def heatmaps(self, feat: DiffArray) -> DiffArray:
        return ops.spatial_softmax(self.logits(feat))

    def __call__(self, feat: DiffArray) -> Tuple[DiffArray, DiffArray]:
        hm = self.heatmaps(feat)
        src = DiffArray(hm.data) if self.detach else hm
        # unit-mean input keeps the depthwise conv well scaled
        x3 = _flatten_channels(self.embed(ops.scale(src, float(self.cells))))
        return x3, hm


class EncoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, hidden: int, pre_norm: bool):
        self.pre_norm = pre_norm
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ffn = FeedForward(rng, d, hidden)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)

    def __call__(self, x):
        if self.pre_norm:
            h = self.norm1(x)
            x = ops.add(x, self.attn(h, h))
            return ops.add(x, self.ffn(self.norm2(x)))
        x = self.norm1(ops.add(x, self.attn(x, x)))
        return self.norm2(ops.add(x, self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, hidden: int, pre_norm: bool):
        self.pre_norm = pre_norm
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.ffn = FeedForward(rng, d, hidden)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)

    def __call__(self, q, memory):
        if self.pre_norm:
            h = self.norm1(q)
            q = ops.add(q, self.self_attn(h, h))
            q = ops.add(q, self.cross_attn(self.norm2(q), memory))
            return ops.add(q, self.ffn(self.norm3(q)))
        q = self.norm1(ops.add(q, self.self_attn(q, q)))
        q = self.norm2(ops.add(q, self.cross_attn(q, memory)))
        return self.norm3(ops.add(q, self.ffn(q)))


class WaypointTransformer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d
        self.use_decoder = cfg.uses_decoder
        self.encoder = [EncoderLayer(rng, d, cfg.heads, cfg.ffn_hidden, cfg.pre_norm)
                        for _ in range(cfg.encoder_layers)]
        self.enc_norm = LayerNorm(d)
        if self.use_decoder:
            self.queries = Parameter(rng.normal(0.0, 1.0, size=(cfg.num_waypoints, d)))
            self.decoder = [DecoderLayer(rng, d, cfg.heads, cfg.ffn_hidden, cfg.pre_norm)
                            for _ in range(cfg.decoder_layers)]
            self.dec_norm = LayerNorm(d)
        self.head = FeedForward(rng, d, cfg.ffn_hidden, 2)

    def encode(self, embeddings: DiffArray, pos: Optional[DiffArray]) -> DiffArray:
        x = embeddings if pos is None else ops.add(embeddings, pos)
        for layer in self.encoder:
            x = layer(x)
        return self.enc_norm(x)

    def decode(self, memory: DiffArray, queries: Optional[DiffArray] = None) -> DiffArray:
        B = memory.shape[0]
        q = self.queries if queries is None else queries
        q = ops.add(DiffArray(np.zeros((B,) + q.shape, dtype=memory.dtype)), q)
        for layer in self.decoder:
            q = layer(q, memory)
        return self.dec_norm(q)

    def __call__(self, embeddings, pos=None, queries=None) -> DiffArray:
        """Normalized (B, N, 2) coordinates in [0, 1]."""
        memory = self.encode(embeddings, pos)
        out = self.decode(memory, queries) if self.use_decoder else memory
        return ops.sigmoid(self.head(out))


class WaypointModel(Module):
    def __init__(self, cfg: ModelConfig, grid: Optional[GridSpec] = None):
        cfg.validate()
        self.config = cfg
        self.grid = grid or GridSpec.for_size(cfg.height, cfg.width)
        if self.grid.shape != (cfg.height, cfg.width):
            raise ConfigError(f"grid {self.grid.shape} does not match model input {cfg.height}x{cfg.width}")
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(rng, cfg)
        if cfg.uses_transformer:
            self.feature_encoder = WaypointFeatureEncoder(rng, cfg)
        if cfg.uses_positional:
            self.positional_encoder = WaypointPositionalEncoder(rng, cfg)
        if cfg.uses_transformer:
            self.transformer = WaypointTransformer(rng, cfg)
        self._centers = coarse_centers(self.grid, 4)
        x0, x1, y0, y1 = self.grid.extent
        self._offset = np.array([x0, y0])
        self._span = np.array([x1 - x0, y1 - y0])

    def _to_meters(self, norm: DiffArray) -> DiffArray:
        span = DiffArray(self._span.astype(norm.dtype))
        scaled = ops.mul(norm, ops.add(DiffArray(np.zeros(norm.shape, dtype=norm.dtype)), span))
        return ops.add(scaled, DiffArray(self._offset.astype(norm.dtype)))

    def __call__(self, bev) -> ModelOutput:
        cfg = self.config
        x = bev if isinstance(bev, DiffArray) else DiffArray(np.asarray(bev, dtype=default_dtype()))
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (4, cfg.height, cfg.width):
            raise ConfigError(f"input {x.shape} does not match (B, 4, {cfg.height}, {cfg.width})")
        feat = self.backbone(x)

        if cfg.variant == "heatmap_only":
            hm = self.positional_encoder.heatmaps(feat)
            B, N, h, w = hm.shape
            centers = DiffArray(self._centers.astype(hm.dtype))
            traj = ops.matmul(ops.reshape(hm, (B, N, h * w)), centers)
            return ModelOutput(trajectory=traj, trajectory_norm=None, heatmaps=hm)

        emb, road = self.feature_encoder(feat)
        pos, hm = (None, None)
        if cfg.uses_positional:
            pos, hm = self.positional_encoder(feat)
        norm = self.transformer(emb, pos)
        return ModelOutput(trajectory=self._to_meters(norm), trajectory_norm=norm, heatmaps=hm, road_mask=road)

    def predict(self, bev) -> np.ndarray:
        """Trajectory in ego meters as a float64 array, (B, N, 2)."""
        out = self(bev)
        return out.trajectory.data.astype(np.float64)

