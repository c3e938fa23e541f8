"""Hybrid encoder: NAIFI (a single-layer neighborhood-attention transformer
over the stride-32 map) followed by top-down/bottom-up feature fusion that
brings every level to the shared embedding width.

Wiring: NAIFI output replaces the stride-32 level before fusion. Each fusion
node transforms the resampled cross-scale feature and adds it to the current
level's lateral projection, so zeroed fusion convs pass the projected inputs
through unchanged. Upsampling is nearest-neighbor x2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePyramid
from .blocks import ConvUnit, LayerNorm, Linear
from .errors import ConfigError, ShapeError
from .na import NaConfig, na_forward, shrink_bias, shrink_kernel
from .rng import Rng64
from .tensor import Tensor4, silu


@dataclass(frozen=True)
class EncoderSpec:
    embed_dim: int = 256
    ffn_dim: int = 1024
    naifi_kernel: int = 63
    heads: int = 8
    fusion_depth: int = 2
    in_channels: tuple[int, int, int] = (128, 256, 512)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.naifi_kernel % 2 == 0 or self.naifi_kernel < 1:
            raise ConfigError(f"naifi_kernel must be odd, got {self.naifi_kernel}")
        if self.fusion_depth < 1:
            raise ConfigError(f"fusion_depth must be >= 1, got {self.fusion_depth}")


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


class FusionNode:
    """Stack of 3x3 conv units applied to the incoming cross-scale feature."""

    def __init__(self, convs):
        self.convs = convs

    @classmethod
    def create(cls, rng: Rng64, dim: int, depth: int):
        return cls([ConvUnit.create(rng, dim, dim, 3) for _ in range(depth)])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for conv in self.convs:
            x = conv(x)
        return x

    def named_params(self, prefix: str):
        for i, conv in enumerate(self.convs):
            yield from conv.named_params(f"{prefix}.{i}")

    def macs(self, hw):
        return sum(conv.macs(hw) for conv in self.convs)


class Encoder:
    def __init__(self, spec, proj5, lat3, lat4, norm1, qkv, bias_table, out_proj,
                 norm2, fc1, fc2, td4, td3, down3, down4, bu4, bu5):
        self.spec = spec
        self.proj5 = proj5
        self.lat3 = lat3
        self.lat4 = lat4
        self.norm1 = norm1
        self.qkv = qkv
        self.bias_table = bias_table
        self.out_proj = out_proj
        self.norm2 = norm2
        self.fc1 = fc1
        self.fc2 = fc2
        self.td4 = td4
        self.td3 = td3
        self.down3 = down3
        self.down4 = down4
        self.bu4 = bu4
        self.bu5 = bu5

    @classmethod
    def create(cls, rng: Rng64, spec: EncoderSpec) -> "Encoder":
        d = spec.embed_dim
        c3, c4, c5 = spec.in_channels
        proj5 = ConvUnit.create(rng, c5, d, 1, act=False)
        lat3 = ConvUnit.create(rng, c3, d, 1, act=False)
        lat4 = ConvUnit.create(rng, c4, d, 1, act=False)
        norm1 = LayerNorm.create(d)
        qkv = Linear.create(rng, d, 3 * d)
        side = 2 * spec.naifi_kernel - 1
        bias_table = np.zeros((spec.heads, side, side), dtype=np.float32)
        out_proj = Linear.create(rng, d, d)
        norm2 = LayerNorm.create(d)
        fc1 = Linear.create(rng, d, spec.ffn_dim)
        fc2 = Linear.create(rng, spec.ffn_dim, d)
        td4 = FusionNode.create(rng, d, spec.fusion_depth)
        td3 = FusionNode.create(rng, d, spec.fusion_depth)
        down3 = ConvUnit.create(rng, d, d, 3, stride=2)
        down4 = ConvUnit.create(rng, d, d, 3, stride=2)
        bu4 = FusionNode.create(rng, d, spec.fusion_depth)
        bu5 = FusionNode.create(rng, d, spec.fusion_depth)
        return cls(spec, proj5, lat3, lat4, norm1, qkv, bias_table, out_proj,
                   norm2, fc1, fc2, td4, td3, down3, down4, bu4, bu5)

    def naifi_kernel_for(self, hw: tuple[int, int]) -> int:
        return shrink_kernel(self.spec.naifi_kernel, min(hw))

    def naifi_forward(self, s5: Tensor4, threads: int = 1) -> Tensor4:
        """Project the stride-32 map to the embedding width and apply one
        pre-norm NA transformer layer; spatial extents are preserved."""
        d = self.spec.embed_dim
        x = self.proj5(s5.data)
        n, _, h, w = x.shape
        k_eff = self.naifi_kernel_for((h, w))
        cfg = NaConfig(k_eff, self.spec.heads, d // self.spec.heads)
        bias = shrink_bias(self.bias_table, self.spec.naifi_kernel, k_eff)
        out = np.empty_like(x)
        for i in range(n):
            tokens = np.ascontiguousarray(x[i].transpose(1, 2, 0))
            t = self.norm1(tokens)
            qkv = self.qkv(t)
            q, kk, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
            mixed, _ = na_forward(
                np.ascontiguousarray(q), np.ascontiguousarray(kk), np.ascontiguousarray(v),
                bias, cfg, threads=threads,
            )
            y = tokens + self.out_proj(mixed)
            z = y + self.fc2(silu(self.fc1(self.norm2(y))))
            out[i] = z.transpose(2, 0, 1)
        return Tensor4(out)

    def fuse_pyramid(self, pyramid: FeaturePyramid, threads: int = 1):
        """Top-down then bottom-up fusion; three outputs at the embed width."""
        if pyramid.channels != self.spec.in_channels:
            raise ShapeError(
                f"pyramid channels {pyramid.channels} != encoder inputs {self.spec.in_channels}"
            )
        p5 = self.naifi_forward(pyramid.s5, threads=threads).data
        c4 = self.lat4(pyramid.s4.data)
        c3 = self.lat3(pyramid.s3.data)
        t4 = c4 + self.td4(_upsample2(p5))
        t3 = c3 + self.td3(_upsample2(t4))
        o3 = t3
        o4 = t4 + self.bu4(self.down3(o3))
        o5 = p5 + self.bu5(self.down4(o4))
        return Tensor4(o3), Tensor4(o4), Tensor4(o5)

    def named_params(self, prefix: str = "encoder"):
        yield from self.proj5.named_params(f"{prefix}.proj5")
        yield from self.lat3.named_params(f"{prefix}.lat3")
        yield from self.lat4.named_params(f"{prefix}.lat4")
        yield from self.norm1.named_params(f"{prefix}.naifi.norm1")
        yield from self.qkv.named_params(f"{prefix}.naifi.qkv")
        yield f"{prefix}.naifi.bias_table", self.bias_table
        yield from self.out_proj.named_params(f"{prefix}.naifi.out")
        yield from self.norm2.named_params(f"{prefix}.naifi.norm2")
        yield from self.fc1.named_params(f"{prefix}.naifi.fc1")
        yield from self.fc2.named_params(f"{prefix}.naifi.fc2")
        yield from self.td4.named_params(f"{prefix}.td4")
        yield from self.td3.named_params(f"{prefix}.td3")
        yield from self.down3.named_params(f"{prefix}.down3")
        yield from self.down4.named_params(f"{prefix}.down4")
        yield from self.bu4.named_params(f"{prefix}.bu4")
        yield from self.bu5.named_params(f"{prefix}.bu5")

    def macs(self, hw_s3: tuple[int, int]) -> int:
        from .na import na_logit_macs

        h3 = hw_s3
        h4 = (h3[0] // 2, h3[1] // 2)
        h5 = (h4[0] // 2, h4[1] // 2)
        tokens5 = h5[0] * h5[1]
        k_eff = self.naifi_kernel_for(h5)
        cfg = NaConfig(k_eff, self.spec.heads, self.spec.embed_dim // self.spec.heads)
        total = self.proj5.macs(h5) + self.lat3.macs(h3) + self.lat4.macs(h4)
        total += self.qkv.macs(tokens5) + 2 * na_logit_macs(h5, cfg)
        total += self.out_proj.macs(tokens5)
        total += self.fc1.macs(tokens5) + self.fc2.macs(tokens5)
        total += self.td4.macs(h4) + self.td3.macs(h3)
        total += self.down3.macs(h3) + self.bu4.macs(h4)
        total += self.down4.macs(h4) + self.bu5.macs(h5)
        return total


@dataclass
class Memory:
    """Flattened multi-scale features for decoder cross-attention."""

    tokens: np.ndarray  # (T, embed_dim), level-major
    level_shapes: tuple[tuple[int, int], ...]
    refs: np.ndarray  # (T, 2) normalized (x, y) cell centers

    @property
    def level_offsets(self) -> tuple[int, ...]:
        offs = [0]
        for h, w in self.level_shapes:
            offs.append(offs[-1] + h * w)
        return tuple(offs)


def flatten_memory(levels: tuple[Tensor4, Tensor4, Tensor4]) -> Memory:
    """Concatenate fused levels (batch 1) into a token sequence plus the
    normalized cell-center reference grid."""
    tokens = []
    refs = []
    shapes = []
    for level in levels:
        n, c, h, w = level.shape
        if n != 1:
            raise ShapeError(f"flatten_memory expects batch 1, got {n}")
        shapes.append((h, w))
        tokens.append(level.data[0].transpose(1, 2, 0).reshape(h * w, c))
        ys = (np.arange(h, dtype=np.float32) + 0.5) / h
        xs = (np.arange(w, dtype=np.float32) + 0.5) / w
        grid = np.stack(
            [np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))],
            axis=-1,
        )
        refs.append(grid.reshape(h * w, 2))
    return Memory(np.concatenate(tokens), tuple(shapes), np.concatenate(refs))


def unflatten_memory(memory: Memory) -> list[Tensor4]:
    """Inverse of flatten_memory; restores each level bit-exactly."""
    out = []
    offs = memory.level_offsets
    c = memory.tokens.shape[1]
    for i, (h, w) in enumerate(memory.level_shapes):
        chunk = memory.tokens[offs[i] : offs[i + 1]]
        out.append(Tensor4(chunk.reshape(h, w, c).transpose(2, 0, 1)[None]))
    return out
