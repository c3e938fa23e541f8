"""EfficientNAT backbone: DSConv stem, two FusedMBConv stages, an MBConv
stage, and a final MBConv-downsampled neighborhood-attention stage, emitting
the stride-8/16/32 feature pyramid.

Stage widths are (32, 64, 128, 256, 512) at every scale; block-count tuples
select the scale (M/L/X) or one of the cataloged distribution patterns. The
first block of every stage is the stride-2 downsampler and counts toward the
stage's block number; the four-entry M tuple is read as stage counts with a
single implicit stem block.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blocks import BlockSpec, DSConvBlock, EfficientNATBlock, build_block
from .errors import ConfigError, ShapeError
from .na import NaConfig
from .rng import Rng64
from .tensor import Tensor4

WIDTHS = (32, 64, 128, 256, 512)
NA_STAGE_KERNEL = 7
NA_HEAD_DIM = 32
DEFAULT_EXPAND = 4

SCALE_BLOCKS = {
    "M": (1, 1, 2, 2),
    "L": (1, 1, 4, 4),
    "X": (2, 7, 15, 2),
}


@dataclass(frozen=True)
class Pattern:
    """One cataloged block-count distribution."""

    scale: str
    name: str
    blocks: tuple[int, int, int, int]
    role: str

    @property
    def key(self) -> str:
        return f"{self.name}@{self.scale}"


PATTERNS: tuple[Pattern, ...] = (
    Pattern("L", "P_A-1", (1, 1, 4, 4), "balanced"),
    Pattern("L", "P_A-2", (1, 1, 6, 6), "balanced"),
    Pattern("L", "P_B", (1, 1, 4, 8), "late-heavy"),
    Pattern("L", "P_C", (1, 1, 10, 2), "early-heavy"),
    Pattern("X", "P_A-1", (2, 2, 8, 8), "balanced"),
    Pattern("X", "P_A-2", (2, 2, 10, 10), "balanced"),
    Pattern("X", "P_A-3", (2, 2, 12, 12), "balanced"),
    Pattern("X", "P_B-1", (2, 2, 8, 10), "late-heavy"),
    Pattern("X", "P_B-2", (2, 2, 4, 12), "late-heavy"),
    Pattern("X", "P_B-3", (2, 2, 2, 15), "late-heavy"),
    Pattern("X", "P_C-1", (2, 2, 15, 2), "early-heavy"),
    Pattern("X", "P_C-2", (2, 7, 15, 2), "early-heavy"),
    Pattern("X", "P_C-3", (2, 7, 18, 2), "early-heavy"),
)


def list_patterns() -> tuple[Pattern, ...]:
    """The complete pattern-study catalog (4 L-scale + 9 X-scale rows)."""
    return PATTERNS


def valid_names() -> list[str]:
    return sorted(SCALE_BLOCKS) + [p.key for p in PATTERNS]


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    blocks: tuple[int, int, int, int]
    widths: tuple[int, ...] = WIDTHS
    stem_blocks: int = 1
    expand: int = DEFAULT_EXPAND

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ConfigError(f"expected 5 width entries, got {self.widths}")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"consecutive widths must double, got {self.widths}")
        if len(self.blocks) != 4 or any(b < 1 for b in self.blocks):
            raise ConfigError(f"need 4 positive stage block counts, got {self.blocks}")

    @property
    def na_stage(self) -> NaConfig:
        c = self.widths[-1]
        return NaConfig(NA_STAGE_KERNEL, c // NA_HEAD_DIM, NA_HEAD_DIM)


def resolve_spec(name: str, expand: int = DEFAULT_EXPAND) -> BackboneSpec:
    """Map a scale or pattern id ("M", "L", "X", "P_C-2@X", ...) to its spec."""
    if name in SCALE_BLOCKS:
        return BackboneSpec(name, SCALE_BLOCKS[name], expand=expand)
    for p in PATTERNS:
        if name == p.key:
            return BackboneSpec(name, p.blocks, expand=expand)
    raise ConfigError(f"unknown backbone {name!r}; valid names: {', '.join(valid_names())}")


@dataclass
class FeaturePyramid:
    """Backbone outputs at strides 8/16/32."""

    s3: Tensor4
    s4: Tensor4
    s5: Tensor4

    def __post_init__(self):
        shapes = [t.shape for t in (self.s3, self.s4, self.s5)]
        (_, _, h3, w3), (_, _, h4, w4), (_, _, h5, w5) = shapes
        if (h3, w3) != (2 * h4, 2 * w4) or (h4, w4) != (2 * h5, 2 * w5):
            raise ShapeError(f"pyramid strides inconsistent: {shapes}")

    @property
    def channels(self) -> tuple[int, int, int]:
        return (self.s3.shape[1], self.s4.shape[1], self.s5.shape[1])


class Backbone:
    def __init__(self, spec: BackboneSpec, stem, stages):
        self.spec = spec
        self.stem = stem
        self.stages = stages

    @classmethod
    def create(cls, rng: Rng64, spec: BackboneSpec) -> "Backbone":
        w = spec.widths
        e = spec.expand
        stem = [DSConvBlock.create(rng, BlockSpec("DSConv", 3, w[0], stride=2))]
        for _ in range(spec.stem_blocks - 1):
            stem.append(DSConvBlock.create(rng, BlockSpec("DSConv", w[0], w[0], stride=1)))

        stage_kinds = ("FusedMBConv", "FusedMBConv", "MBConv", "MBConv")
        stages = []
        for i, count in enumerate(spec.blocks):
            ic, oc = w[i], w[i + 1]
            kind = stage_kinds[i]
            blocks = [build_block(rng, BlockSpec(kind, ic, oc, stride=2, expand=e))]
            for _ in range(count - 1):
                if i == 3:
                    blocks.append(
                        build_block(
                            rng,
                            BlockSpec("EfficientNAT", oc, oc, expand=e, na=spec.na_stage),
                            auto_shrink=True,
                        )
                    )
                else:
                    blocks.append(build_block(rng, BlockSpec(kind, oc, oc, stride=1, expand=e)))
            stages.append(blocks)
        return cls(spec, stem, stages)

    def forward(self, x: Tensor4, threads: int = 1) -> FeaturePyramid:
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"backbone expects 3 input channels, got {c}")
        if h % 32 or w % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {h}x{w}")
        y = x.data
        for block in self.stem:
            y = block(y)
        taps = {}
        for i, stage in enumerate(self.stages):
            for block in stage:
                if isinstance(block, EfficientNATBlock):
                    y = block(y, threads=threads)
                else:
                    y = block(y)
            taps[i] = y
        return FeaturePyramid(Tensor4(taps[1]), Tensor4(taps[2]), Tensor4(taps[3]))

    def named_params(self, prefix: str = "backbone"):
        for i, block in enumerate(self.stem):
            yield from block.named_params(f"{prefix}.stem.{i}")
        for s, stage in enumerate(self.stages):
            for i, block in enumerate(stage):
                yield from block.named_params(f"{prefix}.stage{s + 1}.{i}")

    def macs(self, hw: tuple[int, int]) -> int:
        total = 0
        cur = hw
        for block in self.stem:
            total += block.macs(cur)
            cur = block.out_hw(cur)
        for stage in self.stages:
            for block in stage:
                total += block.macs(cur)
                cur = block.out_hw(cur)
        return total

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_params())


def build_backbone(name: str, seed: int = 0, expand: int = DEFAULT_EXPAND) -> Backbone:
    """Deterministically initialized backbone for a scale or pattern id."""
    spec = resolve_spec(name, expand=expand)
    return Backbone.create(Rng64(seed), spec)
