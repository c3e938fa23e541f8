"""Convolutional building blocks: DSConv stem, FusedMBConv, MBConv, and the
EfficientNAT block (neighborhood attention + MBConv feed-forward).

Inference-only conventions: convolutions carry no bias and are followed by a
folded per-channel affine (the inference form of batch-style normalization);
the activation is x * sigmoid(x) throughout; inverted bottlenecks keep the
projection linear. A stride-2 block halves H and W (pad k//2) and must double
its channel count, except the DSConv stem which projects from the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, WindowError
from .na import NaConfig, na_forward, na_logit_macs, shrink_bias, shrink_kernel
from .rng import Rng64
from .tensor import conv2d, init_normal, layernorm, silu

INIT_STD = 0.02

BLOCK_KINDS = ("DSConv", "FusedMBConv", "MBConv", "EfficientNAT")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_ch: int
    out_ch: int
    stride: int = 1
    expand: int = 4
    na: NaConfig | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.kind != "DSConv" and self.out_ch != 2 * self.in_ch:
            raise ConfigError(
                f"stride-2 {self.kind} must double channels, got {self.in_ch}->{self.out_ch}"
            )
        if self.expand < 1:
            raise ConfigError(f"expand must be >= 1, got {self.expand}")
        if (self.na is not None) != (self.kind == "EfficientNAT"):
            raise ConfigError("na config present iff kind is EfficientNAT")
        if self.kind == "EfficientNAT":
            if self.stride != 1:
                raise ConfigError("EfficientNAT blocks are stride 1")
            if self.na.width != self.in_ch or self.out_ch != self.in_ch:
                raise ConfigError(
                    f"EfficientNAT channels {self.in_ch} must equal heads*head_dim={self.na.width}"
                )


class ConvUnit:
    """Convolution without bias, folded per-channel affine, optional activation."""

    def __init__(self, weight, gamma, beta, stride=1, padding=0, groups=1, act=True):
        self.weight = weight
        self.gamma = gamma
        self.beta = beta
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.act = act

    @classmethod
    def create(cls, rng: Rng64, ic: int, oc: int, k: int, stride=1, groups=1, act=True):
        weight = init_normal(rng, (oc, ic // groups, k, k), INIT_STD)
        gamma = np.ones(oc, dtype=np.float32)
        beta = np.zeros(oc, dtype=np.float32)
        return cls(weight, gamma, beta, stride=stride, padding=k // 2, groups=groups, act=act)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding, groups=self.groups)
        y = y * self.gamma[None, :, None, None] + self.beta[None, :, None, None]
        return silu(y) if self.act else y

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.weight
        yield f"{prefix}.g", self.gamma
        yield f"{prefix}.b", self.beta

    def out_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        k = self.weight.shape[2]
        return tuple((e + 2 * self.padding - k) // self.stride + 1 for e in hw)

    def macs(self, hw: tuple[int, int]) -> int:
        oc, icg, kh, kw = self.weight.shape
        ho, wo = self.out_hw(hw)
        conv = kh * kw * icg * oc * ho * wo
        affine = oc * ho * wo
        return conv + affine


class Linear:
    """Token-wise affine map, weight stored (d_in, d_out)."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: Rng64, d_in: int, d_out: int, bias=True):
        weight = init_normal(rng, (d_in, d_out), INIT_STD)
        return cls(weight, np.zeros(d_out, dtype=np.float32) if bias else None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        out = np.matmul(flat, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.weight.shape[1])

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.weight
        if self.bias is not None:
            yield f"{prefix}.b", self.bias

    def macs(self, tokens: int) -> int:
        return tokens * self.weight.shape[0] * self.weight.shape[1]


class LayerNorm:
    def __init__(self, gamma, beta, eps=1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def create(cls, width: int):
        return cls(np.ones(width, dtype=np.float32), np.zeros(width, dtype=np.float32))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return layernorm(x, self.gamma, self.beta, self.eps)

    def named_params(self, prefix: str):
        yield f"{prefix}.g", self.gamma
        yield f"{prefix}.b", self.beta


class DSConvBlock:
    """Depthwise 3x3 then pointwise 1x1, each normalized and activated."""

    def __init__(self, spec: BlockSpec, dw: ConvUnit, pw: ConvUnit):
        self.spec = spec
        self.dw = dw
        self.pw = pw

    @classmethod
    def create(cls, rng: Rng64, spec: BlockSpec):
        dw = ConvUnit.create(rng, spec.in_ch, spec.in_ch, 3, stride=spec.stride, groups=spec.in_ch)
        pw = ConvUnit.create(rng, spec.in_ch, spec.out_ch, 1)
        return cls(spec, dw, pw)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.pw(self.dw(x))

    def named_params(self, prefix: str):
        yield from self.dw.named_params(f"{prefix}.dw")
        yield from self.pw.named_params(f"{prefix}.pw")

    def out_hw(self, hw):
        return self.pw.out_hw(self.dw.out_hw(hw))

    def macs(self, hw):
        return self.dw.macs(hw) + self.pw.macs(self.dw.out_hw(hw))


class FusedMBConvBlock:
    """3x3 expansion conv then linear 1x1 projection; single conv when expand=1."""

    def __init__(self, spec: BlockSpec, expand: ConvUnit, project: ConvUnit | None, residual: bool):
        self.spec = spec
        self.expand = expand
        self.project = project
        self.residual = residual

    @classmethod
    def create(cls, rng: Rng64, spec: BlockSpec):
        residual = spec.stride == 1 and spec.in_ch == spec.out_ch
        if spec.expand == 1:
            expand = ConvUnit.create(rng, spec.in_ch, spec.out_ch, 3, stride=spec.stride)
            return cls(spec, expand, None, residual)
        mid = spec.in_ch * spec.expand
        expand = ConvUnit.create(rng, spec.in_ch, mid, 3, stride=spec.stride)
        project = ConvUnit.create(rng, mid, spec.out_ch, 1, act=False)
        return cls(spec, expand, project, residual)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.expand(x)
        if self.project is not None:
            y = self.project(y)
        return x + y if self.residual else y

    def named_params(self, prefix: str):
        yield from self.expand.named_params(f"{prefix}.expand")
        if self.project is not None:
            yield from self.project.named_params(f"{prefix}.project")

    def out_hw(self, hw):
        return self.expand.out_hw(hw)

    def macs(self, hw):
        total = self.expand.macs(hw)
        if self.project is not None:
            total += self.project.macs(self.expand.out_hw(hw))
        return total


class MBConvBlock:
    """Inverted bottleneck: 1x1 expand, depthwise 3x3, linear 1x1 project."""

    def __init__(self, spec, expand, dw, project, residual):
        self.spec = spec
        self.expand = expand
        self.dw = dw
        self.project = project
        self.residual = residual

    @classmethod
    def create(cls, rng: Rng64, spec: BlockSpec, residual: bool | None = None):
        if residual is None:
            residual = spec.stride == 1 and spec.in_ch == spec.out_ch
        mid = spec.in_ch * spec.expand
        expand = None
        if spec.expand > 1:
            expand = ConvUnit.create(rng, spec.in_ch, mid, 1)
        dw = ConvUnit.create(rng, mid, mid, 3, stride=spec.stride, groups=mid)
        project = ConvUnit.create(rng, mid, spec.out_ch, 1, act=False)
        return cls(spec, expand, dw, project, residual)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x if self.expand is None else self.expand(x)
        y = self.project(self.dw(y))
        return x + y if self.residual else y

    def named_params(self, prefix: str):
        if self.expand is not None:
            yield from self.expand.named_params(f"{prefix}.expand")
        yield from self.dw.named_params(f"{prefix}.dw")
        yield from self.project.named_params(f"{prefix}.project")

    def out_hw(self, hw):
        return self.dw.out_hw(hw)

    def macs(self, hw):
        total = 0
        if self.expand is not None:
            total += self.expand.macs(hw)
        mid_hw = hw if self.expand is None else self.expand.out_hw(hw)
        total += self.dw.macs(mid_hw)
        total += self.project.macs(self.dw.out_hw(mid_hw))
        return total


class EfficientNATBlock:
    """Pre-norm neighborhood-attention mixer with an MBConv feed-forward.

    x = x + proj(NA(norm(x))); x = x + mbconv_branch(x). The window shrinks
    to fit small maps when auto_shrink is on; otherwise an oversized window
    raises a WindowError.
    """

    def __init__(self, spec, norm, qkv, bias_table, out_proj, ffn, auto_shrink):
        self.spec = spec
        self.norm = norm
        self.qkv = qkv
        self.bias_table = bias_table
        self.out_proj = out_proj
        self.ffn = ffn
        self.auto_shrink = auto_shrink

    @classmethod
    def create(cls, rng: Rng64, spec: BlockSpec, auto_shrink: bool = True):
        c = spec.in_ch
        cfg = spec.na
        norm = LayerNorm.create(c)
        qkv = Linear.create(rng, c, 3 * c)
        side = 2 * cfg.kernel - 1
        bias_table = np.zeros((cfg.heads, side, side), dtype=np.float32)
        out_proj = Linear.create(rng, c, c)
        ffn_spec = BlockSpec("MBConv", c, c, stride=1, expand=spec.expand)
        ffn = MBConvBlock.create(rng, ffn_spec, residual=False)
        return cls(spec, norm, qkv, bias_table, out_proj, ffn, auto_shrink)

    def _effective(self, hw: tuple[int, int]) -> tuple[NaConfig, np.ndarray]:
        cfg = self.spec.na
        if min(hw) < cfg.dilation:
            raise WindowError(f"map {hw} smaller than dilation {cfg.dilation}")
        k_eff = cfg.kernel
        if self.auto_shrink:
            k_eff = shrink_kernel(cfg.kernel, min(hw) // cfg.dilation)
        if k_eff * cfg.dilation > min(hw):
            raise WindowError(
                f"window {cfg.kernel} (dilation {cfg.dilation}) exceeds map {hw} and shrink is off"
            )
        if k_eff == cfg.kernel:
            return cfg, self.bias_table
        eff = NaConfig(k_eff, cfg.heads, cfg.head_dim, cfg.dilation)
        return eff, shrink_bias(self.bias_table, cfg.kernel, k_eff)

    def __call__(self, x: np.ndarray, threads: int = 1) -> np.ndarray:
        n, c, h, w = x.shape
        cfg, bias = self._effective((h, w))
        out = np.empty_like(x)
        for i in range(n):
            tokens = np.ascontiguousarray(x[i].transpose(1, 2, 0))
            t = self.norm(tokens)
            qkv = self.qkv(t)
            q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
            mixed, _ = na_forward(
                np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
                bias, cfg, threads=threads,
            )
            y = tokens + self.out_proj(mixed)
            out[i] = y.transpose(2, 0, 1)
        return out + self.ffn(out)

    def named_params(self, prefix: str):
        yield from self.norm.named_params(f"{prefix}.norm")
        yield from self.qkv.named_params(f"{prefix}.qkv")
        yield f"{prefix}.bias_table", self.bias_table
        yield from self.out_proj.named_params(f"{prefix}.out")
        yield from self.ffn.named_params(f"{prefix}.ffn")

    def out_hw(self, hw):
        return hw

    def macs(self, hw):
        cfg, _ = self._effective(hw)
        tokens = hw[0] * hw[1]
        attn = 2 * na_logit_macs(hw, cfg)
        return self.qkv.macs(tokens) + attn + self.out_proj.macs(tokens) + self.ffn.macs(hw)


def build_block(rng: Rng64, spec: BlockSpec, auto_shrink: bool = True):
    if spec.kind == "DSConv":
        return DSConvBlock.create(rng, spec)
    if spec.kind == "FusedMBConv":
        return FusedMBConvBlock.create(rng, spec)
    if spec.kind == "MBConv":
        return MBConvBlock.create(rng, spec)
    return EfficientNATBlock.create(rng, spec, auto_shrink=auto_shrink)
