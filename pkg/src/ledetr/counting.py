"""Parameter and multiply-accumulate accounting.

MAC conventions, applied uniformly:
  * conv / linear / matmul: one MAC per multiply (k*k * ic/g * oc * H' * W').
  * folded per-channel affine: one MAC per output element.
  * attention: QK and AV each cost tokens * heads * window * head_dim; the
    windowed logit multiply count is exactly H * W * heads * k^2 * head_dim.
  * bilinear sampling: five MACs per sampled channel (four corner lerps plus
    the point-weight combine).
  * activations, softmax normalizers, and layer-norm statistics are not MACs.

GFLOPs are reported under both the MAC convention (macs / 1e9) and the
2 x MAC convention (2 * macs / 1e9); reports state which is which.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import LeDetr


def conv2d_count(
    k: int, ic: int, oc: int, out_hw: tuple[int, int], bias: bool = True, groups: int = 1
) -> tuple[int, int]:
    """(params, macs) of one raw convolution layer."""
    params = k * k * (ic // groups) * oc + (oc if bias else 0)
    macs = k * k * (ic // groups) * oc * out_hw[0] * out_hw[1]
    return params, macs


def dsconv_param_formula(ic: int, oc: int) -> int:
    """Depthwise 3x3 + affine, pointwise 1x1 + affine."""
    return 9 * ic + 2 * ic + ic * oc + 2 * oc


def fused_mbconv_param_formula(ic: int, oc: int, expand: int) -> int:
    """3x3 expansion + affine, 1x1 projection + affine (single conv at e=1)."""
    if expand == 1:
        return 9 * ic * oc + 2 * oc
    mid = ic * expand
    return 9 * ic * mid + 2 * mid + mid * oc + 2 * oc


def mbconv_param_formula(ic: int, oc: int, expand: int) -> int:
    """1x1 expand + affine, depthwise 3x3 + affine, 1x1 project + affine."""
    mid = ic * expand
    total = 0 if expand == 1 else ic * mid + 2 * mid
    return total + 9 * mid + 2 * mid + mid * oc + 2 * oc


def efficient_nat_param_formula(c: int, kernel: int, heads: int, expand: int) -> int:
    """Pre-norm, qkv + bias, relative-bias table, out proj + bias, MBConv FFN."""
    side = 2 * kernel - 1
    return (
        2 * c
        + 3 * c * c + 3 * c
        + heads * side * side
        + c * c + c
        + mbconv_param_formula(c, c, expand)
    )


@dataclass
class CountReport:
    scale: str
    input_hw: tuple[int, int]
    inference_layers: int
    params: int
    macs: int
    breakdown: list[tuple[str, int, int]]

    @property
    def gflops(self) -> float:
        """2 x MAC convention."""
        return 2.0 * self.macs / 1e9

    @property
    def gflops_mac(self) -> float:
        """1 MAC = 1 FLOP convention."""
        return self.macs / 1e9

    def check_totals(self) -> bool:
        return (
            sum(p for _, p, _ in self.breakdown) == self.params
            and sum(m for _, _, m in self.breakdown) == self.macs
        )

    def format(self) -> str:
        lines = [
            f"model {self.scale} at {self.input_hw[0]}x{self.input_hw[1]}, "
            f"{self.inference_layers} inference decoder layers",
            f"{'module':<12} {'params':>12} {'macs':>16}",
        ]
        for name, params, macs in self.breakdown:
            lines.append(f"{name:<12} {params:>12,} {macs:>16,}")
        lines.append(f"{'total':<12} {self.params:>12,} {self.macs:>16,}")
        lines.append(f"params: {self.params / 1e6:.2f} M")
        lines.append(f"gflops (2xMAC convention): {self.gflops:.1f}")
        lines.append(f"gflops (MAC convention):   {self.gflops_mac:.1f}")
        return "\n".join(lines)


def count_model(model: LeDetr, n_layers: int | None = None) -> CountReport:
    """Exact parameter count and analytic MACs at the configured input size.

    Decoder layers beyond ``n_layers`` are excluded: truncated inference
    never materializes them.
    """
    cfg = model.config
    if n_layers is None:
        n_layers = cfg.inference_layers

    section_params = {"backbone": 0, "encoder": 0, "decoder": 0}
    for name, arr in model.named_params():
        top = name.split(".", 1)[0]
        if top == "decoder" and name.startswith("decoder.layer"):
            layer_idx = int(name.split(".")[1].removeprefix("layer"))
            if layer_idx >= n_layers:
                continue
        section_params[top] += arr.size

    h, w = cfg.input_hw
    s3_hw = (h // 8, w // 8)
    tokens = (h // 8) * (w // 8) + (h // 16) * (w // 16) + (h // 32) * (w // 32)
    section_macs = {
        "backbone": model.backbone.macs((h, w)),
        "encoder": model.encoder.macs(s3_hw),
        "decoder": model.decoder.macs(tokens, n_layers),
    }

    breakdown = [(k, section_params[k], section_macs[k]) for k in ("backbone", "encoder", "decoder")]
    return CountReport(
        scale=cfg.scale,
        input_hw=cfg.input_hw,
        inference_layers=n_layers,
        params=sum(section_params.values()),
        macs=sum(section_macs.values()),
        breakdown=breakdown,
    )
