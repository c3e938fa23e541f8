"""Self-contained invariant suites behind the ``check`` CLI command.

Each suite prints one line per invariant and returns overall success. The
numeric thresholds mirror the library's contracts: oracle agreement at 1e-5,
gradient agreement at 1e-3 relative, prefix and determinism checks bit-exact.
"""

from __future__ import annotations

import numpy as np

from .backbone import build_backbone, list_patterns
from .encoder import flatten_memory
from .errors import ConfigError
from .model import LeDetr, ModelConfig
from .na import (
    NaConfig,
    dense_attention_oracle,
    na_backward,
    na_forward,
    window_mask_and_bias,
)
from .rng import Rng64
from .tensor import Tensor4, init_normal

ORACLE_TOL = 1e-5
GRAD_TOL = 1e-3
GRAD_EPS = 1e-4
GRAD_REL_FLOOR = 1e-6


def _emit(out, ok: bool, label: str, detail: str = "") -> bool:
    mark = "PASS" if ok else "FAIL"
    out(f"[{mark}] {label}" + (f": {detail}" if detail else ""))
    return ok


def _rand(rng: Rng64, shape, dtype=np.float32):
    return init_normal(rng, shape, 1.0).astype(dtype)


def na_oracle_grid(seeds: int = 20):
    """Yield (label, max_abs_diff) over the full oracle-equivalence grid."""
    for h in range(3, 9):
        for w in range(3, 9):
            for k in (1, 3, 5):
                if k > min(h, w):
                    continue
                for heads in (1, 2):
                    for head_dim in (2, 4):
                        cfg = NaConfig(k, heads, head_dim)
                        worst = 0.0
                        worst_rows = 0.0
                        for s in range(seeds):
                            rng = Rng64(h * 1_000_000 + w * 10_000 + k * 1000 + heads * 100 + head_dim * 10 + s)
                            q = _rand(rng, (h, w, cfg.width))
                            kk = _rand(rng, (h, w, cfg.width))
                            v = _rand(rng, (h, w, cfg.width))
                            side = 2 * k - 1
                            bias = _rand(rng, (heads, side, side))
                            out_na, cache = na_forward(q, kk, v, bias, cfg)
                            mask, dense_bias = window_mask_and_bias((h, w), cfg, bias)
                            flat = lambda x: x.reshape(h * w, heads, head_dim)
                            ref = dense_attention_oracle(flat(q), flat(kk), flat(v), mask, dense_bias)
                            diff = float(np.max(np.abs(out_na - ref.reshape(out_na.shape))))
                            worst = max(worst, diff)
                            row_err = float(np.max(np.abs(cache.attn.sum(-1) - 1.0)))
                            worst_rows = max(worst_rows, row_err)
                        yield f"H={h} W={w} k={k} heads={heads} d={head_dim}", worst, worst_rows


def check_na_oracle(out=print) -> bool:
    ok = True
    worst = 0.0
    worst_rows = 0.0
    cases = 0
    for label, diff, row_err in na_oracle_grid():
        cases += 1
        worst = max(worst, diff)
        worst_rows = max(worst_rows, row_err)
        if diff > ORACLE_TOL:
            ok = _emit(out, False, f"na-oracle {label}", f"max abs diff {diff:.2e}") and ok
    ok = _emit(out, worst <= ORACLE_TOL, f"na-oracle grid ({cases} configs x 20 seeds)",
               f"max abs diff {worst:.2e} (tol {ORACLE_TOL:.0e})") and ok
    ok = _emit(out, worst_rows <= 1e-6, "attention rows sum to 1", f"max err {worst_rows:.2e}") and ok
    return ok


def grad_instances(n: int = 10):
    """Max per-element relative error, analytic vs central differences, f64."""
    cfg = NaConfig(3, 2, 4)
    h = w = 4
    for s in range(n):
        rng = Rng64(5000 + s)
        q = _rand(rng, (h, w, cfg.width), np.float64)
        kk = _rand(rng, (h, w, cfg.width), np.float64)
        v = _rand(rng, (h, w, cfg.width), np.float64)
        bias = _rand(rng, (2, 5, 5), np.float64)
        d_out = _rand(rng, (h, w, cfg.width), np.float64)

        def loss():
            res, _ = na_forward(q, kk, v, bias, cfg)
            return float((res * d_out).sum())

        _, cache = na_forward(q, kk, v, bias, cfg)
        grads = na_backward(cache, d_out)
        worst = 0.0
        for analytic, arr in ((grads.d_q, q), (grads.d_k, kk), (grads.d_v, v), (grads.d_bias, bias)):
            fd = np.zeros_like(arr)
            flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + GRAD_EPS
                fp = loss()
                flat[i] = orig - GRAD_EPS
                fm = loss()
                flat[i] = orig
                fd_flat[i] = (fp - fm) / (2 * GRAD_EPS)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), GRAD_REL_FLOOR)
            worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
        yield s, worst


def check_grad(out=print) -> bool:
    worst = 0.0
    for s, err in grad_instances():
        worst = max(worst, err)
    return _emit(out, worst <= GRAD_TOL, "gradients vs central differences (10 instances)",
                 f"max rel err {worst:.2e} (tol {GRAD_TOL:.0e})")


def check_prefix(out=print) -> bool:
    cfg = ModelConfig(scale="M", input_hw=(160, 160), seed=11)
    model = LeDetr.build(cfg)
    x = Tensor4(init_normal(Rng64(99), (1, 3, 160, 160), 1.0))
    pyramid = model.backbone.forward(x)
    memory = flatten_memory(model.encoder.fuse_pyramid(pyramid))
    full = model.decoder.decode(memory, 6)
    ok = True
    for n in (4, 5):
        short = model.decoder.decode(memory, n)
        exact = all(
            np.array_equal(a.boxes, b.boxes) and np.array_equal(a.logits, b.logits)
            for a, b in zip(short, full)
        )
        ok = _emit(out, exact, f"decode({n}) is a bit-exact prefix of decode(6)") and ok
    boxes_ok = all(np.all(d.boxes > 0) and np.all(d.boxes < 1) for d in full)
    ok = _emit(out, boxes_ok, "all emitted boxes inside the unit box") and ok
    return ok


def check_shapes(out=print) -> bool:
    ok = True
    bb = build_backbone("M", seed=1)
    x640 = Tensor4(init_normal(Rng64(2), (1, 3, 640, 640), 1.0))
    pyr = bb.forward(x640)
    ok = _emit(out, pyr.s5.shape == (1, 512, 20, 20), "backbone 640x640 -> s5 512x20x20",
               f"got {pyr.s5.shape}") and ok
    model = LeDetr.build(ModelConfig(scale="M", input_hw=(640, 640), seed=1))
    model.backbone = bb
    fused = model.encoder.fuse_pyramid(pyr)
    memory = flatten_memory(fused)
    ok = _emit(out, memory.tokens.shape[0] == 8400, "encoder memory is 8400 tokens at 640x640",
               f"got {memory.tokens.shape[0]}") and ok
    x64 = Tensor4(init_normal(Rng64(3), (1, 3, 64, 64), 1.0))
    for p in list_patterns():
        try:
            out5 = build_backbone(p.key, seed=1).forward(x64).s5
            good = out5.shape == (1, 512, 2, 2)
        except Exception as exc:  # noqa: BLE001 - report, do not crash the suite
            good = False
            out(f"       {p.key}: {exc}")
        ok = _emit(out, good, f"pattern {p.key} builds and forwards 64x64") and ok
    return ok


SUITES = {
    "na-oracle": check_na_oracle,
    "grad": check_grad,
    "prefix": check_prefix,
    "shapes": check_shapes,
}


def run_suite(name: str, out=print) -> bool:
    if name == "all":
        result = True
        for suite_name, fn in SUITES.items():
            out(f"== suite {suite_name}")
            result = fn(out) and result
        return result
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; valid: {', '.join([*SUITES, 'all'])}")
    return SUITES[name](out)
