"""2-D neighborhood attention: clamped sliding windows, relative positional
bias, value aggregation, analytic backward, and a dense masked oracle.

Window semantics: each query attends to exactly kernel x kernel keys. Near a
border the window shifts inward; with dilation > 1 the shift happens inside
the query's dilation sub-lattice, so key positions always share the query's
residue modulo the dilation. The bias table is indexed by the true relative
offset (query - key, in units of dilation), which stays inside the
(2k-1) x (2k-1) table even for clamped windows.

Row-wise work is split into fixed-size chunks. The chunk grid never depends
on the thread count and every per-chunk reduction is partition-invariant,
so sequential and threaded execution are bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, WindowError

ROW_CHUNK = 8


@dataclass(frozen=True)
class NaConfig:
    """Neighborhood-attention hyperparameters."""

    kernel: int
    heads: int
    head_dim: int
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError(f"heads/head_dim must be >= 1, got {self.heads}/{self.head_dim}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


def zero_bias(cfg: NaConfig, dtype=np.float32) -> np.ndarray:
    """Fresh all-zero relative-bias table, (heads, 2k-1, 2k-1)."""
    side = 2 * cfg.kernel - 1
    return np.zeros((cfg.heads, side, side), dtype=dtype)


@dataclass
class NaGrads:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_bias: np.ndarray


@dataclass
class NaCache:
    """Forward state retained for the backward pass."""

    q: np.ndarray  # (H, W, heads, d)
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # (H, W, heads, k*k), rows sum to 1
    cfg: NaConfig
    origins_h: np.ndarray
    origins_w: np.ndarray
    bias_h: np.ndarray  # (H, k) bias row index per query row and tap
    bias_w: np.ndarray


def shrink_kernel(k: int, extent: int) -> int:
    """Largest usable odd kernel: k itself if it fits, else trimmed to extent."""
    if extent < 1:
        raise ConfigError(f"extent must be >= 1, got {extent}")
    if k <= extent:
        return k
    return extent if extent % 2 == 1 else extent - 1


def shrink_bias(table: np.ndarray, k: int, k_eff: int) -> np.ndarray:
    """Center slice of a (2k-1)^2 table covering offsets of a smaller window."""
    if k_eff == k:
        return table
    lo = k - k_eff
    side = 2 * k_eff - 1
    return table[:, lo : lo + side, lo : lo + side]


def _axis_origins(extent: int, k: int, dilation: int) -> np.ndarray:
    """Absolute window origin for every query position along one axis."""
    if k * dilation > extent:
        raise WindowError(
            f"window span {k}x{dilation} exceeds extent {extent}; shrink the kernel"
        )
    pos = np.arange(extent)
    lat = pos % dilation
    idx = pos // dilation
    lat_len = (extent - 1 - lat) // dilation + 1
    origin = np.clip(idx - k // 2, 0, lat_len - k)
    return origin * dilation + lat


def _axis_bias_index(extent: int, k: int, dilation: int, origins: np.ndarray) -> np.ndarray:
    """Bias table row for (query position, tap): (pos - key) / dilation + k - 1."""
    pos = np.arange(extent)
    taps = np.arange(k)
    keys = origins[:, None] + taps[None, :] * dilation
    return (pos[:, None] - keys) // dilation + (k - 1)


def neighborhood_origin(
    pos: tuple[int, int], extents: tuple[int, int], cfg: NaConfig
) -> tuple[int, int]:
    """Window origin (h0, w0) for the query at ``pos`` on an H x W map."""
    h, w = pos
    hh, ww = extents
    oh = _axis_origins(hh, cfg.kernel, cfg.dilation)
    ow = _axis_origins(ww, cfg.kernel, cfg.dilation)
    return int(oh[h]), int(ow[w])


def _split_heads(x: np.ndarray, cfg: NaConfig, name: str) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != cfg.width:
        raise ShapeError(
            f"{name} must be (H, W, {cfg.width}) for heads={cfg.heads}, "
            f"head_dim={cfg.head_dim}; got {x.shape}"
        )
    return x.reshape(x.shape[0], x.shape[1], cfg.heads, cfg.head_dim)


def _bias_field(
    table: np.ndarray, bias_h: np.ndarray, bias_w: np.ndarray, k: int, dtype
) -> np.ndarray:
    hh, ww = bias_h.shape[0], bias_w.shape[0]
    heads = table.shape[0]
    field = np.empty((hh, ww, heads, k * k), dtype=dtype)
    for a in range(k):
        rows = bias_h[:, a]
        for b in range(k):
            cols = bias_w[:, b]
            field[:, :, :, a * k + b] = table[:, rows[:, None], cols[None, :]].transpose(1, 2, 0)
    return field


def na_forward(
    q: np.ndarray,
    k_: np.ndarray,
    v: np.ndarray,
    bias: np.ndarray,
    cfg: NaConfig,
    threads: int = 1,
) -> tuple[np.ndarray, NaCache]:
    """Neighborhood attention forward over an H x W token map.

    Inputs are (H, W, heads * head_dim). Per head:
        out(i) = softmax((Q_i K_w^T + B_w) / sqrt(head_dim)) V_w
    over the k x k window w of query i. Returns the merged-head output and a
    cache holding the attention weights.
    """
    k = cfg.kernel
    q4 = _split_heads(q, cfg, "q")
    k4 = _split_heads(k_, cfg, "k")
    v4 = _split_heads(v, cfg, "v")
    if k4.shape != q4.shape or v4.shape != q4.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k_.shape}, {v.shape}")
    side = 2 * k - 1
    if bias.shape != (cfg.heads, side, side):
        raise ShapeError(f"bias must be ({cfg.heads}, {side}, {side}), got {bias.shape}")

    hh, ww = q4.shape[:2]
    dil = cfg.dilation
    oh = _axis_origins(hh, k, dil)
    ow = _axis_origins(ww, k, dil)
    bias_h = _axis_bias_index(hh, k, dil, oh)
    bias_w = _axis_bias_index(ww, k, dil, ow)

    dtype = q4.dtype
    inv = dtype.type(1.0 / np.sqrt(cfg.head_dim))
    bfield = _bias_field(bias, bias_h, bias_w, k, dtype)
    out4 = np.empty_like(q4)
    attn = np.empty((hh, ww, cfg.heads, k * k), dtype=dtype)

    col_idx = [ow + b * dil for b in range(k)]

    def run_chunk(r0: int) -> None:
        r1 = min(r0 + ROW_CHUNK, hh)
        qc = q4[r0:r1]
        logits = np.empty((r1 - r0, ww, cfg.heads, k * k), dtype=dtype)
        for a in range(k):
            rows = (oh[r0:r1] + a * dil)[:, None]
            for b in range(k):
                kg = k4[rows, col_idx[b][None, :]]
                logits[..., a * k + b] = np.einsum("rwhd,rwhd->rwh", qc, kg)
        logits += bfield[r0:r1]
        logits *= inv
        shifted = logits - logits.max(axis=-1, keepdims=True)
        np.exp(shifted, out=shifted)
        shifted /= shifted.sum(axis=-1, keepdims=True)
        p = shifted
        acc = np.zeros_like(qc)
        for a in range(k):
            rows = (oh[r0:r1] + a * dil)[:, None]
            for b in range(k):
                vg = v4[rows, col_idx[b][None, :]]
                acc += p[..., a * k + b, None] * vg
        attn[r0:r1] = p
        out4[r0:r1] = acc

    starts = range(0, hh, ROW_CHUNK)
    if threads <= 1:
        for r0 in starts:
            run_chunk(r0)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts))

    cache = NaCache(q4, k4, v4, attn, cfg, oh, ow, bias_h, bias_w)
    return out4.reshape(hh, ww, cfg.width), cache


def na_backward(cache: NaCache, d_out: np.ndarray) -> NaGrads:
    """Analytic gradients of the forward output w.r.t. Q, K, V, and bias."""
    cfg = cache.cfg
    k = cfg.kernel
    dil = cfg.dilation
    q4, k4, v4, p = cache.q, cache.k, cache.v, cache.attn
    hh, ww = q4.shape[:2]
    if d_out.shape != (hh, ww, cfg.width):
        raise ShapeError(f"d_out shape {d_out.shape} != forward output ({hh}, {ww}, {cfg.width})")
    do4 = d_out.reshape(hh, ww, cfg.heads, cfg.head_dim).astype(q4.dtype, copy=False)

    dtype = q4.dtype
    inv = dtype.type(1.0 / np.sqrt(cfg.head_dim))
    oh, ow = cache.origins_h, cache.origins_w
    col_idx = [ow + b * dil for b in range(k)]

    d_p = np.empty_like(p)
    d_v = np.zeros_like(v4)
    for a in range(k):
        rows = (oh + a * dil)[:, None]
        for b in range(k):
            cols = col_idx[b][None, :]
            vg = v4[rows, cols]
            d_p[..., a * k + b] = np.einsum("rwhd,rwhd->rwh", do4, vg)
            np.add.at(d_v, (rows, cols), p[..., a * k + b, None] * do4)

    # softmax backward, then undo the 1/sqrt(d) scale
    d_logits = p * (d_p - (p * d_p).sum(axis=-1, keepdims=True))
    d_logits *= inv

    d_q = np.zeros_like(q4)
    d_k = np.zeros_like(k4)
    side = 2 * k - 1
    d_bias = np.zeros((cfg.heads, side, side), dtype=dtype)
    head_idx = np.arange(cfg.heads)[None, None, :]
    for a in range(k):
        rows = (oh + a * dil)[:, None]
        bh = cache.bias_h[:, a][:, None, None]
        for b in range(k):
            cols = col_idx[b][None, :]
            g = d_logits[..., a * k + b]
            kg = k4[rows, cols]
            d_q += g[..., None] * kg
            np.add.at(d_k, (rows, cols), g[..., None] * q4)
            bw = cache.bias_w[:, b][None, :, None]
            np.add.at(d_bias, (head_idx, bh, bw), g)

    return NaGrads(
        d_q=d_q.reshape(hh, ww, cfg.width),
        d_k=d_k.reshape(hh, ww, cfg.width),
        d_v=d_v.reshape(hh, ww, cfg.width),
        d_bias=d_bias,
    )


def window_mask_and_bias(
    extents: tuple[int, int], cfg: NaConfig, table: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Dense (n, n) attention mask for the clamped windows, plus the bias
    table gathered to (heads, n, n) when a table is given."""
    hh, ww = extents
    k = cfg.kernel
    dil = cfg.dilation
    n = hh * ww
    oh = _axis_origins(hh, k, dil)
    ow = _axis_origins(ww, k, dil)
    bias_h = _axis_bias_index(hh, k, dil, oh)
    bias_w = _axis_bias_index(ww, k, dil, ow)

    mask = np.zeros((n, n), dtype=bool)
    dense = None
    if table is not None:
        dense = np.zeros((cfg.heads, n, n), dtype=table.dtype)
    qflat = (np.arange(hh)[:, None] * ww + np.arange(ww)[None, :]).ravel()
    for a in range(k):
        keys_h = oh + a * dil
        for b in range(k):
            keys_w = ow + b * dil
            kflat = (keys_h[:, None] * ww + keys_w[None, :]).ravel()
            mask[qflat, kflat] = True
            if dense is not None:
                vals = table[:, bias_h[:, a][:, None], bias_w[:, b][None, :]]
                dense[:, qflat, kflat] = vals.reshape(cfg.heads, n)
    return mask, dense


def dense_attention_oracle(
    q: np.ndarray,
    k_: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray | None = None,
    bias_gather: np.ndarray | None = None,
) -> np.ndarray:
    """Reference O(n^2) attention with -inf outside the mask.

    q, k_, v are (n, heads, d); mask is (n, n) bool (True = attend);
    bias_gather is (heads, n, n). With no mask and no bias this is plain
    dense softmax attention.
    """
    if q.shape != k_.shape or q.shape != v.shape or q.ndim != 3:
        raise ShapeError(f"q/k/v must share (n, heads, d); got {q.shape}, {k_.shape}, {v.shape}")
    n, heads, d = q.shape
    if mask is not None and mask.shape != (n, n):
        raise ShapeError(f"mask must be ({n}, {n}), got {mask.shape}")
    inv = q.dtype.type(1.0 / np.sqrt(d))
    out = np.empty_like(q)
    neg = np.asarray(-np.inf, dtype=q.dtype)
    for h in range(heads):
        logits = q[:, h] @ k_[:, h].T
        if bias_gather is not None:
            logits = logits + bias_gather[h]
        logits = logits * inv
        if mask is not None:
            logits = np.where(mask, logits, neg)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        out[:, h] = p @ v[:, h]
    return out


def na_logit_macs(extents: tuple[int, int], cfg: NaConfig) -> int:
    """Exact multiply count of the windowed logit computation."""
    hh, ww = extents
    return hh * ww * cfg.heads * cfg.kernel * cfg.kernel * cfg.head_dim
