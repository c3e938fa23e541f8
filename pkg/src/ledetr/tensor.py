"""Dense rank-4 tensor container and the numeric primitives built on it.

Conventions, fixed for the whole library:
  * layout is (N, C, H, W), row-major, contiguous float32
  * no broadcasting: shapes must match an operation's contract exactly
  * softmax always subtracts the row max before exponentiating
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .rng import Rng64

MAGIC = b"LET4"
DUMP_VERSION = 1


@dataclass
class Tensor4:
    """Contiguous float32 array in (N, C, H, W) layout."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 requires rank 4, got shape {self.data.shape}")
        if any(e < 1 for e in self.data.shape):
            raise ShapeError(f"Tensor4 extents must be >= 1, got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor4":
        return cls(np.zeros((n, c, h, w), dtype=np.float32))

    def flatten_index(self, n: int, c: int, h: int, w: int) -> int:
        _, C, H, W = self.shape
        return ((n * C + c) * H + h) * W + w

    def unflatten_index(self, i: int) -> tuple[int, int, int, int]:
        _, C, H, W = self.shape
        w = i % W
        i //= W
        h = i % H
        i //= H
        c = i % C
        return i // C, c, h, w


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor4) else np.asarray(x)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strict 2-D matrix product c[m, n] = sum_k a[m, k] * b[k, n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    return a @ b


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax axis must have length >= 1")
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    """Smooth gating activation x * sigmoid(x), used everywhere in conv blocks."""
    return x * sigmoid(x)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-token normalization over the last axis, then affine."""
    if eps <= 0:
        raise ParameterError(f"layernorm eps must be > 0, got {eps}")
    x = np.asarray(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def init_normal(rng: Rng64, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Seed-deterministic zero-mean normal draw, float32."""
    if std <= 0:
        raise ParameterError(f"init_normal std must be > 0, got {std}")
    n = int(np.prod(shape))
    return (rng.normal(n) * std).astype(np.float32).reshape(shape)


def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d(
    x,
    weight: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
):
    """2-D convolution (cross-correlation) on (N, C, H, W) input.

    weight is (OC, IC // groups, kh, kw); groups == C gives the depthwise case.
    Returns the same container kind (Tensor4 in, Tensor4 out).
    """
    wrap = isinstance(x, Tensor4)
    xa = _as_array(x)
    if xa.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {xa.shape}")
    n, c, h, w = xa.shape
    oc, icg, kh, kw = weight.shape
    if c % groups != 0 or oc % groups != 0:
        raise ShapeError(f"conv2d channels {c}->{oc} not divisible by groups={groups}")
    if icg != c // groups:
        raise ShapeError(
            f"conv2d weight {weight.shape} inconsistent with input channels {c}, groups {groups}"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)

    if padding:
        xp = np.zeros((n, c, hp, wp), dtype=xa.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = xa
    else:
        xp = xa

    if kh == 1 and kw == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride]
        flat = xs.reshape(n, c, ho * wo)
        out = np.matmul(weight.reshape(oc, c), flat).reshape(n, oc, ho, wo)
    elif groups == c and icg == 1:
        # depthwise: accumulate the k*k shifted slices, one fused op per tap
        mult = oc // c
        out = np.zeros((n, c, mult, ho, wo), dtype=xa.dtype)
        wv = weight.reshape(c, mult, kh, kw)
        for a in range(kh):
            for b in range(kw):
                patch = xp[:, :, a : a + ho * stride : stride, b : b + wo * stride : stride]
                out += wv[None, :, :, a, b, None, None] * patch[:, :, None]
        out = out.reshape(n, oc, ho, wo)
    else:
        out = np.empty((n, oc, ho, wo), dtype=np.float32)
        cg = c // groups
        og = oc // groups
        for g in range(groups):
            xg = xp[:, g * cg : (g + 1) * cg]
            cols = _im2col(xg, kh, kw, stride, ho, wo)
            wg = weight[g * og : (g + 1) * og].reshape(og, cg * kh * kw)
            out[:, g * og : (g + 1) * og] = np.matmul(wg, cols).reshape(n, og, ho, wo)

    out = np.ascontiguousarray(out, dtype=np.float32)
    return Tensor4(out) if wrap else out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def save_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Write one LET4 record: magic, version, four u32 extents, f32 payload.

    Arrays of rank < 4 are stored with leading extents of 1.
    """
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 4:
        raise ShapeError(f"cannot dump rank-{arr.ndim} tensor")
    shape4 = (1,) * (4 - arr.ndim) + arr.shape
    f.write(MAGIC)
    f.write(struct.pack("<I", DUMP_VERSION))
    f.write(struct.pack("<4I", *shape4))
    f.write(arr.astype("<f4").tobytes())


def load_tensor(f: BinaryIO) -> np.ndarray:
    """Read one LET4 record; returns the rank-4 array."""
    magic = f.read(4)
    if magic != MAGIC:
        raise ShapeError(f"bad tensor dump magic {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != DUMP_VERSION:
        raise ShapeError(f"unsupported tensor dump version {version}")
    shape4 = struct.unpack("<4I", f.read(16))
    count = int(np.prod(shape4))
    data = np.frombuffer(f.read(count * 4), dtype="<f4").astype(np.float32)
    if data.size != count:
        raise ShapeError("truncated tensor dump")
    return data.reshape(shape4)
