"""Deformable-attention DETR decoder with per-layer prediction heads and
inference-time layer truncation.

Queries are the top-k memory tokens by class score; reference boxes are
refined layer by layer through inverse-sigmoid residual updates. Each layer
owns its prediction head, so running only the first n layers of the
6-layer-trained stack yields exactly the first n detection sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import LayerNorm, Linear
from .encoder import Memory
from .errors import ConfigError, ShapeError
from .rng import Rng64
from .tensor import sigmoid, silu, softmax_lastdim

ANCHOR_BASE = 0.05  # normalized box size seed per pyramid level: 0.05 * 2**level


@dataclass(frozen=True)
class DecoderSpec:
    hidden_dim: int = 256
    ffn_dim: int = 1024
    layers_trained: int = 6
    queries: int = 300
    heads: int = 8
    sampling_points: tuple[int, int, int] = (3, 6, 3)
    num_classes: int = 80

    def __post_init__(self):
        if self.queries < 1:
            raise ConfigError(f"queries must be >= 1, got {self.queries}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.layers_trained < 1:
            raise ConfigError(f"layers_trained must be >= 1, got {self.layers_trained}")

    @property
    def total_points(self) -> int:
        return sum(self.sampling_points)


@dataclass
class DetectionSet:
    """Per-query class logits and normalized (cx, cy, w, h) boxes."""

    boxes: np.ndarray
    logits: np.ndarray
    layer_index: int


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


class Mlp:
    """Three-layer box head: hidden -> hidden -> 4."""

    def __init__(self, layers):
        self.layers = layers

    @classmethod
    def create(cls, rng: Rng64, dims: tuple[int, ...]):
        return cls([Linear.create(rng, a, b) for a, b in zip(dims, dims[1:])])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for lin in self.layers[:-1]:
            x = silu(lin(x))
        return self.layers[-1](x)

    def named_params(self, prefix: str):
        for i, lin in enumerate(self.layers):
            yield from lin.named_params(f"{prefix}.{i}")

    def macs(self, tokens: int) -> int:
        return sum(lin.macs(tokens) for lin in self.layers)


class DecoderLayer:
    def __init__(self, spec, qkv, attn_out, norm1, offsets, weights, value_proj,
                 cross_out, norm2, fc1, fc2, norm3, class_head, bbox_head):
        self.spec = spec
        self.qkv = qkv
        self.attn_out = attn_out
        self.norm1 = norm1
        self.offsets = offsets
        self.weights = weights
        self.value_proj = value_proj
        self.cross_out = cross_out
        self.norm2 = norm2
        self.fc1 = fc1
        self.fc2 = fc2
        self.norm3 = norm3
        self.class_head = class_head
        self.bbox_head = bbox_head

    @classmethod
    def create(cls, rng: Rng64, spec: DecoderSpec):
        d = spec.hidden_dim
        p = spec.heads * spec.total_points
        return cls(
            spec,
            qkv=Linear.create(rng, d, 3 * d),
            attn_out=Linear.create(rng, d, d),
            norm1=LayerNorm.create(d),
            offsets=Linear.create(rng, d, 2 * p),
            weights=Linear.create(rng, d, p),
            value_proj=Linear.create(rng, d, d),
            cross_out=Linear.create(rng, d, d),
            norm2=LayerNorm.create(d),
            fc1=Linear.create(rng, d, spec.ffn_dim),
            fc2=Linear.create(rng, spec.ffn_dim, d),
            norm3=LayerNorm.create(d),
            class_head=Linear.create(rng, d, spec.num_classes),
            bbox_head=Mlp.create(rng, (d, d, d, 4)),
        )

    def named_params(self, prefix: str):
        yield from self.qkv.named_params(f"{prefix}.self.qkv")
        yield from self.attn_out.named_params(f"{prefix}.self.out")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.offsets.named_params(f"{prefix}.cross.offsets")
        yield from self.weights.named_params(f"{prefix}.cross.weights")
        yield from self.value_proj.named_params(f"{prefix}.cross.value")
        yield from self.cross_out.named_params(f"{prefix}.cross.out")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.fc1.named_params(f"{prefix}.ffn.fc1")
        yield from self.fc2.named_params(f"{prefix}.ffn.fc2")
        yield from self.norm3.named_params(f"{prefix}.norm3")
        yield from self.class_head.named_params(f"{prefix}.head.cls")
        yield from self.bbox_head.named_params(f"{prefix}.head.box")


def _bilinear_sample(level: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """Sample (h, w, heads, d) maps at normalized (x, y) points, border-clamped.

    locs is (Q, heads, p, 2); returns (Q, heads, p, d).
    """
    h, w, heads, d = level.shape
    x = locs[..., 0] * w - 0.5
    y = locs[..., 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = (x - x0)[..., None]
    ty = (y - y0)[..., None]
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)

    hidx = np.arange(heads)[None, :, None]
    v00 = level[y0i, x0i, hidx]
    v01 = level[y0i, x1i, hidx]
    v10 = level[y1i, x0i, hidx]
    v11 = level[y1i, x1i, hidx]
    top = v00 * (1.0 - tx) + v01 * tx
    bot = v10 * (1.0 - tx) + v11 * tx
    return top * (1.0 - ty) + bot * ty


class Decoder:
    def __init__(self, spec, enc_output, enc_norm, enc_score, enc_bbox, layers):
        self.spec = spec
        self.enc_output = enc_output
        self.enc_norm = enc_norm
        self.enc_score = enc_score
        self.enc_bbox = enc_bbox
        self.layers = layers

    @classmethod
    def create(cls, rng: Rng64, spec: DecoderSpec) -> "Decoder":
        d = spec.hidden_dim
        enc_output = Linear.create(rng, d, d)
        enc_norm = LayerNorm.create(d)
        enc_score = Linear.create(rng, d, spec.num_classes)
        enc_bbox = Mlp.create(rng, (d, d, d, 4))
        layers = [DecoderLayer.create(rng, spec) for _ in range(spec.layers_trained)]
        return cls(spec, enc_output, enc_norm, enc_score, enc_bbox, layers)

    def select_queries(self, memory: Memory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Top-k memory tokens by max class score.

        Returns (query embeddings (k, d), reference boxes (k, 4), selected
        token indices). Ties break toward the lower token index.
        """
        k = self.spec.queries
        t = memory.tokens.shape[0]
        if t < k:
            raise ConfigError(f"memory has {t} tokens but {k} queries are required")
        feats = self.enc_norm(self.enc_output(memory.tokens))
        scores = self.enc_score(feats).max(axis=-1)
        order = np.argsort(-scores, kind="stable")
        sel = order[:k]

        anchors = self._anchors(memory)
        delta = self.enc_bbox(feats[sel])
        refs = sigmoid(inverse_sigmoid(anchors[sel]) + delta)
        return feats[sel], refs, sel

    def _anchors(self, memory: Memory) -> np.ndarray:
        sizes = []
        for level, (h, w) in enumerate(memory.level_shapes):
            base = ANCHOR_BASE * (2.0**level)
            sizes.append(np.full((h * w, 2), base, dtype=np.float32))
        wh = np.concatenate(sizes)
        return np.concatenate([memory.refs, wh], axis=1)

    def _level_values(self, memory: Memory, n_layers: int | None = None) -> list[list[np.ndarray]]:
        """Per-layer value projection of the memory, split per level."""
        spec = self.spec
        per_layer = []
        offs = memory.level_offsets
        for layer in self.layers[: len(self.layers) if n_layers is None else n_layers]:
            values = layer.value_proj(memory.tokens)
            maps = []
            for i, (h, w) in enumerate(memory.level_shapes):
                chunk = values[offs[i] : offs[i + 1]]
                maps.append(
                    np.ascontiguousarray(
                        chunk.reshape(h, w, spec.heads, spec.hidden_dim // spec.heads)
                    )
                )
            per_layer.append(maps)
        return per_layer

    def deformable_cross_attn(
        self,
        queries: np.ndarray,
        refs: np.ndarray,
        level_values: list[np.ndarray],
        layer: DecoderLayer,
    ) -> np.ndarray:
        """Sample each level at learned offsets around the reference boxes and
        combine with softmax weights shared across all sampled points."""
        spec = self.spec
        q = queries.shape[0]
        heads = spec.heads
        dh = spec.hidden_dim // heads
        total = spec.total_points

        offsets = layer.offsets(queries).reshape(q, heads, total, 2)
        weights = softmax_lastdim(layer.weights(queries).reshape(q, heads, total))

        ref_xy = refs[:, None, None, :2]
        ref_wh = refs[:, None, None, 2:]
        gathered = np.empty((q, heads, total, dh), dtype=queries.dtype)
        start = 0
        for level, points in zip(level_values, spec.sampling_points):
            off = offsets[:, :, start : start + points]
            locs = ref_xy + off / points * ref_wh * 0.5
            gathered[:, :, start : start + points] = _bilinear_sample(level, locs)
            start += points
        mixed = (weights[..., None] * gathered).sum(axis=2)
        return layer.cross_out(mixed.reshape(q, spec.hidden_dim))

    def _self_attention(self, x: np.ndarray, layer: DecoderLayer) -> np.ndarray:
        spec = self.spec
        q_n = x.shape[0]
        heads = spec.heads
        dh = spec.hidden_dim // heads
        qkv = layer.qkv(x).reshape(q_n, 3, heads, dh)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        inv = np.float32(1.0 / np.sqrt(dh))
        out = np.empty((q_n, heads, dh), dtype=x.dtype)
        for h in range(heads):
            logits = (q[:, h] @ k[:, h].T) * inv
            attn = softmax_lastdim(logits)
            out[:, h] = attn @ v[:, h]
        return layer.attn_out(out.reshape(q_n, spec.hidden_dim))

    def decoder_layer(
        self,
        queries: np.ndarray,
        refs: np.ndarray,
        level_values: list[np.ndarray],
        layer: DecoderLayer,
        layer_index: int,
    ) -> tuple[np.ndarray, np.ndarray, DetectionSet]:
        y = layer.norm1(queries + self._self_attention(queries, layer))
        z = layer.norm2(y + self.deformable_cross_attn(y, refs, level_values, layer))
        f = layer.norm3(z + layer.fc2(silu(layer.fc1(z))))
        delta = layer.bbox_head(f)
        new_refs = sigmoid(inverse_sigmoid(refs) + delta)
        logits = layer.class_head(f)
        return f, new_refs, DetectionSet(new_refs, logits, layer_index)

    def decode(self, memory: Memory, n_layers: int | None = None) -> list[DetectionSet]:
        """Run the first n layers of the trained stack; one DetectionSet each."""
        spec = self.spec
        if n_layers is None:
            n_layers = spec.layers_trained
        if not 1 <= n_layers <= spec.layers_trained:
            raise ConfigError(
                f"n_layers must be in [1, {spec.layers_trained}], got {n_layers}"
            )
        if memory.tokens.shape[1] != spec.hidden_dim:
            raise ShapeError(
                f"memory width {memory.tokens.shape[1]} != hidden_dim {spec.hidden_dim}"
            )
        queries, refs, _ = self.select_queries(memory)
        per_layer_values = self._level_values(memory, n_layers)
        sets: list[DetectionSet] = []
        for i in range(n_layers):
            queries, refs, det = self.decoder_layer(
                queries, refs, per_layer_values[i], self.layers[i], i
            )
            sets.append(det)
        return sets

    def named_params(self, prefix: str = "decoder"):
        yield from self.enc_output.named_params(f"{prefix}.enc.proj")
        yield from self.enc_norm.named_params(f"{prefix}.enc.norm")
        yield from self.enc_score.named_params(f"{prefix}.enc.score")
        yield from self.enc_bbox.named_params(f"{prefix}.enc.bbox")
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")

    def layer_param_count(self) -> int:
        return sum(a.size for _, a in self.layers[0].named_params("x"))

    def macs(self, tokens: int, n_layers: int | None = None) -> int:
        spec = self.spec
        if n_layers is None:
            n_layers = spec.layers_trained
        q = spec.queries
        dh = spec.hidden_dim // spec.heads
        total = 0
        total += self.enc_output.macs(tokens)
        total += self.enc_score.macs(tokens)
        total += self.enc_bbox.macs(q)
        for layer in self.layers[:n_layers]:
            total += layer.qkv.macs(q) + layer.attn_out.macs(q)
            total += 2 * q * q * spec.hidden_dim  # dense self-attention QK + AV
            total += layer.offsets.macs(q) + layer.weights.macs(q)
            total += layer.value_proj.macs(tokens) + layer.cross_out.macs(q)
            # bilinear corners (4 lerp macs per channel) plus the point mix
            total += q * spec.heads * spec.total_points * dh * 5
            total += layer.fc1.macs(q) + layer.fc2.macs(q)
            total += layer.class_head.macs(q) + layer.bbox_head.macs(q)
        return total


def write_detections(path: str, sets: list[DetectionSet]) -> None:
    """Comma-separated detection records ordered by (layer, query index)."""
    with open(path, "w") as f:
        f.write("layer_index,class_id,score,cx,cy,w,h\n")
        for det in sets:
            cls = det.logits.argmax(axis=-1)
            score = sigmoid(det.logits.max(axis=-1))
            for qi in range(det.boxes.shape[0]):
                cx, cy, w, h = det.boxes[qi]
                f.write(
                    f"{det.layer_index},{int(cls[qi])},{score[qi]:.6f},"
                    f"{cx:.6f},{cy:.6f},{w:.6f},{h:.6f}\n"
                )
