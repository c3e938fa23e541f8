"""Full detector assembly and the JSON model configuration."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .backbone import Backbone, resolve_spec
from .decoder import Decoder, DecoderSpec, DetectionSet
from .encoder import Encoder, EncoderSpec, flatten_memory
from .errors import ConfigError, ShapeError
from .rng import Rng64
from .tensor import Tensor4

_CONFIG_KEYS = {"scale", "input_hw", "inference_layers", "seed", "threads"}


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "M"
    input_hw: tuple[int, int] = (640, 640)
    inference_layers: int = 6
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError(f"input_hw must be divisible by 32, got {self.input_hw}")
        if not 1 <= self.inference_layers <= 6:
            raise ConfigError(f"inference_layers must be in [1, 6], got {self.inference_layers}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        resolve_spec(self.scale)  # raises on unknown names

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(
                f"unknown config keys {sorted(unknown)}; valid keys: {sorted(_CONFIG_KEYS)}"
            )
        if "input_hw" in raw:
            hw = raw["input_hw"]
            if not (isinstance(hw, list) and len(hw) == 2):
                raise ConfigError(f"input_hw must be [H, W], got {hw!r}")
            raw["input_hw"] = tuple(int(e) for e in hw)
        if "LE_SEED" in os.environ:
            raw["seed"] = int(os.environ["LE_SEED"])
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str) -> "ModelConfig":
        with open(path) as f:
            return cls.from_json(f.read())


class LeDetr:
    """Backbone + hybrid encoder + truncatable decoder."""

    def __init__(self, config: ModelConfig, backbone: Backbone, encoder: Encoder, decoder: Decoder):
        self.config = config
        self.backbone = backbone
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def build(cls, config: ModelConfig) -> "LeDetr":
        rng = Rng64(config.seed)
        backbone = Backbone.create(rng, resolve_spec(config.scale))
        c5 = backbone.spec.widths[-1]
        enc_spec = EncoderSpec(in_channels=(c5 // 4, c5 // 2, c5))
        encoder = Encoder.create(rng, enc_spec)
        decoder = Decoder.create(rng, DecoderSpec(hidden_dim=enc_spec.embed_dim))
        return cls(config, backbone, encoder, decoder)

    def forward(
        self, image: Tensor4, n_layers: int | None = None, threads: int | None = None
    ) -> list[DetectionSet]:
        if image.shape[0] != 1:
            raise ShapeError(f"detection forward expects batch 1, got {image.shape[0]}")
        if n_layers is None:
            n_layers = self.config.inference_layers
        if threads is None:
            threads = self.config.threads
        pyramid = self.backbone.forward(image, threads=threads)
        fused = self.encoder.fuse_pyramid(pyramid, threads=threads)
        memory = flatten_memory(fused)
        return self.decoder.decode(memory, n_layers)

    def named_params(self):
        yield from self.backbone.named_params("backbone")
        yield from self.encoder.named_params("encoder")
        yield from self.decoder.named_params("decoder")

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_params())


def build_model(config: ModelConfig) -> LeDetr:
    return LeDetr.build(config)
