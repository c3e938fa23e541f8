"""CPU inference kernels and benchmarks for the Le-DETR detection
architecture: 2-D neighborhood attention with relative positional bias, the
EfficientNAT backbone, the NAIFI hybrid encoder, and a truncatable
deformable-attention decoder."""

from .backbone import (
    Backbone,
    BackboneSpec,
    FeaturePyramid,
    build_backbone,
    list_patterns,
)
from .blocks import BlockSpec
from .counting import CountReport, count_model
from .decoder import Decoder, DecoderSpec, DetectionSet, write_detections
from .encoder import Encoder, EncoderSpec, Memory, flatten_memory, unflatten_memory
from .errors import (
    ConfigError,
    LeDetrError,
    NumericError,
    ParameterError,
    ShapeError,
    WindowError,
)
from .model import LeDetr, ModelConfig, build_model
from .na import (
    NaConfig,
    NaGrads,
    dense_attention_oracle,
    na_backward,
    na_forward,
    neighborhood_origin,
    shrink_kernel,
)
from .rng import Rng64
from .tensor import Tensor4, conv2d, init_normal, layernorm, matmul, softmax_lastdim

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneSpec",
    "BlockSpec",
    "ConfigError",
    "CountReport",
    "Decoder",
    "DecoderSpec",
    "DetectionSet",
    "Encoder",
    "EncoderSpec",
    "FeaturePyramid",
    "LeDetr",
    "LeDetrError",
    "Memory",
    "ModelConfig",
    "NaConfig",
    "NaGrads",
    "NumericError",
    "ParameterError",
    "Rng64",
    "ShapeError",
    "Tensor4",
    "WindowError",
    "build_backbone",
    "build_model",
    "conv2d",
    "count_model",
    "dense_attention_oracle",
    "flatten_memory",
    "init_normal",
    "layernorm",
    "list_patterns",
    "matmul",
    "na_backward",
    "na_forward",
    "neighborhood_origin",
    "shrink_kernel",
    "softmax_lastdim",
    "unflatten_memory",
    "write_detections",
]
