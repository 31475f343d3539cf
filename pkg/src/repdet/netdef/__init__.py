"""Detector assembly, post-processing, accounting and weight I/O."""

from .config import ConfigError, ModelConfig, load_model_config, preset
from .graph import (
    N_LAYOUT,
    BlockSpec,
    GraphDef,
    GraphError,
    HeadOutputs,
    Model,
    build,
    count_params_flops,
    forward,
    fuse_model,
    fusion_max_error,
    graph_for,
    infer_shapes,
)
from .postprocess import decode, decode_batch, nms, postprocess
from .weights import WeightFormatError, load_weights, read_checkpoint, save_weights
