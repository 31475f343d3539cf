"""Desk-scale training and evaluation harness."""

from .config import TrainConfig, configs_from_dict, dump_config, load_config, toy_model_config
from .data import (
    Letterbox,
    SynthSample,
    gen_synth_dataset,
    gray_border_preprocess,
    mixup,
    mosaic,
    parse_data_spec,
)
from .loop import TrainingDiverged, TrainResult, detection_loss, evaluate_model, predict, train
from .metrics import APResult, evaluate_ap
from .optim import cosine_lr, ema_update, sgd_step
