"""Character-level bidirectional LSTM name model with geolocation fusion."""

from .gradcheck import GradCheckReport, grad_check, micro_config
from .network import (
    GEO_DIM,
    GEO_MODE_CONCAT,
    GEO_MODE_PREFIX,
    LstmGeoConfig,
    LstmGeoModel,
    batch_loss,
    forward_batch,
    forward_one,
    init_model,
    loss_and_gradients,
    predict_proba,
)
from .optimizer import AdamState, adam_step
from .serialize import load_model, save_model
from .tokenizer import BASE_VOCAB_SIZE, PAD, SEP, UNK, geo_prefix_tokens, tokenize, vocab_size
from .training import (
    BatchPrediction,
    EarlyStopper,
    TrainLogEntry,
    geo_vector,
    mean_geo_vector,
    predict_batch,
    prepare_examples,
    train,
    training_accuracy,
)

__all__ = [
    "AdamState",
    "BASE_VOCAB_SIZE",
    "BatchPrediction",
    "EarlyStopper",
    "GEO_DIM",
    "GEO_MODE_CONCAT",
    "GEO_MODE_PREFIX",
    "GradCheckReport",
    "LstmGeoConfig",
    "LstmGeoModel",
    "PAD",
    "SEP",
    "TrainLogEntry",
    "UNK",
    "adam_step",
    "batch_loss",
    "forward_batch",
    "forward_one",
    "geo_prefix_tokens",
    "geo_vector",
    "grad_check",
    "init_model",
    "load_model",
    "loss_and_gradients",
    "mean_geo_vector",
    "micro_config",
    "predict_batch",
    "predict_proba",
    "prepare_examples",
    "save_model",
    "tokenize",
    "train",
    "training_accuracy",
    "vocab_size",
]
