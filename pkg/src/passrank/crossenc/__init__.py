from .model import (
    AttentionTrace,
    Batch,
    EncoderConfig,
    EncoderParams,
    InputEncoding,
    NumericError,
    SpecialIds,
    encode_pair,
    encode_single,
    encoder_keys,
    forward,
    init_params,
    load_params,
    loss_and_gradients,
    mlm_loss_and_gradients,
    save_params,
    score_encodings,
)
from .train import (
    TrainConfig,
    gradient_check,
    init_for_finetune,
    masked_accuracy,
    pretrain_masked,
    relative_error,
    train,
)

__all__ = [
    "AttentionTrace", "Batch", "EncoderConfig", "EncoderParams", "InputEncoding",
    "NumericError", "SpecialIds", "TrainConfig", "encode_pair", "encode_single",
    "encoder_keys", "forward", "gradient_check", "init_for_finetune", "init_params",
    "load_params", "loss_and_gradients", "masked_accuracy", "mlm_loss_and_gradients",
    "pretrain_masked", "relative_error", "save_params", "score_encodings", "train",
]
