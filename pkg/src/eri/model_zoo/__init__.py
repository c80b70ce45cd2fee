from .architectures import (
    ARCHITECTURES,
    BackboneSpec,
    LstmConfig,
    Model,
    ModelConfig,
    TransformerConfig,
    backbone_forward,
    check_params,
    cnn_lstm_forward,
    cnn_transformer_forward,
    forward,
    gradcheck_config,
    init_params,
    micro_config,
    paper_config,
    param_gradients,
    param_registry,
    spatial_embed_and_pool,
)
from .bundle import load_model, read_bundle, save_model, write_bundle
from .layers import positional_encoding

__all__ = [
    "ARCHITECTURES",
    "BackboneSpec",
    "LstmConfig",
    "Model",
    "ModelConfig",
    "TransformerConfig",
    "backbone_forward",
    "check_params",
    "cnn_lstm_forward",
    "cnn_transformer_forward",
    "forward",
    "gradcheck_config",
    "init_params",
    "load_model",
    "micro_config",
    "paper_config",
    "param_gradients",
    "param_registry",
    "positional_encoding",
    "read_bundle",
    "save_model",
    "spatial_embed_and_pool",
    "write_bundle",
]
