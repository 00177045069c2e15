from .config import KINDS, PRESETS, DecoderConfig, EncoderConfig, ModelConfig, preset
from .decoder import ArDecoder, ArOutput, CmlmDecoder, CmlmOutput, block_log_softmax, embed_block
from .encoder import (ConformerEncoder, EncoderOutput, FrontendError, IntermediatePrediction, Subsampler,
                      subsampled_length)
from .model import ArSluModel, Model, NarSluModel, build_model, load_model, save_model

__all__ = [
    "KINDS", "PRESETS", "ArDecoder", "ArOutput", "ArSluModel", "CmlmDecoder", "CmlmOutput", "ConformerEncoder",
    "DecoderConfig", "EncoderConfig", "EncoderOutput", "FrontendError", "IntermediatePrediction", "Model",
    "ModelConfig", "NarSluModel", "Subsampler", "block_log_softmax", "build_model", "embed_block", "load_model",
    "preset", "save_model", "subsampled_length",
]
