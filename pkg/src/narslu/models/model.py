"""Complete models: encoder + CMLM decoder (NAR) or encoder + causal decoder (AR)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..data.batching import Batch
from ..data.vocab import JointVocabulary
from ..numerics.checkpoint import load_checkpoint, save_checkpoint
from ..numerics.nn import Module
from ..numerics.tensor import Tensor
from .config import ModelConfig
from .decoder import ArDecoder, ArOutput, CmlmDecoder, CmlmOutput
from .encoder import ConformerEncoder, EncoderOutput, FeedbackHook


class NarSluModel(Module):
    """Mask-CTC / SC-Mask-CTC: Conformer encoder with CTC head plus CMLM decoder."""

    def __init__(self, config: ModelConfig, vocab: JointVocabulary, seed: int = 0):
        config.validate()
        if config.encoder.vocab_size != len(vocab):
            raise ValueError(f"config vocab size {config.encoder.vocab_size} != vocabulary {len(vocab)}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        self.encoder = ConformerEncoder(rng, config.encoder)
        self.decoder = CmlmDecoder(rng, config.decoder)

    @property
    def kind(self) -> str:
        return self.config.kind

    def encode(self, features, lengths, hook: Optional[FeedbackHook] = None, self_condition: bool = True,
               rng=None) -> EncoderOutput:
        return self.encoder(features, lengths, hook, self_condition, rng)

    def encode_batch(self, batch: Batch, **kw) -> EncoderOutput:
        return self.encode(Tensor(batch.features), batch.feature_lengths, **kw)

    def cmlm(self, ids, lengths, memory: Tensor, memory_lengths, rng=None) -> CmlmOutput:
        return self.decoder(ids, lengths, memory, memory_lengths, self.vocab, rng)


class ArSluModel(Module):
    """Joint CTC/attention baseline with a second (SLU) head on the causal decoder."""

    def __init__(self, config: ModelConfig, vocab: JointVocabulary, seed: int = 0):
        config.validate()
        if config.encoder.vocab_size != len(vocab):
            raise ValueError(f"config vocab size {config.encoder.vocab_size} != vocabulary {len(vocab)}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        self.encoder = ConformerEncoder(rng, config.encoder)
        self.decoder = ArDecoder(rng, config.decoder)
        # next-token candidates: ASR pieces or end of sentence
        self.asr_targets = np.concatenate([[vocab.eos], np.arange(vocab.asr_block.start, vocab.asr_block.stop)])

    @property
    def kind(self) -> str:
        return "ar"

    @property
    def sos(self) -> int:
        return self.vocab.eos  # shared start/end symbol

    def encode(self, features, lengths, rng=None, **_) -> EncoderOutput:
        return self.encoder(features, lengths, None, True, rng)

    def encode_batch(self, batch: Batch, **kw) -> EncoderOutput:
        return self.encode(Tensor(batch.features), batch.feature_lengths, **kw)

    def decode_parallel(self, ids, lengths, memory: Tensor, memory_lengths, rng=None) -> ArOutput:
        return self.decoder(ids, lengths, memory, memory_lengths, rng)


Model = Union[NarSluModel, ArSluModel]


def build_model(config: ModelConfig, vocab: JointVocabulary, seed: int = 0) -> Model:
    cls = ArSluModel if config.kind == "ar" else NarSluModel
    return cls(config, vocab, seed)


def save_model(path: Union[str, Path], model: Model, extra_arrays: Optional[dict] = None,
               meta: Optional[dict] = None) -> None:
    """Parameters (plus optional extra arrays, e.g. optimizer moments) with config and vocab in the header."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    header = {"model_config": model.config.to_dict(), "vocab": model.vocab.to_json()}
    header.update(meta or {})
    save_checkpoint(path, arrays, header)


def load_model(path: Union[str, Path]) -> tuple[Model, dict, dict]:
    """-> (model, extra arrays, header)."""
    arrays, header = load_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    vocab = JointVocabulary.from_json(header["vocab"])
    model = build_model(config, vocab)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return model, extra, header
