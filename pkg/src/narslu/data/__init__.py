from .batching import Batch, collate, make_batches, mask_targets
from .corpus import AnnotationError, Utterance, load_slurp_jsonl, read_jsonl, utterance_record, write_jsonl
from .features import read_features, write_features
from .synth import SynthConfig, SynthWorld, synth_generate
from .tokenize import BpePolicy, WordPolicy, detokenize, tokenize
from .vocab import JointVocabulary, build_vocab

__all__ = [
    "AnnotationError", "Batch", "BpePolicy", "JointVocabulary", "SynthConfig", "SynthWorld", "Utterance",
    "WordPolicy", "build_vocab", "collate", "detokenize", "load_slurp_jsonl", "make_batches",
    "mask_targets", "read_features", "read_jsonl", "synth_generate", "tokenize", "utterance_record",
    "write_features", "write_jsonl",
]
