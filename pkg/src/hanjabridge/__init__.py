"""Hanja-candidate augmentation, restricted attention, masked LM loss, and
queue-based contrastive distillation on a tiny transformer, with rollout and
probe analysis harnesses."""

__version__ = "0.1.0"

from .augment import AugmentConfig, AugmentedSequence, ExpansionGroup, augment, build_attention_mask, strip
from .distill import AlignmentMap, DistillConfig, InstanceQueue, align, kd_loss, sim_distribution
from .lexicon import HanjaCandidate, Lexicon, LexiconEntry, homophony_stats, load_lexicon, save_lexicon
from .model import LossConfig, ModelConfig, TinyLM, init_model, lm_loss
from .tokenizer import Encoding, Vocab, build_vocab, decode, encode, expand_vocab

__all__ = [
    "AugmentConfig", "AugmentedSequence", "ExpansionGroup", "augment", "build_attention_mask", "strip",
    "AlignmentMap", "DistillConfig", "InstanceQueue", "align", "kd_loss", "sim_distribution",
    "HanjaCandidate", "Lexicon", "LexiconEntry", "homophony_stats", "load_lexicon", "save_lexicon",
    "LossConfig", "ModelConfig", "TinyLM", "init_model", "lm_loss",
    "Encoding", "Vocab", "build_vocab", "decode", "encode", "expand_vocab",
    "__version__",
]
