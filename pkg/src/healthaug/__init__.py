"""Health-acoustic audio augmentations, contrastive training and linear-probe evaluation."""

from .audio_io import Waveform, load_wav, save_wav
from .augment import (
    BEST_CHAIN,
    AugmentationChain,
    AugmentationSpec,
    ChainAugmenter,
    apply_chain,
    apply_spec,
)
from .contrastive import ContrastiveEncoder, TrainConfig, nt_xent_loss, select_checkpoint_ema, train
from .encoder import EncoderConfig, ReferenceEncoder
from .evalkit import EmbeddingMatrix, EvalReport, LinearProbe, auroc, composite_score, delong_ci
from .features import LogMelSpectrogram, Spectrogram, log_mel

__version__ = "0.1.0"

__all__ = [
    "BEST_CHAIN",
    "AugmentationChain",
    "AugmentationSpec",
    "ChainAugmenter",
    "ContrastiveEncoder",
    "EmbeddingMatrix",
    "EncoderConfig",
    "EvalReport",
    "LinearProbe",
    "LogMelSpectrogram",
    "ReferenceEncoder",
    "Spectrogram",
    "TrainConfig",
    "Waveform",
    "apply_chain",
    "apply_spec",
    "auroc",
    "composite_score",
    "delong_ci",
    "load_wav",
    "log_mel",
    "nt_xent_loss",
    "save_wav",
    "select_checkpoint_ema",
    "train",
]
