"""Auxiliary phoneme/tone classifiers on the encoder output and decoder-RNN input.

The heads exist only for training. They are saved under the ``mt.`` prefix
of a checkpoint and conversion never touches them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .model import ModelConfig, dropout


@dataclass
class LossWeights:
    phoneme: float = 0.1
    tone: float = 0.05

    def __post_init__(self):
        if self.phoneme < 0 or self.tone < 0:
            raise ValueError("loss weights must be >= 0")


class ClassifierHead(nn.Module):
    """Dropout followed by two separate linear projections (phoneme, tone)."""

    def __init__(self, in_dim: int, num_phonemes: int, num_tones: int, p: float = 0.5):
        super().__init__()
        self.p = p
        self.phoneme = nn.Linear(in_dim, num_phonemes)
        self.tone = nn.Linear(in_dim, num_tones)

    def forward(self, hidden: Tensor, generator: Optional[torch.Generator] = None):
        h = dropout(hidden, self.p, generator)
        return self.phoneme(h), self.tone(h)


class AuxiliaryClassifiers(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        args = (config.num_phonemes, config.num_tones, config.classifier_dropout)
        self.encoder_head = ClassifierHead(config.encoder_dim, *args)
        self.decoder_head = ClassifierHead(config.tap_dim, *args)


def classify(hidden: Tensor, head: ClassifierHead, training: bool,
             generator: Optional[torch.Generator] = None) -> tuple[Tensor, Tensor]:
    """Phoneme and tone logits; dropout only when ``training`` (softmax lives in the loss)."""
    if training and generator is None:
        generator = torch.default_generator
    return head(hidden, generator if training else None)


def masked_cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``-log softmax(logits)[t, target_t]`` over frames where ``mask`` is true."""
    mask = mask.bool()
    if not bool(mask.any()):
        raise ValueError("empty mask")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return nll[mask].sum() / mask.sum()


def total_loss(mel_loss, stop_loss, enc_ph, enc_tone, dec_ph, dec_tone, w: LossWeights):
    return mel_loss + stop_loss + w.phoneme * (enc_ph + dec_ph) + w.tone * (enc_tone + dec_tone)


def masked_accuracy(logits: Tensor, targets: Tensor, mask: Tensor) -> float:
    mask = mask.bool()
    hits = (logits.argmax(-1) == targets) & mask
    return float(hits.sum()) / max(int(mask.sum()), 1)
