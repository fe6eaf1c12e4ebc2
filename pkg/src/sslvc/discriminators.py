"""Real/fake, conversion and embedding discriminators.

Each maps a variable-length sequence to one probability per item: strided
1-D convs over time, mean pooling, linear, sigmoid.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn

from .errors import ShapeError

# float32 sigmoid saturates to exactly 0/1; keep scores inside the open interval
PROB_EPS = 1e-6


@dataclasses.dataclass
class MelDiscriminatorConfig:
    n_mels: int = 80
    channels: tuple = (128, 256, 512, 512)
    kernel: int = 5
    stride: int = 2
    slope: float = 0.2


@dataclasses.dataclass
class EmbeddingDiscriminatorConfig:
    input_dim: int = 256
    channels: tuple = (256, 256, 256)
    kernel: int = 3
    slope: float = 0.2


def _conv_stack(in_ch, channels, kernel, stride, slope):
    layers = []
    for ch in channels:
        layers += [nn.Conv1d(in_ch, ch, kernel, stride=stride, padding=kernel // 2), nn.LeakyReLU(slope)]
        in_ch = ch
    return nn.Sequential(*layers), in_ch


class _SequenceDiscriminator(nn.Module):
    in_dim: int

    def logits(self, x):
        if x.dim() == 2:
            x = x[None]
        if x.dim() != 3 or x.shape[-1] != self.in_dim or x.shape[1] < 1:
            raise ShapeError(f"expected [B, T, {self.in_dim}], got {tuple(x.shape)}")
        h = self.convs(x.transpose(1, 2)).mean(dim=-1)
        return self.out(h).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).clamp(PROB_EPS, 1.0 - PROB_EPS)


class MelDiscriminator(_SequenceDiscriminator):
    """Used twice with separate weights: real/fake and conversion."""

    def __init__(self, cfg: MelDiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or MelDiscriminatorConfig()
        self.in_dim = self.cfg.n_mels
        self.convs, width = _conv_stack(self.cfg.n_mels, self.cfg.channels, self.cfg.kernel,
                                        self.cfg.stride, self.cfg.slope)
        self.out = nn.Linear(width, 1)


class EmbeddingDiscriminator(_SequenceDiscriminator):
    def __init__(self, cfg: EmbeddingDiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or EmbeddingDiscriminatorConfig()
        self.in_dim = self.cfg.input_dim
        self.convs, width = _conv_stack(self.cfg.input_dim, self.cfg.channels, self.cfg.kernel, 1, self.cfg.slope)
        self.out = nn.Linear(width, 1)


class DiscriminatorGroup(nn.Module):
    def __init__(self, mel_cfg: MelDiscriminatorConfig | None = None,
                 emb_cfg: EmbeddingDiscriminatorConfig | None = None):
        super().__init__()
        self.real_fake = MelDiscriminator(mel_cfg)
        self.conversion = MelDiscriminator(mel_cfg)
        self.embedding = EmbeddingDiscriminator(emb_cfg)

    def score_real_fake(self, mel):
        return self.real_fake(mel)

    def score_conversion(self, mel):
        return self.conversion(mel)

    def score_embedding(self, embedding):
        return self.embedding(embedding)
