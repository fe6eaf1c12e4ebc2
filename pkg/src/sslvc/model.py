"""Acoustic model: FFT-block content encoder with instance norm, transposed-conv
upsampler and FFT-block mel decoder."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclasses.dataclass
class GeneratorConfig:
    input_dim: int = 256
    hidden_dim: int = 256
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    attention_heads: int = 2
    conv_kernel: int = 9
    ffn_dim: int = 1024
    upsample_factor: int = 2
    n_mels: int = 80
    dropout: float = 0.1
    in_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.attention_heads:
            raise ConfigError("hidden_dim must be divisible by attention_heads")
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.ffn_dim, self.n_mels, self.conv_kernel) < 1:
            raise ConfigError("dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def count_parameters(cfg: GeneratorConfig) -> int:
    """Closed-form parameter count.

    input projection      D*H + H
    per FFT block         attention 4*(H*H + H), two layer norms 4*H,
                          conv1 H*F*k + F, conv2 F*H + H
    upsampler             H*H*2r + H
    mel projection        H*M + M
    """
    d, h, f, k, r, m = (cfg.input_dim, cfg.hidden_dim, cfg.ffn_dim, cfg.conv_kernel,
                        cfg.upsample_factor, cfg.n_mels)
    block = 4 * (h * h + h) + 4 * h + (h * f * k + f) + (f * h + h)
    return (d * h + h) + (cfg.encoder_blocks + cfg.decoder_blocks) * block + (h * h * 2 * r + h) + (h * m + m)


def sinusoid_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(dim, dtype=torch.float64, device=device)[None, :]
    angle = pos / torch.pow(10000.0, 2 * torch.div(i, 2, rounding_mode="floor") / dim)
    table = torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(dtype)


class FFTBlock(nn.Module):
    """Self-attention and conv feed-forward, each with residual + post layer norm."""

    def __init__(self, hidden, heads, ffn_dim, kernel, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv1 = nn.Conv1d(hidden, ffn_dim, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(ffn_dim, hidden, 1)
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)
        self.kernel = kernel

    def forward(self, x):
        a, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        h = F.relu(self.conv1(x.transpose(1, 2)))
        if self.kernel % 2 == 0:
            h = h[..., :x.shape[1]]
        h = self.conv2(h).transpose(1, 2)
        return self.norm2(x + self.dropout(h))


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise each channel over time; x is [B, T, C], no affine parameters."""
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class ContentEncoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.input_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.hidden_dim, cfg.attention_heads, cfg.ffn_dim, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.encoder_blocks))
        self.dropout = nn.Dropout(cfg.dropout)

    def pre_norm(self, features):
        x = self.input_proj(features)
        x = self.dropout(x + sinusoid_encoding(x.shape[1], x.shape[2], x.dtype, x.device))
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, features):
        return instance_norm(self.pre_norm(features), self.cfg.in_eps)


class MelDecoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        r = cfg.upsample_factor
        self.upsample = nn.ConvTranspose1d(cfg.hidden_dim, cfg.hidden_dim, kernel_size=2 * r, stride=r)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.hidden_dim, cfg.attention_heads, cfg.ffn_dim, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.decoder_blocks))
        self.dropout = nn.Dropout(cfg.dropout)
        self.mel_proj = nn.Linear(cfg.hidden_dim, cfg.n_mels)

    def forward(self, emb):
        r = self.cfg.upsample_factor
        t = emb.shape[1]
        # full output is (T + 1) * r long; keep the centred T * r frames
        x = self.upsample(emb.transpose(1, 2))[..., r // 2: r // 2 + t * r].transpose(1, 2)
        x = self.dropout(x + sinusoid_encoding(x.shape[1], x.shape[2], x.dtype, x.device))
        for block in self.blocks:
            x = block(x)
        return self.mel_proj(x)


class Generator(nn.Module):
    """SSL features [B, T_s, D] -> (mel [B, r*T_s, n_mels], content embedding [B, T_s, H])."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.encoder = ContentEncoder(self.cfg)
        self.decoder = MelDecoder(self.cfg)

    def _check(self, x, dim, what):
        if x.dim() != 3 or x.shape[-1] != dim or x.shape[1] < 1:
            raise ShapeError(f"{what} must be [B, T>=1, {dim}], got {tuple(x.shape)}")

    def encode(self, features):
        self._check(features, self.cfg.input_dim, "features")
        return self.encoder(features)

    def decode(self, embedding):
        self._check(embedding, self.cfg.hidden_dim, "embedding")
        return self.decoder(embedding)

    def forward(self, features):
        emb = self.encode(features)
        return self.decode(emb), emb

    @torch.no_grad()
    def convert(self, features) -> tuple:
        """Single-utterance inference on a [T_s, D] array; returns numpy (mel, embedding)."""
        x = torch.as_tensor(features, dtype=next(self.parameters()).dtype)[None]
        was_training = self.training
        self.eval()
        mel, emb = self(x)
        self.train(was_training)
        return mel[0].cpu().numpy(), emb[0].cpu().numpy()
