"""
SpecTNT: ResNet front-end, stacked spectral/temporal transformer blocks
linked by per-frame frequency class tokens (FCTs), and a linear head.

Tensor layout inside the model is batch first. Spectral tokens are
``[B, T, F', d_s]``, FCTs are ``[B, T, d_t]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nn_core import (EncoderLayer, ResidualUnit, ShapeMismatch,
                      sinusoidal_positions)


class WrongDuration(ValueError):
    pass


class HeadOutOfRange(IndexError):
    pass


@dataclass
class SpecTNTConfig:
    n_bands: int = 128
    n_blocks: int = 5
    spectral_dim: int = 64
    spectral_heads: int = 4
    temporal_dim: int = 256
    temporal_heads: int = 8
    frontend_channels: int = 256
    frontend_units: int = 3
    # FFN width / model width; keeps the default model near 4.6M
    # parameters
    ffn_multiplier: float = 0.25
    dropout: float = 0.1
    input_seconds: float = 6.0
    frame_rate: float = 50.0
    output: str = "sigmoid"          # or "softmax"

    def __post_init__(self):
        if self.spectral_dim % self.spectral_heads:
            raise ValueError("spectral_dim must be divisible by spectral_heads")
        if self.temporal_dim % self.temporal_heads:
            raise ValueError("temporal_dim must be divisible by temporal_heads")
        if self.output not in ("sigmoid", "softmax"):
            raise ValueError("output must be 'sigmoid' or 'softmax'")

    @property
    def reduced_bands(self) -> int:
        f = self.n_bands
        for _ in range(self.frontend_units):
            f = (f + 1) // 2
        return f

    @property
    def input_frames(self):
        if self.input_seconds is None:
            return None
        return int(round(self.input_seconds * self.frame_rate))


def check_duration(n_frames, expected):
    if expected is not None and abs(n_frames - expected) > 1:
        raise WrongDuration(f"expected {expected} frames (+-1), "
                            f"got {n_frames}")


class ResNetFrontend(nn.Module):
    """Residual units halving frequency each time: ``[B,T,F] -> [B,C,F',T]``."""

    def __init__(self, cfg: SpecTNTConfig):
        super().__init__()
        units, c_in = [], 1
        for _ in range(cfg.frontend_units):
            units.append(ResidualUnit(c_in, cfg.frontend_channels,
                                      freq_stride=2))
            c_in = cfg.frontend_channels
        self.units = nn.Sequential(*units)

    def forward(self, x):
        if x.dim() != 3:
            raise ShapeMismatch("expected [B, T, F] input")
        return self.units(x.transpose(1, 2).unsqueeze(1))


class SpecTNTBlock(nn.Module):
    """
    One spectral encoder plus one temporal encoder.

    1. Each frame's FCT is projected to the spectral width, prepended to
       that frame's frequency tokens and frequency positions are added.
    2. The spectral encoder attends over the ``F' + 1`` tokens of each
       frame independently.
    3. The updated FCT slot is projected to the temporal width, added to
       the incoming FCT, given sinusoidal time positions, and the temporal
       encoder attends across frames.
    """

    def __init__(self, cfg: SpecTNTConfig):
        super().__init__()
        ds, dt = cfg.spectral_dim, cfg.temporal_dim
        self.fct_in = nn.Linear(dt, ds)
        self.spectral = EncoderLayer(ds, cfg.spectral_heads,
                                     max(1, int(ds * cfg.ffn_multiplier)),
                                     cfg.dropout)
        self.fct_out = nn.Linear(ds, dt)
        self.temporal = EncoderLayer(dt, cfg.temporal_heads,
                                     max(1, int(dt * cfg.ffn_multiplier)),
                                     cfg.dropout)

    def forward(self, x, fct, freq_pos):
        b, t, f, ds = x.shape
        if fct.shape[:2] != (b, t):
            raise ShapeMismatch(f"FCTs {tuple(fct.shape)} do not match "
                                f"tokens {tuple(x.shape)}")
        tokens = torch.cat([self.fct_in(fct).unsqueeze(2), x], dim=2)
        tokens = self.spectral(tokens + freq_pos[:f + 1])
        fct = fct + self.fct_out(tokens[:, :, 0])
        pos = sinusoidal_positions(t, fct.shape[-1], fct.dtype, fct.device)
        fct = self.temporal(fct + pos)
        return tokens[:, :, 1:], fct

    def set_keep_attention(self, flag):
        self.spectral.attn.keep_attention = flag
        self.temporal.attn.keep_attention = flag


class SpecTNT(nn.Module):
    """
    Full SpecTNT beat/downbeat model.

    ``forward`` maps a harmonic representation batch ``[B, T, n_bands]``
    to logits ``[B, T, 3]`` (beat, downbeat, non-beat).
    """

    arch = "spectnt"

    def __init__(self, cfg: SpecTNTConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or SpecTNTConfig()
        self.frontend = ResNetFrontend(cfg)
        self.token_proj = nn.Linear(cfg.frontend_channels, cfg.spectral_dim)
        self.freq_pos = nn.Parameter(
            0.02 * torch.randn(cfg.reduced_bands + 1, cfg.spectral_dim))
        self.fct_init = nn.Parameter(torch.zeros(cfg.temporal_dim))
        self.blocks = nn.ModuleList(SpecTNTBlock(cfg)
                                    for _ in range(cfg.n_blocks))
        self.head = nn.Linear(cfg.temporal_dim, 3)

    def embed(self, x):
        """Front-end and token projection: ``[B,T,F] -> [B,T,F',d_s]``."""
        h = self.frontend(x)                      # [B, C, F', T]
        tokens = self.token_proj(h.permute(0, 3, 2, 1))
        fct = self.fct_init.expand(x.shape[0], x.shape[1], -1)
        return tokens, fct

    def run_blocks(self, tokens, fct, blocks=None):
        for block in (self.blocks if blocks is None else blocks):
            tokens, fct = block(tokens, fct, self.freq_pos)
        return tokens, fct

    def forward(self, x, check=True):
        if check:
            check_duration(x.shape[1], self.cfg.input_frames)
        tokens, fct = self.embed(x)
        _, fct = self.run_blocks(tokens, fct)
        return self.head(fct)

    def probabilities(self, x):
        return logits_to_probabilities(self(x, check=False), self.cfg.output)

    @property
    def input_frames(self):
        return self.cfg.input_frames


def logits_to_probabilities(logits, output="sigmoid"):
    if output == "softmax":
        return torch.softmax(logits, dim=-1)
    return torch.sigmoid(logits)


def export_attention(model: SpecTNT, x, which="temporal", head_index=0,
                     batch_index=0):
    """
    Attention maps of the last SpecTNT block for one input.

    ``which="spectral"`` gives ``[T, F'+1]``: for every frame, how the FCT
    query distributes attention over the FCT and frequency tokens.
    ``which="temporal"`` gives the ``[T, T]`` self-attention map.
    """
    if which not in ("spectral", "temporal"):
        raise ValueError("which must be 'spectral' or 'temporal'")
    block = model.blocks[-1]
    n_heads = (model.cfg.spectral_heads if which == "spectral"
               else model.cfg.temporal_heads)
    if not 0 <= head_index < n_heads:
        raise HeadOutOfRange(f"head {head_index} outside 0..{n_heads - 1}")
    was_training = model.training
    model.eval()
    block.set_keep_attention(True)
    try:
        with torch.no_grad():
            model(x, check=False)
        if which == "spectral":
            attn = block.spectral.attn.last_attention  # [B, T, H, F'+1, F'+1]
            out = attn[batch_index, :, head_index, 0, :]
        else:
            attn = block.temporal.attn.last_attention  # [B, H, T, T]
            out = attn[batch_index, head_index]
    finally:
        block.set_keep_attention(False)
        model.train(was_training)
    return out.cpu().numpy()
