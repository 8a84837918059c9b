"""
Temporal convolutional network baseline.

Front-end: three conv + ELU + frequency max-pool stages (time is 'same'
padded, frequency is 'valid', pools drop ragged edges) that collapse the
band axis to one. With the default 128 bands the frequency chain is::

    128 -conv3-> 126 -pool3-> 42 -conv20-> 23 -pool3-> 7 -conv3-> 5 -pool3-> 1

followed by 11 layers of paired dilated convolutions and a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nn_core import ShapeMismatch, max_pool_freq
from .model_spectnt import check_duration


@dataclass
class TCNConfig:
    n_bands: int = 128
    frontend_filters: int = 20
    # (freq, time) kernel per front-end stage
    frontend_kernels: list = field(
        default_factory=lambda: [(3, 3), (20, 3), (3, 3)])
    pool_sizes: list = field(default_factory=lambda: [3, 3, 3])
    n_layers: int = 11
    channels: int = 20
    kernel_t: int = 5
    dropout: float = 0.1
    input_seconds: float = 24.0
    frame_rate: float = 50.0

    def __post_init__(self):
        if self.n_layers < 1 or self.channels < 1:
            raise ValueError("n_layers and channels must be positive")
        if self.kernel_t % 2 == 0:
            raise ValueError("kernel_t must be odd")
        self.frontend_kernels = [tuple(k) for k in self.frontend_kernels]

    @property
    def input_frames(self):
        if self.input_seconds is None:
            return None
        return int(round(self.input_seconds * self.frame_rate))

    def frequency_chain(self):
        """Band count after every conv and pool of the front-end."""
        chain = [self.n_bands]
        f = self.n_bands
        for (kf, _), pool in zip(self.frontend_kernels, self.pool_sizes):
            f = f - kf + 1
            chain.append(f)
            f = f // pool
            chain.append(f)
        return chain


def receptive_field(cfg: TCNConfig) -> int:
    """
    Frames of input that can influence one output frame of the dilated
    stack. The two blocks of a layer run in parallel, so a layer widens
    the field by the reach of its wider branch, ``(k - 1) * 2 ** (i + 1)``.
    """
    return 1 + sum((cfg.kernel_t - 1) * 2 ** (i + 1)
                   for i in range(cfg.n_layers))


class TCNFrontend(nn.Module):
    def __init__(self, cfg: TCNConfig):
        super().__init__()
        chain = cfg.frequency_chain()
        if min(chain) < 1:
            raise ShapeMismatch(f"{cfg.n_bands} bands do not survive the "
                                f"front-end: {chain}")
        if chain[-1] != 1:
            raise ShapeMismatch(f"front-end leaves {chain[-1]} bands, "
                                f"expected 1: {chain}")
        self.convs = nn.ModuleList()
        c_in = 1
        for kf, kt in cfg.frontend_kernels:
            self.convs.append(nn.Conv2d(c_in, cfg.frontend_filters, (kf, kt),
                                        padding=(0, kt // 2)))
            c_in = cfg.frontend_filters
        self.pools = list(cfg.pool_sizes)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        """``[B, T, F] -> [B, C, T]``."""
        if x.dim() != 3:
            raise ShapeMismatch("expected [B, T, F] input")
        h = x.transpose(1, 2).unsqueeze(1)
        for conv, pool in zip(self.convs, self.pools):
            h = self.dropout(max_pool_freq(F.elu(conv(h)), pool, ceil=False))
        return h.squeeze(2)


class TCNLayer(nn.Module):
    """
    Two parallel dilated convolutions (dilation ``2**i`` and ``2**(i+1)``),
    each followed by ELU and dropout, concatenated, projected back to
    ``channels`` with a 1x1 convolution and added to a 1x1-projected
    residual.
    """

    def __init__(self, channels, kernel, index, dropout=0.0):
        super().__init__()
        self.dilations = (2 ** index, 2 ** (index + 1))
        self.branches = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, dilation=d,
                      padding=d * (kernel - 1) // 2)
            for d in self.dilations)
        self.dropout = nn.Dropout(dropout)
        self.merge = nn.Conv1d(2 * channels, channels, 1)
        self.residual = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        h = torch.cat([self.dropout(F.elu(conv(x))) for conv in self.branches],
                      dim=1)
        return self.residual(x) + self.merge(h)


class TCNStack(nn.Module):
    def __init__(self, cfg: TCNConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            TCNLayer(cfg.channels, cfg.kernel_t, i, cfg.dropout)
            for i in range(cfg.n_layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class TCN(nn.Module):
    """``[B, T, n_bands]`` harmonic input to ``[B, T, 3]`` logits."""

    arch = "tcn"

    def __init__(self, cfg: TCNConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or TCNConfig()
        self.frontend = TCNFrontend(cfg)
        self.input_proj = None
        if cfg.frontend_filters != cfg.channels:
            self.input_proj = nn.Conv1d(cfg.frontend_filters, cfg.channels, 1)
        self.stack = TCNStack(cfg)
        self.head = nn.Linear(cfg.channels, 3)

    def features(self, x):
        h = self.frontend(x)
        if self.input_proj is not None:
            h = self.input_proj(h)
        return self.stack(h)

    def forward(self, x, check=True):
        if check:
            check_duration(x.shape[1], self.cfg.input_frames)
        return self.head(self.features(x).transpose(1, 2))

    def probabilities(self, x):
        return torch.sigmoid(self(x, check=False))

    @property
    def input_frames(self):
        return self.cfg.input_frames
