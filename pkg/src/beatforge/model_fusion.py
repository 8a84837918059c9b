"""
SpecTNT-TCN: shared SpecTNT front blocks feeding two parallel branches.

The 24 s input is cut into four 6 s chunks. The ResNet front-end and the
two shared SpecTNT blocks run chunk-locally. Branch A continues with three
more SpecTNT blocks per chunk and its own head; branch B runs the dilated
TCN stack over the re-joined FCT sequence (the full 24 s) with its own
head. The fused output is the mean of the two branches' probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .model_spectnt import (SpecTNT, SpecTNTConfig, WrongDuration,
                            check_duration)
from .model_tcn import TCNConfig, TCNStack
from .nn_core import ShapeMismatch


@dataclass
class FusionConfig:
    front_blocks: int = 2
    tail_blocks: int = 3
    chunk_seconds: float = 6.0
    n_chunks: int = 4
    input_seconds: float = 24.0
    frame_rate: float = 50.0
    spectnt: SpecTNTConfig = field(default_factory=SpecTNTConfig)
    tcn: TCNConfig = field(default_factory=TCNConfig)

    def __post_init__(self):
        if isinstance(self.spectnt, dict):
            self.spectnt = SpecTNTConfig(**self.spectnt)
        if isinstance(self.tcn, dict):
            self.tcn = TCNConfig(**self.tcn)
        if abs(self.chunk_seconds * self.n_chunks - self.input_seconds) > 1e-9:
            raise ValueError("chunk_seconds * n_chunks must equal input_seconds")

    @property
    def input_frames(self):
        return int(round(self.input_seconds * self.frame_rate))

    @property
    def chunk_frames(self):
        return int(round(self.chunk_seconds * self.frame_rate))


class SpecTNTTCN(nn.Module):
    """Fused model. ``forward`` returns ``(avg_probs, logits_a, logits_b)``."""

    arch = "fusion"

    def __init__(self, cfg: FusionConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        scfg = SpecTNTConfig(**{**vars(cfg.spectnt),
                                "n_blocks": cfg.front_blocks + cfg.tail_blocks})
        self.spectnt = SpecTNT(scfg)
        self.tcn_in = nn.Conv1d(scfg.temporal_dim, cfg.tcn.channels, 1)
        self.tcn = TCNStack(cfg.tcn)
        self.tcn_head = nn.Linear(cfg.tcn.channels, 3)

    @property
    def front(self):
        return self.spectnt.blocks[:self.cfg.front_blocks]

    @property
    def tail(self):
        return self.spectnt.blocks[self.cfg.front_blocks:]

    def to_chunks(self, x):
        b, t = x.shape[:2]
        n = self.cfg.n_chunks
        if t % n:
            raise ShapeMismatch(f"{t} frames do not split into {n} chunks")
        return x.reshape(b * n, t // n, *x.shape[2:])

    def from_chunks(self, x, batch):
        return x.reshape(batch, -1, *x.shape[2:])

    def shared(self, x):
        """Front-end plus shared blocks; returns chunked tokens and FCTs."""
        tokens, fct = self.spectnt.embed(self.to_chunks(x))
        return self.spectnt.run_blocks(tokens, fct, self.front)

    def branch_spectnt(self, tokens, fct, batch):
        _, fct = self.spectnt.run_blocks(tokens, fct, self.tail)
        return self.from_chunks(self.spectnt.head(fct), batch)

    def branch_tcn(self, fct, batch):
        seq = self.from_chunks(fct, batch).transpose(1, 2)
        h = self.tcn(self.tcn_in(seq))
        return self.tcn_head(h.transpose(1, 2))

    def forward(self, x, check=True):
        if check:
            check_duration(x.shape[1], self.cfg.input_frames)
        b, t = x.shape[:2]
        pad = (-t) % self.cfg.n_chunks
        if pad:
            x = F.pad(x, (0, 0, 0, pad))
        tokens, fct = self.shared(x)
        logits_a = self.branch_spectnt(tokens, fct, b)[:, :t]
        logits_b = self.branch_tcn(fct, b)[:, :t]
        avg = 0.5 * (torch.sigmoid(logits_a) + torch.sigmoid(logits_b))
        return avg, logits_a, logits_b

    def probabilities(self, x):
        return self(x, check=False)[0]

    @property
    def input_frames(self):
        return self.cfg.input_frames


__all__ = ["FusionConfig", "SpecTNTTCN", "WrongDuration"]
