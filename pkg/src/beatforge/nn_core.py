"""
Neural-network primitives shared by the three models.

Tensors and reverse-mode differentiation come from PyTorch. This module
adds the functional ops in the layouts the models use, attention that
keeps its maps for export, the pre-activation residual unit, an Adam
optimiser with decoupled weight decay, parameter counting, the checkpoint
format and a finite-difference gradient checker.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ShapeMismatch(ValueError):
    pass


class CheckpointError(Exception):
    pass


# functional ops

def linear(x, weight, bias=None):
    """Affine map over the last axis; `weight` is ``[d_in, d_out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"input dim {x.shape[-1]} != weight rows "
                            f"{weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


def conv1d(x, weight, bias=None, dilation=1):
    """
    'Same'-padded dilated convolution over time.

    `x` is ``[C_in, T]`` or ``[B, C_in, T]``, `weight` is
    ``[C_out, C_in, k]`` with odd ``k``.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ValueError("conv1d needs an odd kernel size for same padding")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"{x.shape[1]} input channels, kernel expects "
                            f"{weight.shape[1]}")
    y = F.conv1d(x, weight, bias, padding=dilation * (k - 1) // 2,
                 dilation=dilation)
    return y.squeeze(0) if squeeze else y


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    Cross-correlation over ``[C_in, F, T]`` (or batched) inputs.

    Output size per axis is ``floor((n + 2 * pad - k) / stride) + 1``.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"{x.shape[1]} input channels, kernel expects "
                            f"{weight.shape[1]}")
    y = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return y.squeeze(0) if squeeze else y


def conv_output_size(n, k, stride=1, padding=0):
    return (n + 2 * padding - k) // stride + 1


def max_pool_freq(x, pool, ceil=True):
    """Non-overlapping max-pool over the frequency axis (dim -2).

    A ragged last window is padded with -inf, i.e. output size is
    ``ceil(F / pool)``; ``ceil=False`` drops it instead.
    """
    if pool == 1:
        return x
    return F.max_pool2d(x, kernel_size=(pool, 1), stride=(pool, 1),
                        ceil_mode=ceil)


def layer_norm(x, gamma, beta, eps=1e-5):
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def sigmoid(x):
    return torch.sigmoid(x)


def relu(x):
    return torch.relu(x)


def gelu(x):
    return F.gelu(x)


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


def scaled_dot_attention(q, k, v):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    attn = torch.softmax(scores, dim=-1)
    return attn @ v, attn


def multi_head_attention(q, k, v, n_heads, w_q, w_k, w_v, w_o,
                         b_q=None, b_k=None, b_v=None, b_o=None):
    """
    Multi-head self/cross attention on ``[..., T, d]`` inputs.

    Projection weights are ``[d, d]``. Returns the output and the
    attention maps ``[..., n_heads, T_q, T_k]``.
    """
    d = q.shape[-1]
    if d % n_heads:
        raise ShapeMismatch(f"d={d} not divisible by {n_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch("query/key/value shapes disagree")

    def split(x):
        x = x.reshape(*x.shape[:-1], n_heads, d // n_heads)
        return x.transpose(-3, -2)

    qh = split(linear(q, w_q, b_q))
    kh = split(linear(k, w_k, b_k))
    vh = split(linear(v, w_v, b_v))
    out, attn = scaled_dot_attention(qh, kh, vh)
    out = out.transpose(-3, -2).reshape(*q.shape[:-1], d)
    return linear(out, w_o, b_o), attn


# modules

class MultiHeadAttention(nn.Module):
    """Self-attention block that can keep its last attention maps."""

    def __init__(self, dim, n_heads, dropout=0.0):
        super().__init__()
        if dim % n_heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        self.w_o = nn.Parameter(torch.empty(dim, dim))
        self.b_q = nn.Parameter(torch.zeros(dim))
        self.b_k = nn.Parameter(torch.zeros(dim))
        self.b_v = nn.Parameter(torch.zeros(dim))
        self.b_o = nn.Parameter(torch.zeros(dim))
        self.dropout = nn.Dropout(dropout)
        self.keep_attention = False
        self.last_attention = None
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(w)

    def forward(self, x):
        out, attn = multi_head_attention(
            x, x, x, self.n_heads, self.w_q, self.w_k, self.w_v, self.w_o,
            self.b_q, self.b_k, self.b_v, self.b_o)
        if self.keep_attention:
            self.last_attention = attn.detach()
        return self.dropout(out)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(self.dropout(gelu(self.fc1(x)))))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer over the second-to-last axis."""

    def __init__(self, dim, n_heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ResidualUnit(nn.Module):
    """
    Pre-activation residual unit: BN-ReLU-conv3x3-BN-ReLU-conv3x3 + skip.

    Input and output are ``[B, C, F, T]``. `freq_stride` downsamples the
    frequency axis in the first convolution; time is never strided. The
    skip gets a 1x1 projection when the channel count changes and is
    otherwise subsampled along frequency to match.
    """

    def __init__(self, in_channels, out_channels, kernel=3, freq_stride=1):
        super().__init__()
        pad = kernel // 2
        self.freq_stride = freq_stride
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel,
                               stride=(freq_stride, 1), padding=pad,
                               bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel,
                               padding=pad, bias=False)
        self.proj = None
        if in_channels != out_channels:
            self.proj = nn.Conv2d(in_channels, out_channels, 1,
                                  stride=(freq_stride, 1), bias=False)

    def forward(self, x):
        h = self.conv1(relu(self.bn1(x)))
        h = self.conv2(relu(self.bn2(h)))
        if self.proj is not None:
            skip = self.proj(x)
        else:
            skip = x[:, :, ::self.freq_stride]
        return skip + h


def sinusoidal_positions(n, dim, dtype=torch.float32, device=None):
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, :dim // 2])
    return pe.to(dtype)


# optimisation

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState):
    """
    One Adam update, in place, on ``(name, tensor)`` pairs with ``.grad``.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` is applied
    before the moment-based step.
    """
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params:
            if p.grad is None:
                continue
            g = p.grad
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            if state.weight_decay:
                p.mul_(1 - state.lr * state.weight_decay)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


class Adam:
    """Thin optimiser wrapper around :func:`adam_step` for a module."""

    def __init__(self, model: nn.Module, lr=0.001, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay)

    def zero_grad(self):
        self.model.zero_grad(set_to_none=True)

    def step(self):
        adam_step([(n, p) for n, p in self.model.named_parameters()
                   if p.requires_grad], self.state)


def param_count(model: nn.Module) -> int:
    seen = set()
    total = 0
    for p in model.parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        total += p.numel()
    return total


# checkpoints

INDEX_NAME = "index.json"
BLOB_NAME = "weights.f32"


def save_checkpoint(path, model: nn.Module, meta=None):
    """
    Write ``<path>/index.json`` and ``<path>/weights.f32``.

    Every state entry (parameters and buffers) is stored as little-endian
    float32 at a byte offset given in the index. The directory is written
    next to its destination and renamed into place.
    """
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    entries, offset = [], 0
    with open(os.path.join(tmp, BLOB_NAME), "wb") as fh:
        for name, tensor in model.state_dict().items():
            # asarray keeps 0-d buffers 0-d; ascontiguousarray would not
            arr = np.asarray(tensor.detach().cpu().numpy()).astype("<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset})
            offset += arr.nbytes
    index = {"meta": meta or {}, "tensors": entries}
    with open(os.path.join(tmp, INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    if os.path.isdir(path):
        old = path + ".old"
        os.rename(path, old)
        os.rename(tmp, path)
        for name in os.listdir(old):
            os.remove(os.path.join(old, name))
        os.rmdir(old)
    else:
        os.rename(tmp, path)


def read_checkpoint(path):
    """Return ``(meta, {name: float32 array})``."""
    try:
        with open(os.path.join(path, INDEX_NAME), "r", encoding="utf-8") as fh:
            index = json.load(fh)
        blob = np.fromfile(os.path.join(path, BLOB_NAME), dtype="<f4")
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays = {}
    for entry in index["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"] // 4
        if start + n > blob.size:
            raise CheckpointError(f"{path}: blob too short for {entry['name']}")
        arrays[entry["name"]] = blob[start:start + n].reshape(entry["shape"])
    return index.get("meta", {}), arrays


def load_state(model: nn.Module, arrays):
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    new = {}
    for name, ref in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != "
                                  f"{tuple(ref.shape)}")
        new[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(new)


# verification

def finite_difference_check(fn, inputs, n_probes=20, h=1e-5, rng=None,
                            atol=1e-8):
    """
    Compare autograd gradients of scalar ``fn(*inputs)`` with central
    differences at randomly chosen input entries.

    Inputs should be float64 leaf tensors with ``requires_grad``. Returns
    the largest relative error ``|g - fd| / max(|g|, |fd|, atol)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    out.backward()
    grads = [x.grad.detach().clone() for x in inputs]
    sizes = np.array([x.numel() for x in inputs])
    worst = 0.0
    for _ in range(n_probes):
        which = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        x = inputs[which]
        j = int(rng.integers(x.numel()))
        flat = x.data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = fn(*inputs).item()
            flat[j] = orig - h
            down = fn(*inputs).item()
            flat[j] = orig
        fd = (up - down) / (2 * h)
        g = grads[which].view(-1)[j].item()
        err = abs(g - fd) / max(abs(g), abs(fd), atol)
        worst = max(worst, err)
    return worst
