"""
Harmonic time-frequency front-end and frame-level training targets.

The representation is a Hann-windowed STFT magnitude passed through a
bank of log-spaced triangular filters and compressed with ``ln(1 + x)``.

"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from scipy.signal import get_window

from .audio_io import AudioClip, BeatAnnotation

N_CHANNELS = 3
BEAT, DOWNBEAT, NON_BEAT = 0, 1, 2
NEIGHBOUR_WEIGHT = 0.5
HOP_SCALE_LIMITS = (0.8, 1.2)


class TooShort(ValueError):
    pass


class EventOutOfRange(ValueError):
    pass


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    window_length: int = 1024
    base_hop: int = 320
    n_bands: int = 128
    fmin: float = 30.0
    fmax: float = 8000.0
    hop_scale_std: float = 0.05
    trainable_filters: bool = False

    def __post_init__(self):
        if self.window_length < self.base_hop:
            raise ValueError("window_length must be >= base_hop")
        if not 0 < self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 < fmin < fmax <= sample_rate / 2")
        if self.n_bands < 2:
            raise ValueError("n_bands must be >= 2")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.base_hop

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1


@dataclass
class HarmonicRepresentation:
    values: np.ndarray          # [n_frames, n_bands]
    frame_rate: float
    effective_hop: int

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def n_bands(self):
        return self.values.shape[1]


@dataclass
class TargetMatrix:
    labels: np.ndarray          # [n_frames, 3]: beat, downbeat, non-beat
    weights: np.ndarray         # [n_frames, 3]


def n_frames_for(n_samples, window_length, hop):
    if n_samples < window_length:
        return 0
    return 1 + (n_samples - window_length) // hop


def stft_magnitude(clip, cfg: FrontendConfig, hop=None) -> np.ndarray:
    """Magnitude STFT, shape ``[n_frames, window_length // 2 + 1]``."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    hop = cfg.base_hop if hop is None else int(hop)
    n = n_frames_for(len(samples), cfg.window_length, hop)
    if n < 1:
        raise TooShort(f"need at least {cfg.window_length} samples, "
                       f"got {len(samples)}")
    frames = np.lib.stride_tricks.sliding_window_view(
        samples, cfg.window_length)[::hop][:n]
    window = get_window("hann", cfg.window_length)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def band_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Log-spaced corner/centre frequencies, ``n_bands + 2`` of them."""
    return np.geomspace(cfg.fmin, cfg.fmax, cfg.n_bands + 2)


def filterbank(cfg: FrontendConfig) -> np.ndarray:
    """
    Triangular filterbank of shape ``[n_bins, n_bands]``.

    Band ``k`` rises from ``f[k]`` to a unit peak at ``f[k+1]`` and falls
    to zero at ``f[k+2]``, so neighbouring bands overlap by half. Slopes
    are never narrower than one FFT bin; otherwise low bands would fall
    between bins and go silent.
    """
    f = band_frequencies(cfg)
    bin_hz = cfg.sample_rate / cfg.window_length
    freqs = np.arange(cfg.n_bins) * bin_hz
    lo, centre, hi = f[:-2], f[1:-1], f[2:]
    rise = np.maximum(centre - lo, bin_hz)
    fall = np.maximum(hi - centre, bin_hz)
    d = freqs[:, None] - centre[None, :]
    w = np.where(d < 0, 1 + d / rise, 1 - d / fall)
    return np.clip(w, 0.0, None)


def harmonic_filterbank(spec: np.ndarray, cfg: FrontendConfig,
                        hop=None) -> HarmonicRepresentation:
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} spectrum columns, "
                         f"got shape {spec.shape}")
    hop = cfg.base_hop if hop is None else int(hop)
    values = np.log1p(spec @ filterbank(cfg))
    return HarmonicRepresentation(values, cfg.sample_rate / hop, hop)


def harmonic_representation(clip: AudioClip, cfg: FrontendConfig, hop=None,
                            center=True, n_frames=None):
    """
    Full front-end: STFT, filterbank, log compression.

    With ``center`` the signal is zero padded by half a window on both
    sides, so frame ``k`` is centred on sample ``k * hop`` and its time
    stamp is ``k / frame_rate``. `n_frames` truncates or zero pads the
    signal to give exactly that many frames.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip at {clip.sample_rate} Hz, front-end expects "
                         f"{cfg.sample_rate} Hz")
    hop = cfg.base_hop if hop is None else int(hop)
    x = clip.samples
    if center:
        half = cfg.window_length // 2
        x = np.pad(x, (half, half))
    if n_frames is not None:
        need = (n_frames - 1) * hop + cfg.window_length
        x = x[:need] if len(x) >= need else np.pad(x, (0, need - len(x)))
    spec = stft_magnitude(x, cfg, hop)
    return harmonic_filterbank(spec, cfg, hop)


def draw_hop_scale(rng: np.random.Generator, std=0.05) -> float:
    """Hop-size scale factor ~ N(1, std), clamped to [0.8, 1.2]."""
    if std <= 0:
        return 1.0
    return float(np.clip(rng.normal(1.0, std), *HOP_SCALE_LIMITS))


def augment_hop(base_hop, rng, std=0.05) -> int:
    return int(round(base_hop * draw_hop_scale(rng, std)))


def build_targets(ann: BeatAnnotation, n_frames, frame_rate,
                  offset=0.0) -> TargetMatrix:
    """
    Frame-wise beat/downbeat/non-beat targets with widening.

    Each event marks its nearest frame positive with weight 1; the frames
    on either side are positive with weight 0.5 unless something stronger
    is already there. Events at bar position 0 are beats only. `offset` is
    the time of frame 0 in annotation time.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    labels = np.zeros((n_frames, N_CHANNELS))
    weights = np.ones((n_frames, N_CHANNELS))
    frames = np.rint((ann.times - offset) * frame_rate).astype(int)
    bad = (frames < 0) | (frames >= n_frames)
    if np.any(bad):
        raise EventOutOfRange(
            f"event at {ann.times[bad][0]:.3f} s maps outside {n_frames} frames")

    def widen(channel, idx):
        strength = np.zeros(n_frames)
        for centre in idx:
            strength[centre] = 1.0
            for nb in (centre - 1, centre + 1):
                if 0 <= nb < n_frames:
                    strength[nb] = max(strength[nb], NEIGHBOUR_WEIGHT)
        pos = strength > 0
        labels[pos, channel] = 1.0
        weights[pos, channel] = strength[pos]
        return strength

    beat = widen(BEAT, frames)
    widen(DOWNBEAT, frames[ann.positions == 1])
    labels[:, NON_BEAT] = (beat == 0).astype(float)
    weights[:, NON_BEAT] = np.where(beat > 0, beat, 1.0)
    return TargetMatrix(labels, weights)


class FilterbankLayer(torch.nn.Module):
    """
    Torch version of the filterbank for magnitude inputs ``[..., n_bins]``.

    With ``cfg.trainable_filters`` the weights become a learnable
    parameter (the learned harmonic front-end hook); otherwise they are a
    fixed buffer.
    """

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        weight = torch.as_tensor(filterbank(cfg), dtype=torch.float32)
        if cfg.trainable_filters:
            self.weight = torch.nn.Parameter(weight)
        else:
            self.register_buffer("weight", weight)

    def forward(self, spec):
        return torch.log1p(torch.relu(spec @ self.weight))


def write_representation(path, rep: HarmonicRepresentation):
    """Little-endian float32 row-major dump plus ``<path>.json`` sidecar."""
    np.ascontiguousarray(rep.values, dtype="<f4").tofile(path)
    meta = {"n_frames": int(rep.n_frames), "n_bands": int(rep.n_bands),
            "frame_rate": float(rep.frame_rate),
            "effective_hop": int(rep.effective_hop)}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh)


def read_representation(path) -> HarmonicRepresentation:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    values = np.fromfile(path, dtype="<f4").reshape(meta["n_frames"],
                                                    meta["n_bands"])
    return HarmonicRepresentation(values, meta["frame_rate"],
                                  meta.get("effective_hop", 0))
