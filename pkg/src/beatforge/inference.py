"""
Model construction, checkpoint round-trips and full-clip inference.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch

from .audio_io import AudioClip, resample
from .dbn import ActivationMatrix, DBNConfig, decode
from .frontend import FrontendConfig, harmonic_representation
from .model_fusion import FusionConfig, SpecTNTTCN
from .model_spectnt import SpecTNT, SpecTNTConfig
from .model_tcn import TCN, TCNConfig
from .nn_core import CheckpointError, load_state, read_checkpoint, \
    save_checkpoint

logger = logging.getLogger(__name__)

ARCHS = {
    "spectnt": (SpecTNT, SpecTNTConfig),
    "tcn": (TCN, TCNConfig),
    "fusion": (SpecTNTTCN, FusionConfig),
}


class ArchMismatch(CheckpointError):
    pass


def config_for(arch, overrides=None):
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose from {sorted(ARCHS)}")
    return ARCHS[arch][1](**(overrides or {}))


def build_model(arch, cfg=None):
    model_cls, cfg_cls = ARCHS[arch]
    if isinstance(cfg, dict):
        cfg = cfg_cls(**cfg)
    return model_cls(cfg or cfg_cls())


def save_model(path, model, frontend_cfg: FrontendConfig, extra=None):
    meta = {"arch": model.arch,
            "config": dataclasses.asdict(model.cfg),
            "frontend": dataclasses.asdict(frontend_cfg)}
    meta.update(extra or {})
    save_checkpoint(path, model, meta)


def load_model(path, arch=None):
    """Load ``(model, frontend_cfg, meta)``; `arch` must match if given."""
    meta, arrays = read_checkpoint(path)
    if "arch" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no arch")
    if arch is not None and meta["arch"] != arch:
        raise ArchMismatch(f"checkpoint holds {meta['arch']!r}, "
                           f"requested {arch!r}")
    model = build_model(meta["arch"], meta.get("config"))
    load_state(model, arrays)
    model.eval()
    fcfg = FrontendConfig(**meta.get("frontend", {}))
    return model, fcfg, meta


def window_starts(n_frames, window, hop):
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, hop))
    if starts[-1] != n_frames - window:
        starts.append(n_frames - window)
    return starts


def predict_activations(model, features, window=None, batch=8):
    """
    Sliding-window probabilities for a ``[T, n_bands]`` feature matrix.

    Windows have the model's input length and overlap by half; overlapping
    predictions are averaged. Inputs shorter than one window are zero
    padded (with a warning) and the padding is cut from the result.
    """
    features = np.asarray(features, dtype=np.float32)
    n_frames = features.shape[0]
    window = window or model.input_frames or n_frames
    if n_frames < window:
        logger.warning("input has %d frames, padding to the model's %d",
                       n_frames, window)
        features = np.pad(features, ((0, window - n_frames), (0, 0)))
    total = features.shape[0]
    starts = window_starts(total, window, max(1, window // 2))
    acc = np.zeros((total, 3))
    count = np.zeros((total, 1))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(starts), batch):
                group = starts[i:i + batch]
                x = torch.from_numpy(np.stack(
                    [features[s:s + window] for s in group]))
                probs = model.probabilities(x).double().numpy()
                for s, p in zip(group, probs):
                    acc[s:s + window] += p
                    count[s:s + window] += 1
    finally:
        model.train(was_training)
    return (acc / count)[:n_frames]


def clip_features(clip: AudioClip, fcfg: FrontendConfig):
    if clip.sample_rate != fcfg.sample_rate:
        clip = resample(clip, fcfg.sample_rate)
    return harmonic_representation(clip, fcfg)


def track(model, clip: AudioClip, fcfg: FrontendConfig, dbn_cfg=None):
    """Audio to beat/downbeat annotation; returns ``(annotation, acts)``."""
    rep = clip_features(clip, fcfg)
    probs = predict_activations(model, rep.values)
    act = ActivationMatrix(np.clip(probs, 0.0, 1.0), rep.frame_rate)
    return decode(act, dbn_cfg or DBNConfig()), act
