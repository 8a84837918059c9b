"""
Training: chunk enumeration, random batch sampling with hop-size
augmentation, weighted binary cross-entropy, and the epoch loop with
validation-based model selection.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .audio_io import AudioClip, BeatAnnotation, load_wav, parse_annotation, \
    resample
from .dbn import ActivationMatrix, DBNConfig, decode
from .frontend import (FrontendConfig, TargetMatrix, augment_hop,
                       build_targets,
                       harmonic_filterbank, stft_magnitude)
from .inference import clip_features, predict_activations, save_model
from .metrics import MetricConfig, evaluate_pair
from .model_fusion import SpecTNTTCN
from .nn_core import Adam, ShapeMismatch

logger = logging.getLogger(__name__)


class EmptyIndex(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    steps_per_epoch: int = 500
    lr: float = 0.001
    weight_decay: float = 0.0
    max_epochs: int = 100
    seed: int = 0
    # loss weight per output channel (beat, downbeat, non-beat)
    channel_weights: tuple = (1.0, 1.0, 1.0)
    augment: bool = True
    hop_scale_std: float = 0.05
    validation_cap: int = 20
    chunk_seconds: float = None     # defaults to the model's input length

    def __post_init__(self):
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be >= 1")
        self.channel_weights = tuple(float(w) for w in self.channel_weights)


@dataclass
class Song:
    song_id: str
    clip: AudioClip
    annotation: BeatAnnotation

    @property
    def duration(self):
        return self.clip.duration


@dataclass
class ChunkIndex:
    chunks: list            # (song_id, start_second)
    chunk_seconds: float

    def __len__(self):
        return len(self.chunks)


def load_songs(entries, fcfg: FrontendConfig):
    songs = []
    for entry in entries:
        clip = load_wav(entry.audio_path)
        if clip.sample_rate != fcfg.sample_rate:
            clip = resample(clip, fcfg.sample_rate)
        song_id = os.path.splitext(os.path.basename(entry.audio_path))[0]
        songs.append(Song(song_id, clip, parse_annotation(entry.annotation_path)))
    return songs


def build_chunk_index(durations, chunk_seconds) -> ChunkIndex:
    """
    All chunk starts on a 1 s grid that fit inside their song.

    `durations` maps song id to duration in seconds (a list of
    :class:`Song` works too). Songs shorter than one chunk are skipped
    with a warning.
    """
    if not isinstance(durations, dict):
        durations = {s.song_id: s.duration for s in durations}
    chunks = []
    for song_id, duration in durations.items():
        n = int(math.floor(duration - chunk_seconds + 1e-9)) + 1
        if n < 1:
            logger.warning("song %s (%.2f s) shorter than a %.1f s chunk, "
                           "skipped", song_id, duration, chunk_seconds)
            continue
        chunks.extend((song_id, float(start)) for start in range(n))
    return ChunkIndex(chunks, chunk_seconds)


def chunk_example(song: Song, start, n_frames, fcfg: FrontendConfig, hop):
    """Features ``[n_frames, n_bands]`` and targets for one chunk.

    Frame ``k`` is centred on ``start + k * hop / sample_rate``; audio
    beyond the song is zero.
    """
    sr = fcfg.sample_rate
    half = fcfg.window_length // 2
    first = int(round(start * sr)) - half
    length = (n_frames - 1) * hop + fcfg.window_length
    seg = np.zeros(length)
    lo, hi = max(first, 0), min(first + length, len(song.clip))
    if hi > lo:
        seg[lo - first:hi - first] = song.clip.samples[lo:hi]
    rep = harmonic_filterbank(stft_magnitude(seg, fcfg, hop), fcfg, hop)
    ann = song.annotation
    frames = np.rint((ann.times - start) * rep.frame_rate)
    keep = (frames >= 0) & (frames < n_frames)
    sub = BeatAnnotation(ann.times[keep], ann.positions[keep])
    targets = build_targets(sub, n_frames, rep.frame_rate, offset=start)
    return rep.values, targets


def sample_batch(index: ChunkIndex, songs, rng, batch_size, n_frames,
                 fcfg: FrontendConfig, augment=True, hop_scale_std=0.05):
    """
    Draw `batch_size` chunks uniformly with replacement.

    Returns ``(features, labels, weights, picks)`` with float32 arrays of
    shape ``[B, n_frames, ...]`` and the drawn ``(song_id, start)`` pairs.
    """
    if len(index) == 0:
        raise EmptyIndex("chunk index is empty")
    by_id = songs if isinstance(songs, dict) else {s.song_id: s for s in songs}
    picks = [index.chunks[i] for i in rng.integers(len(index), size=batch_size)]
    feats, labels, weights = [], [], []
    for song_id, start in picks:
        hop = (augment_hop(fcfg.base_hop, rng, hop_scale_std) if augment
               else fcfg.base_hop)
        x, tgt = chunk_example(by_id[song_id], start, n_frames, fcfg, hop)
        feats.append(x)
        labels.append(tgt.labels)
        weights.append(tgt.weights)
    as32 = lambda a: np.stack(a).astype(np.float32)
    return as32(feats), as32(labels), as32(weights), picks


def weighted_bce(logits, labels, weights, channel_weights=None):
    """Mean of ``w * BCE(sigmoid(z), y)`` over frames and channels."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    if logits.shape != labels.shape or labels.shape != weights.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)}, labels "
                            f"{tuple(labels.shape)}, weights "
                            f"{tuple(weights.shape)}")
    if channel_weights is not None:
        weights = weights * torch.as_tensor(channel_weights,
                                            dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels, weight=weights)


def fusion_loss(labels, weights, logits_a, logits_b, channel_weights=None):
    """Sum of the two branch losses; returns ``(total, (loss_a, loss_b))``."""
    la = weighted_bce(logits_a, labels, weights, channel_weights)
    lb = weighted_bce(logits_b, labels, weights, channel_weights)
    return la + lb, (la, lb)


def model_loss(model, x, labels, weights, channel_weights=None):
    if isinstance(model, SpecTNTTCN):
        _, la, lb = model(x, check=False)
        return fusion_loss(labels, weights, la, lb, channel_weights)[0]
    return weighted_bce(model(x, check=False), labels, weights,
                        channel_weights)


def framewise_f1(probs, targets, threshold=0.5):
    """DBN-free proxy: F1 of thresholded frames against full-weight targets."""
    pred = probs >= threshold
    true = (targets.labels == 1) & (targets.weights == 1)
    tp = np.sum(pred & true)
    denom = np.sum(pred) + np.sum(true)
    return 1.0 if denom == 0 else 2.0 * tp / denom


def validate(model, songs, fcfg, dbn_cfg=None, metric_cfg=None, cap=20):
    """
    Validation metrics without touching gradients.

    Framewise proxy F1 on all songs, DBN-decoded beat and downbeat F1 on
    the first `cap` songs.
    """
    dbn_cfg = dbn_cfg or DBNConfig()
    metric_cfg = metric_cfg or MetricConfig()
    proxy_beat, proxy_down, beat_f1, down_f1 = [], [], [], []
    with torch.no_grad():
        for i, song in enumerate(songs):
            rep = clip_features(song.clip, fcfg)
            probs = predict_activations(model, rep.values)
            tgt = build_targets(song.annotation, rep.n_frames, rep.frame_rate)
            proxy_beat.append(framewise_f1(probs[:, 0], _channel(tgt, 0)))
            proxy_down.append(framewise_f1(probs[:, 1], _channel(tgt, 1)))
            if i >= cap:
                continue
            est = decode(ActivationMatrix(np.clip(probs, 0, 1),
                                          rep.frame_rate), dbn_cfg)
            ref = song.annotation
            beat_f1.append(evaluate_pair(est.beats, ref.beats, metric_cfg).f1)
            down_f1.append(evaluate_pair(est.downbeats, ref.downbeats,
                                         metric_cfg).f1)
    mean = lambda v: float(np.mean(v)) if v else float("nan")
    return {"proxy_beat_f1": mean(proxy_beat),
            "proxy_downbeat_f1": mean(proxy_down),
            "beat_f1": mean(beat_f1), "downbeat_f1": mean(down_f1)}


def _channel(tgt, c):
    return TargetMatrix(tgt.labels[:, c], tgt.weights[:, c])


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    best_state: dict = None


def train(model, train_songs, valid_songs, cfg: TrainConfig,
          fcfg: FrontendConfig = None, dbn_cfg=None, metric_cfg=None,
          out_dir=None, epochs=None, on_epoch=None):
    """
    Train `model` and keep the epoch with the best validation score.

    The selection score is the mean of decoded beat F1 and downbeat F1.
    After training the model holds the best weights. With `out_dir`, the
    best and last checkpoints and ``train_log.jsonl`` are written there.
    `on_epoch` receives every log record.
    """
    fcfg = fcfg or FrontendConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_frames = model.input_frames
    chunk_seconds = cfg.chunk_seconds or n_frames / fcfg.frame_rate
    index = build_chunk_index(train_songs, chunk_seconds)
    by_id = {s.song_id: s for s in train_songs}
    opt = Adam(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult()
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        open(log_path, "w").close()
    for epoch in range(epochs if epochs is not None else cfg.max_epochs):
        model.train()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            x, y, w, picks = sample_batch(index, by_id, rng, cfg.batch_size,
                                          n_frames, fcfg, cfg.augment,
                                          cfg.hop_scale_std)
            loss = model_loss(model, torch.from_numpy(x), y, w,
                              cfg.channel_weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, "
                    f"step {len(losses)}; chunks {picks[:4]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        scores = validate(model, valid_songs, fcfg, dbn_cfg, metric_cfg,
                          cfg.validation_cap)
        score = 0.5 * (scores["beat_f1"] + scores["downbeat_f1"])
        selected = bool(score > result.best_score)
        if selected:
            result.best_score = score
            result.best_epoch = epoch
            result.best_state = copy.deepcopy(model.state_dict())
        record = {"epoch": epoch, "loss": float(np.mean(losses)),
                  "beat_f1": scores["beat_f1"],
                  "downbeat_f1": scores["downbeat_f1"],
                  "proxy_beat_f1": scores["proxy_beat_f1"],
                  "proxy_downbeat_f1": scores["proxy_downbeat_f1"],
                  "selected": selected}
        result.history.append(record)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            save_model(os.path.join(out_dir, "last"), model, fcfg,
                       {"epoch": epoch})
            if selected:
                save_model(os.path.join(out_dir, "best"), model, fcfg,
                           {"epoch": epoch, "score": score})
        if on_epoch:
            on_epoch(record)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result
