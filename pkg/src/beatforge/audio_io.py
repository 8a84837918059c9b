"""
Audio and annotation input/output.

Covers WAV loading, windowed-sinc resampling, the whitespace separated
``.beats`` annotation format, dataset manifests and a click-track
synthesiser used to build test corpora.

"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)

RESAMPLE_TAPS = 32
SPLITS = ("train", "valid", "test")


class AudioError(Exception):
    """Base class for audio loading problems."""


class UnsupportedFormat(AudioError):
    pass


class CorruptFile(AudioError):
    pass


class AnnotationError(Exception):
    pass


class ParseError(AnnotationError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class NonMonotonicTimes(AnnotationError):
    pass


class ManifestError(Exception):
    pass


@dataclass
class AudioClip:
    """Mono PCM samples in [-1, 1] and their sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class BeatAnnotation:
    """
    Beat events as parallel arrays of times [s] and bar positions.

    Bar position 1 marks a downbeat, 2..meter the other beats of a bar and
    0 a beat whose position inside the bar is unknown.

    """

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.positions is None:
            self.positions = np.zeros(len(self.times), dtype=int)
        self.positions = np.asarray(self.positions, dtype=int).reshape(-1)
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions differ in length")
        if np.any(self.times < 0):
            raise ValueError("event times must be non-negative")
        if np.any(self.positions < 0):
            raise ValueError("bar positions must be >= 0")
        if np.any(np.diff(self.times) <= 0):
            raise NonMonotonicTimes("event times must be strictly increasing")

    @classmethod
    def from_events(cls, events):
        events = list(events)
        if not events:
            return cls()
        times, positions = zip(*events)
        return cls(np.array(times, dtype=float), np.array(positions, dtype=int))

    @property
    def events(self):
        return [(float(t), int(p)) for t, p in zip(self.times, self.positions)]

    @property
    def beats(self) -> np.ndarray:
        return self.times.copy()

    @property
    def downbeats(self) -> np.ndarray:
        return self.times[self.positions == 1]

    @property
    def has_bar_positions(self) -> bool:
        return bool(np.any(self.positions > 0))

    def __len__(self):
        return len(self.times)


@dataclass
class ManifestEntry:
    audio_path: str
    annotation_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.split not in SPLITS:
                raise ManifestError(f"unknown split tag {entry.split!r}")
            if entry.audio_path in seen:
                raise ManifestError(f"duplicate audio path {entry.audio_path}")
            seen.add(entry.audio_path)

    def split(self, tag):
        return [e for e in self.entries if e.split == tag]

    def missing(self):
        """Entries whose audio or annotation file cannot be found."""
        return [e for e in self.entries
                if not (os.path.isfile(e.audio_path)
                        and os.path.isfile(e.annotation_path))]


# audio

def load_wav(path) -> AudioClip:
    """
    Load a PCM WAV file as a mono clip.

    16-bit and 32-bit integer PCM are scaled by 2**15 and 2**31, float
    files are taken as is. Multi-channel audio is averaged to mono.

    """
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise UnsupportedFormat(f"{path} is not a RIFF/WAVE file")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc).lower()
        if "unknown wave file format" in msg or "not supported" in msg:
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        raise CorruptFile(f"{path}: {exc}") from exc
    except Exception as exc:  # scipy raises a zoo of errors on truncation
        raise CorruptFile(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise CorruptFile(f"{path} contains no samples")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, subtype="PCM_16"):
    """Write a mono clip as 16-bit PCM (default) or 32-bit float WAV."""
    samples = np.clip(clip.samples, -1.0, 1.0)
    if subtype == "PCM_16":
        data = np.round(samples * 32767.0).astype(np.int16)
    elif subtype == "FLOAT":
        data = samples.astype(np.float32)
    else:
        raise ValueError(f"unknown subtype {subtype}")
    wavfile.write(path, clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """
    Resample with a 32-tap Hann-windowed sinc interpolator.

    The output has ``round(len * target_rate / sample_rate)`` samples. When
    downsampling the sinc cutoff is lowered to the new Nyquist frequency.

    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = target_rate / clip.sample_rate
    n_out = int(round(len(clip) * ratio))
    cutoff = min(1.0, ratio)
    half = RESAMPLE_TAPS // 2
    # position of every output sample on the input sample grid
    pos = np.arange(n_out) / ratio
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    dist = pos[:, None] - idx
    window = 0.5 + 0.5 * np.cos(np.pi * dist / half)
    kernel = cutoff * np.sinc(cutoff * dist) * window
    valid = (idx >= 0) & (idx < len(clip))
    taps = np.where(valid, clip.samples[np.clip(idx, 0, len(clip) - 1)], 0.0)
    out = np.sum(taps * kernel, axis=1)
    return AudioClip(out, target_rate)


# annotations

def parse_annotation(path) -> BeatAnnotation:
    """
    Read a ``.beats`` file with lines ``time [bar_position]``.

    Blank lines and ``#`` comments are ignored. A missing bar position
    means the position is unknown (stored as 0).

    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_annotation_text(text)


def parse_annotation_text(text: str) -> BeatAnnotation:
    times, positions = [], []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ParseError(line_no, f"expected 1 or 2 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            pos = int(float(parts[1])) if len(parts) == 2 else 0
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from exc
        if not np.isfinite(t) or t < 0:
            raise ParseError(line_no, f"invalid time {parts[0]}")
        if pos < 0:
            raise ParseError(line_no, f"invalid bar position {parts[1]}")
        if times and t <= times[-1]:
            raise NonMonotonicTimes(
                f"line {line_no}: time {t} does not follow {times[-1]}")
        times.append(t)
        positions.append(pos)
    return BeatAnnotation(np.array(times, dtype=float),
                          np.array(positions, dtype=int))


def serialize_annotation(ann: BeatAnnotation) -> str:
    lines = []
    for t, p in zip(ann.times, ann.positions):
        lines.append(f"{t:.6f}\t{p:d}" if p > 0 else f"{t:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_annotation(path, ann: BeatAnnotation):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_annotation(ann))


# manifests

def load_manifest(path) -> DatasetManifest:
    """
    Load a manifest from JSON (list of objects, or ``{"entries": [...]}``)
    or from a text file with ``audio annotation split`` per line.

    Relative paths are resolved against the manifest's directory.

    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    rows = []
    stripped = text.lstrip()
    if stripped.startswith("[") or stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
        items = obj["entries"] if isinstance(obj, dict) else obj
        for item in items:
            try:
                rows.append((item["audio_path"], item["annotation_path"],
                             item.get("split", "train")))
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"{path}: bad entry {item!r}") from exc
    else:
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ManifestError(f"{path}:{line_no}: expected 2-3 fields")
            rows.append((parts[0], parts[1],
                         parts[2] if len(parts) == 3 else "train"))
    entries = [ManifestEntry(str(root / a), str(root / b), s)
               for a, b, s in rows]
    manifest = DatasetManifest(entries)
    for entry in manifest.missing():
        logger.warning("manifest entry not resolvable: %s", entry.audio_path)
    return manifest


def save_manifest(path, manifest: DatasetManifest):
    entries = [{"audio_path": e.audio_path,
                "annotation_path": e.annotation_path,
                "split": e.split} for e in manifest.entries]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"entries": entries}, fh, indent=2)


# synthetic corpora

def synth_clicks(tempo_bpm, meter, duration_s, sample_rate=16000,
                 rng=None, noise_level=0.0):
    """
    Synthesise a click track and its exact annotation.

    Each beat is an impulse followed by a decaying 1 kHz burst; downbeat
    clicks are 6 dB louder than the other beats. Beats start at 0 s.

    Parameters
    ----------
    tempo_bpm : float
        Tempo in [40, 300] beats per minute.
    meter : int
        Beats per bar (>= 1).
    duration_s : float
        Length of the clip in seconds.
    sample_rate : int, optional
        Sample rate of the clip.
    rng : numpy.random.Generator, optional
        Only needed when `noise_level` > 0.
    noise_level : float, optional
        Standard deviation of additive white noise.

    Returns
    -------
    clip : AudioClip
    annotation : BeatAnnotation

    """
    if not 40 <= tempo_bpm <= 300:
        raise ValueError("tempo_bpm must lie in [40, 300]")
    if meter < 1:
        raise ValueError("meter must be >= 1")
    n = int(round(duration_s * sample_rate))
    period = 60.0 / tempo_bpm
    n_beats = int(np.ceil(duration_s / period - 1e-9))
    times = np.round(np.arange(n_beats) * period, 9)
    times = times[times < duration_s]
    positions = np.arange(len(times)) % meter + 1

    click_len = int(0.05 * sample_rate)
    k = np.arange(click_len)
    click = np.exp(-k / (0.008 * sample_rate)) * np.sin(
        2 * np.pi * 1000.0 * k / sample_rate)
    click[0] = 1.0
    beat_gain = 0.25
    down_gain = beat_gain * 10 ** (6 / 20)

    samples = np.zeros(n)
    for t, pos in zip(times, positions):
        start = int(round(t * sample_rate))
        stop = min(n, start + click_len)
        gain = down_gain if pos == 1 else beat_gain
        samples[start:stop] += gain * click[:stop - start]
    if noise_level > 0:
        rng = np.random.default_rng() if rng is None else rng
        samples += noise_level * rng.standard_normal(n)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, sample_rate), BeatAnnotation(times, positions)
