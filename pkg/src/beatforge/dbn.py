"""
Bar-pointer dynamic Bayesian network decoding of beat activations.

Hidden state: (beat interval in frames, meter, position in the bar in
frames). Every frame the position advances by one; when a beat ends the
next beat starts at position 0 of the following beat in the bar and the
interval may move to a neighbouring tempo with probability ``lambda``.
Beats are emitted on the first frame of every beat.

The most probable state sequence is found exactly with a log-space
Viterbi pass over the sparse transition structure.
:func:`brute_force_decode` solves the same problem with a dense transition
matrix built independently from the state definition and serves as a
test oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .audio_io import BeatAnnotation

LOG_FLOOR = 1e-12


class TooShort(ValueError):
    pass


class DegenerateActivationsWarning(UserWarning):
    """Activations carry no beat evidence; the output grid is prior-driven."""


@dataclass
class ActivationMatrix:
    values: np.ndarray      # [T, 3]: beat, downbeat, non-beat probabilities
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 3:
            raise ValueError("activations must be [T, 3]")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("activations must lie in [0, 1]")

    @property
    def beat(self):
        return self.values[:, 0]

    @property
    def downbeat(self):
        return self.values[:, 1]

    def __len__(self):
        return self.values.shape[0]


@dataclass
class DBNConfig:
    min_bpm: float = 55.0
    max_bpm: float = 215.0
    n_tempi: int = None
    tempo_change_prob: float = 0.002
    meters: tuple = (3, 4)
    observation_weight: float = 1.0 / 16

    def __post_init__(self):
        if not 0 < self.min_bpm < self.max_bpm:
            raise ValueError("need 0 < min_bpm < max_bpm")
        if not 0 < self.tempo_change_prob < 1:
            raise ValueError("tempo_change_prob must lie in (0, 1)")
        self.meters = tuple(sorted(int(m) for m in self.meters))
        if not self.meters or self.meters[0] < 1:
            raise ValueError("meters must be positive")
        if not 0 < self.observation_weight <= 1:
            raise ValueError("observation_weight must lie in (0, 1]")

    def intervals(self, frame_rate):
        """Beat intervals in frames, ascending."""
        lo = math.ceil(60.0 * frame_rate / self.max_bpm - 1e-9)
        hi = math.floor(60.0 * frame_rate / self.min_bpm + 1e-9)
        lo = max(lo, 1)
        if hi < lo:
            raise ValueError("tempo range contains no integer beat interval "
                             f"at {frame_rate} fps")
        ivals = np.arange(lo, hi + 1)
        if self.n_tempi is not None and self.n_tempi < len(ivals):
            ivals = np.unique(np.round(
                np.geomspace(lo, hi, self.n_tempi)).astype(int))
        return [int(i) for i in ivals]


@dataclass
class StatePath:
    frames_per_beat: np.ndarray
    meter: np.ndarray
    position: np.ndarray    # frames since the start of the bar

    @property
    def beat_in_bar(self):
        """1-based beat counter within the bar."""
        return self.position // self.frames_per_beat + 1

    @property
    def bar_phase(self):
        return self.position / (self.frames_per_beat * self.meter)

    @property
    def beat_starts(self):
        return np.flatnonzero(self.position % self.frames_per_beat == 0)

    def states(self):
        return list(zip(self.frames_per_beat.tolist(), self.meter.tolist(),
                        self.position.tolist()))


class StateSpace:
    """
    Flattened state arrays in canonical order: slowest tempo first, then
    meter, then position. Ties anywhere in decoding resolve to the lowest
    index in this order.
    """

    def __init__(self, intervals, meters):
        taus, ms, pos = [], [], []
        for tau in sorted(intervals, reverse=True):
            for m in meters:
                n = m * tau
                taus.append(np.full(n, tau))
                ms.append(np.full(n, m))
                pos.append(np.arange(n))
        self.tau = np.concatenate(taus)
        self.meter = np.concatenate(ms)
        self.position = np.concatenate(pos)
        self.intervals = sorted(intervals)
        self.meters = tuple(meters)
        self.offsets = {}
        start = 0
        for tau in sorted(intervals, reverse=True):
            for m in meters:
                self.offsets[tau, m] = start
                start += m * tau

    def __len__(self):
        return len(self.tau)

    def index(self, tau, meter, position):
        return self.offsets[tau, meter] + position


def tempo_transition_logp(intervals, lam):
    """``{(from, to): log p}`` for tempo moves at a beat boundary."""
    out = {}
    ivals = sorted(intervals)
    for i, tau in enumerate(ivals):
        nbrs = [ivals[j] for j in (i - 1, i + 1) if 0 <= j < len(ivals)]
        if not nbrs:
            out[tau, tau] = 0.0
            continue
        out[tau, tau] = math.log(1.0 - lam)
        for nb in nbrs:
            out[tau, nb] = math.log(lam / len(nbrs))
    return out


def emission_logs(act: ActivationMatrix, cfg: DBNConfig):
    """Per-frame log densities of (downbeat, beat, non-beat) states."""
    beat = act.beat
    lam = 1.0 / cfg.observation_weight
    down = np.log(np.maximum(act.downbeat, LOG_FLOOR))
    on = np.log(np.maximum(beat, LOG_FLOOR))
    off = np.log(np.maximum((1.0 - beat) / max(lam - 1.0, 1.0), LOG_FLOOR))
    return np.stack([down, on, off], axis=1)


def state_categories(space: StateSpace, cfg: DBNConfig):
    """0 = downbeat window, 1 = other beat window, 2 = between beats."""
    within = space.position % space.tau
    window = within < space.tau * cfg.observation_weight
    first = space.position < space.tau
    return np.where(window, np.where(first, 0, 1), 2)


def _predecessors(space: StateSpace, cfg: DBNConfig):
    n = len(space)
    trans = tempo_transition_logp(space.intervals, cfg.tempo_change_prob)
    width = 3
    pred = np.zeros((n, width), dtype=np.int64)
    logp = np.full((n, width), -np.inf)
    within = space.position % space.tau
    inner = within > 0
    pred[inner, 0] = np.flatnonzero(inner) - 1
    logp[inner, 0] = 0.0
    for s in np.flatnonzero(~inner):
        tau, m = space.tau[s], space.meter[s]
        prev_beat = (space.position[s] // tau - 1) % m
        cands = []
        for src in space.intervals:
            if (src, tau) in trans:
                idx = space.index(src, m, prev_beat * src + src - 1)
                cands.append((idx, trans[src, tau]))
        cands.sort()
        for j, (idx, lp) in enumerate(cands):
            pred[s, j] = idx
            logp[s, j] = lp
    return pred, logp


def _check_input(act, cfg):
    if len(act) < 1:
        raise TooShort("empty activation matrix")
    min_ival = cfg.intervals(act.frame_rate)[0]
    if len(act) < min_ival:
        raise TooShort(f"{len(act)} frames is shorter than one beat "
                       f"({min_ival} frames) at the fastest tempo")


def viterbi(act: ActivationMatrix, cfg: DBNConfig = None):
    """Return the MAP :class:`StatePath` and its log probability."""
    cfg = cfg or DBNConfig()
    _check_input(act, cfg)
    space = StateSpace(cfg.intervals(act.frame_rate), cfg.meters)
    pred, logp = _predecessors(space, cfg)
    cat = state_categories(space, cfg)
    em = emission_logs(act, cfg)
    n, t_max = len(space), len(act)
    rows = np.arange(n)
    delta = np.full(n, -math.log(n)) + em[0][cat]
    back = np.zeros((t_max, n), dtype=np.uint8)
    for t in range(1, t_max):
        cand = delta[pred] + logp
        choice = np.argmax(cand, axis=1)
        delta = cand[rows, choice] + em[t][cat]
        back[t] = choice
    state = int(np.argmax(delta))
    score = float(delta[state])
    path = np.empty(t_max, dtype=np.int64)
    path[-1] = state
    for t in range(t_max - 1, 0, -1):
        state = int(pred[state, back[t, state]])
        path[t - 1] = state
    return (StatePath(space.tau[path], space.meter[path],
                      space.position[path]), score)


def path_to_annotation(path: StatePath, frame_rate) -> BeatAnnotation:
    frames = path.beat_starts
    return BeatAnnotation(frames / frame_rate, path.beat_in_bar[frames])


def decode(act: ActivationMatrix, cfg: DBNConfig = None) -> BeatAnnotation:
    """
    Decode beat and downbeat times from frame activations.

    All-zero beat and downbeat activations still decode (to a grid chosen
    by the prior alone) but raise a :class:`DegenerateActivationsWarning`.
    """
    cfg = cfg or DBNConfig()
    _check_input(act, cfg)
    if not np.any(act.values[:, :2] > 0):
        warnings.warn("activations are all zero; decoded grid reflects only "
                      "the prior", DegenerateActivationsWarning, stacklevel=2)
    path, _ = viterbi(act, cfg)
    return path_to_annotation(path, act.frame_rate)


# oracle

def _successors(state, intervals, lam):
    """Successors of ``(tau, meter, position)`` with log probabilities."""
    tau, m, pos = state
    if (pos + 1) % tau:
        return [((tau, m, pos + 1), 0.0)]
    nxt = (pos // tau + 1) % m
    ivals = sorted(intervals)
    i = ivals.index(tau)
    nbrs = [ivals[j] for j in (i - 1, i + 1) if 0 <= j < len(ivals)]
    if not nbrs:
        return [((tau, m, nxt * tau), 0.0)]
    out = [((tau, m, nxt * tau), math.log(1.0 - lam))]
    for nb in nbrs:
        out.append(((nb, m, nxt * nb), math.log(lam / len(nbrs))))
    return out


def _state_log_emission(state, beat, downbeat, cfg):
    tau, m, pos = state
    if pos % tau < tau * cfg.observation_weight:
        value = downbeat if pos < tau else beat
    else:
        value = (1.0 - beat) / max(1.0 / cfg.observation_weight - 1.0, 1.0)
    return math.log(max(value, LOG_FLOOR))


def brute_force_decode(act: ActivationMatrix, cfg: DBNConfig = None,
                       max_work=10 ** 9):
    """
    Exhaustive dense-matrix Viterbi; returns ``(StatePath, log score)``.

    Every state pair is scored (impossible moves at ``-inf``), so nothing
    of the sparse structure used by :func:`viterbi` is assumed. Only meant
    for small state spaces.
    """
    cfg = cfg or DBNConfig()
    _check_input(act, cfg)
    intervals = cfg.intervals(act.frame_rate)
    states = sorted(((tau, m, p) for tau in intervals for m in cfg.meters
                     for p in range(m * tau)),
                    key=lambda s: (-s[0], s[1], s[2]))
    n = len(states)
    if n * n * len(act) > max_work:
        raise ValueError(f"{n} states x {len(act)} frames is too large")
    where = {s: i for i, s in enumerate(states)}
    trans = np.full((n, n), -np.inf)
    for i, s in enumerate(states):
        for nxt, lp in _successors(s, intervals, cfg.tempo_change_prob):
            trans[i, where[nxt]] = lp
    em = np.array([[_state_log_emission(s, b, d, cfg) for s in states]
                   for b, d in zip(act.beat, act.downbeat)])
    delta = np.full(n, -math.log(n)) + em[0]
    back = np.zeros((len(act), n), dtype=np.int64)
    for t in range(1, len(act)):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(n)] + em[t]
    i = int(np.argmax(delta))
    score = float(delta[i])
    idx = [i]
    for t in range(len(act) - 1, 0, -1):
        i = int(back[t, i])
        idx.append(i)
    seq = [states[i] for i in reversed(idx)]
    tau, m, pos = (np.array(x) for x in zip(*seq))
    return StatePath(tau, m, pos), score


def path_log_score(states, act: ActivationMatrix, cfg: DBNConfig = None):
    """Log probability of an explicit state sequence (``-inf`` if invalid)."""
    cfg = cfg or DBNConfig()
    intervals = cfg.intervals(act.frame_rate)
    n = sum(m * tau for tau in intervals for m in cfg.meters)
    states = [tuple(int(v) for v in s) for s in states]
    score = -math.log(n)
    for t, s in enumerate(states):
        if t > 0:
            moves = dict(_successors(states[t - 1], intervals,
                                     cfg.tempo_change_prob))
            if s not in moves:
                return -math.inf
            score += moves[s]
        score += _state_log_emission(s, act.beat[t], act.downbeat[t], cfg)
    return score


def random_path(act_len, cfg: DBNConfig, frame_rate, rng):
    """Sample a valid state sequence from the transition prior."""
    intervals = cfg.intervals(frame_rate)
    tau = int(rng.choice(intervals))
    m = int(rng.choice(cfg.meters))
    state = (tau, m, int(rng.integers(m * tau)))
    out = [state]
    for _ in range(act_len - 1):
        succ = _successors(state, intervals, cfg.tempo_change_prob)
        probs = np.exp([lp for _, lp in succ])
        state = succ[int(rng.choice(len(succ), p=probs / probs.sum()))][0]
        out.append(state)
    return out
