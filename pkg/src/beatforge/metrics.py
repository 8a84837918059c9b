"""
Beat tracking evaluation: F-measure, CMLt, AMLt.

Continuity scoring
------------------
A reference beat ``a[j]`` with inter-annotation interval ``D`` (distance
to the previous annotation, or to the next one for ``j = 0``) counts as
correctly tracked when, with ``b[m]`` the estimate nearest to it,

* ``|b[m] - a[j]| <= phase_tol * D``,
* the neighbouring estimate (``b[m-1]``, or ``b[m+1]`` for ``j = 0``)
  lies within ``phase_tol * D`` of the neighbouring annotation, and
* the estimated inter-beat interval is within ``period_tol * D`` of ``D``.

CMLt is the fraction of correctly tracked reference beats. AMLt is the
best CMLt over metrical variations of the reference: original, double,
half (both phases), triple, third (all three phases) and off-beat.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .audio_io import parse_annotation

logger = logging.getLogger(__name__)

ANNOTATION_SUFFIXES = (".beats", ".txt")


class InsufficientReference(ValueError):
    pass


class MissingPair(Exception):
    pass


@dataclass
class MetricConfig:
    f_measure_tolerance: float = 0.070
    continuity_phase_tol: float = 0.175
    continuity_period_tol: float = 0.175
    min_beat_time: float = 5.0

    def __post_init__(self):
        if min(self.f_measure_tolerance, self.continuity_phase_tol,
               self.continuity_period_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class EvalReport:
    f1: float
    cmlt: float
    amlt: float

    @property
    def aml_cml_gap(self):
        return self.amlt - self.cmlt

    def as_dict(self):
        return {**asdict(self), "aml_cml_gap": self.aml_cml_gap}


def trim(times, min_time):
    times = np.asarray(times, dtype=float)
    return times[times >= min_time]


def match_count(est, ref, tol):
    """Size of the one-to-one matching of sorted lists within ``tol``.

    Two-pointer sweep: the earlier of the two heads is discarded unless
    both heads are within tolerance, in which case they are paired. On a
    line this greedy pairing is also a maximum matching.
    """
    i = j = hits = 0
    while i < len(est) and j < len(ref):
        if abs(est[i] - ref[j]) <= tol:
            hits += 1
            i += 1
            j += 1
        elif est[i] < ref[j]:
            i += 1
        else:
            j += 1
    return hits


def f_measure(est, ref, tol=0.070):
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if len(est) == 0 and len(ref) == 0:
        return 1.0
    if len(est) == 0 or len(ref) == 0:
        return 0.0
    tp = match_count(est, ref, tol)
    return 2.0 * tp / (len(est) + len(ref))


def _intervals(ref):
    d = np.diff(ref)
    return np.concatenate([d[:1], d])


def continuity_correct(est, ref, phase_tol=0.175, period_tol=0.175):
    """Boolean per reference beat: tracked with phase and period intact."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    ok = np.zeros(len(ref), dtype=bool)
    if len(est) < 2 or len(ref) < 2:
        return ok
    iai = _intervals(ref)
    # nearest estimate per reference beat, ties to the earlier one
    right = np.clip(np.searchsorted(est, ref), 1, len(est) - 1)
    left = right - 1
    m = np.where(np.abs(est[left] - ref) <= np.abs(est[right] - ref),
                 left, right)
    phase = np.abs(est[m] - ref) <= phase_tol * iai
    # j >= 1 looks back, j = 0 looks forward
    step = np.where(np.arange(len(ref)) == 0, 1, -1)
    nb_est = m + step
    valid = (nb_est >= 0) & (nb_est < len(est))
    nb_est = np.clip(nb_est, 0, len(est) - 1)
    nb_ref = np.arange(len(ref)) + step
    nb_phase = np.abs(est[nb_est] - ref[nb_ref]) <= phase_tol * iai
    period = np.abs(np.abs(est[m] - est[nb_est]) - iai) <= period_tol * iai
    return valid & phase & nb_phase & period


def reference_variations(ref):
    """Named metrical variations of a reference beat sequence."""
    ref = np.asarray(ref, dtype=float)
    mids = ref[:-1] + np.diff(ref) / 2
    thirds1 = ref[:-1] + np.diff(ref) / 3
    thirds2 = ref[:-1] + 2 * np.diff(ref) / 3
    double = np.sort(np.concatenate([ref, mids]))
    triple = np.sort(np.concatenate([ref, thirds1, thirds2]))
    return {
        "original": ref,
        "double": double,
        "half_odd": ref[0::2],
        "half_even": ref[1::2],
        "triple": triple,
        "third_1": ref[0::3],
        "third_2": ref[1::3],
        "third_3": ref[2::3],
        "offbeat": mids,
    }


def continuity_scores(est, ref, phase_tol=0.175, period_tol=0.175):
    """Return ``(cmlt, amlt)``."""
    ref = np.asarray(ref, dtype=float)
    if len(ref) < 2:
        raise InsufficientReference("need at least 2 reference beats")
    scores = {}
    for name, var in reference_variations(ref).items():
        if len(var) < 2:
            continue
        scores[name] = float(np.mean(
            continuity_correct(est, var, phase_tol, period_tol)))
    return scores["original"], max(scores.values())


def evaluate_pair(est, ref, cfg: MetricConfig = None) -> EvalReport:
    """Score one estimate against one reference after the skip-in."""
    cfg = cfg or MetricConfig()
    est = trim(est, cfg.min_beat_time)
    ref = trim(ref, cfg.min_beat_time)
    f1 = f_measure(est, ref, cfg.f_measure_tolerance)
    if len(ref) < 2:
        cmlt = amlt = f1
    else:
        cmlt, amlt = continuity_scores(est, ref, cfg.continuity_phase_tol,
                                       cfg.continuity_period_tol)
    return EvalReport(f1, cmlt, amlt)


def mean_report(reports):
    if not reports:
        return EvalReport(float("nan"), float("nan"), float("nan"))
    return EvalReport(*(float(np.mean([getattr(r, k) for r in reports]))
                        for k in ("f1", "cmlt", "amlt")))


def _annotation_files(directory):
    out = {}
    for path in sorted(Path(directory).iterdir()):
        if path.suffix in ANNOTATION_SUFFIXES and path.is_file():
            out.setdefault(path.stem, path)
    return out


def evaluate_dataset(est_dir, ref_dir, cfg: MetricConfig = None, jobs=1):
    """
    Evaluate every reference file that has an estimate with the same stem.

    Returns a dict with per-file and mean (unweighted) reports for beats and
    downbeats, plus the list of references without a matching estimate.
    Downbeats are scored only for references that carry bar positions.
    """
    cfg = cfg or MetricConfig()
    refs = _annotation_files(ref_dir)
    ests = _annotation_files(est_dir)
    missing = sorted(set(refs) - set(ests))
    for stem in missing:
        logger.warning("no estimate for %s, skipped", stem)
    stems = sorted(set(refs) & set(ests))

    def one(stem):
        ref = parse_annotation(refs[stem])
        est = parse_annotation(ests[stem])
        beat = evaluate_pair(est.beats, ref.beats, cfg)
        down = None
        if ref.has_bar_positions:
            down = evaluate_pair(est.downbeats, ref.downbeats, cfg)
        return stem, beat, down

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(one, stems))
    else:
        rows = [one(s) for s in stems]
    files = {stem: {"beat": b.as_dict(),
                    "downbeat": d.as_dict() if d else None}
             for stem, b, d in rows}
    beat_mean = mean_report([b for _, b, _ in rows])
    down_rows = [d for _, _, d in rows if d is not None]
    return {
        "files": files,
        "beat": beat_mean.as_dict(),
        "downbeat": mean_report(down_rows).as_dict() if down_rows else None,
        "n_files": len(rows),
        "missing": missing,
    }


def format_table(result):
    """Aligned text table with F1 / CMLt / AMLt / gap columns."""
    header = f"{'':<10}{'F1':>8}{'CMLt':>8}{'AMLt':>8}{'gap':>8}"
    lines = [header]
    for kind in ("beat", "downbeat"):
        rep = result.get(kind)
        if rep is None:
            continue
        lines.append(f"{kind:<10}{rep['f1']:>8.3f}{rep['cmlt']:>8.3f}"
                     f"{rep['amlt']:>8.3f}{rep['aml_cml_gap']:>8.3f}")
    return "\n".join(lines)


def write_report(path, result):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)
