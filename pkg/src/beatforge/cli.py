"""
Command-line entry point.

    beatforge track AUDIO... --arch A --checkpoint CKPT --out PATH
    beatforge train MANIFEST --arch A --out DIR [--set train.lr=0.001 ...]
    beatforge evaluate EST_DIR REF_DIR [--out report.json]
    beatforge export AUDIO --checkpoint CKPT --out PREFIX
                     (--activations | --attention spectral|temporal --head K)

``--set`` takes dotted ``section.key=value`` pairs; sections are
``model``, ``train``, ``frontend``, ``dbn`` and ``metric``. Values are
parsed as JSON where possible, otherwise kept as strings.

Exit codes: 0 ok, 2 usage, 3 data, 4 checkpoint. Verbosity comes from the
``BEATFORGE_LOG`` environment variable (a logging level name).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .audio_io import AnnotationError, AudioError, ManifestError, load_manifest, \
    load_wav, write_annotation
from .dbn import DBNConfig
from .frontend import FrontendConfig
from .inference import (ARCHS, build_model, clip_features, config_for,
                        load_model, predict_activations, track)
from .metrics import MetricConfig, evaluate_dataset, format_table, write_report
from .model_spectnt import HeadOutOfRange, SpecTNT, WrongDuration, \
    export_attention
from .nn_core import CheckpointError
from .training import EmptyIndex, TrainConfig, TrainingDiverged, load_songs, \
    train

logger = logging.getLogger("beatforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
SECTIONS = ("model", "train", "frontend", "dbn", "metric")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def parse_overrides(pairs):
    """``["train.lr=0.01", "model.tcn.channels=8"]`` to nested dicts per section."""
    out = {s: {} for s in SECTIONS}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 2 or parts[0] not in SECTIONS:
            raise UsageError(f"bad override {pair!r}; expected "
                             f"<{'|'.join(SECTIONS)}>.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out[parts[0]]
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, update: dict, where=""):
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(value, dict) and isinstance(base[key], dict):
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def apply_overrides(cfg, overrides: dict):
    """New dataclass instance of ``type(cfg)`` with `overrides` merged in."""
    if not overrides:
        return cfg
    merged = _merge(dataclasses.asdict(cfg), overrides)
    try:
        return type(cfg)(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {type(cfg).__name__}: {exc}") from exc


def _seed(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)


def _out_path(out, audio, many):
    if not many and out and not os.path.isdir(out):
        return Path(out)
    directory = Path(out or ".")
    directory.mkdir(parents=True, exist_ok=True)
    return directory / (Path(audio).stem + ".beats")


def cmd_track(args, ov):
    if not args.checkpoint:
        raise UsageError("track needs --checkpoint")
    model, fcfg, _ = load_model(args.checkpoint, args.arch)
    dbn_cfg = apply_overrides(DBNConfig(), ov["dbn"])
    many = len(args.audio) > 1

    def one(audio):
        clip = load_wav(audio)
        ann, _ = track(model, clip, fcfg, dbn_cfg)
        dest = _out_path(args.out, audio, many)
        write_annotation(dest, ann)
        logger.info("%s: %d beats -> %s", audio, len(ann.times), dest)
        return dest

    if args.jobs > 1 and many:
        with ThreadPoolExecutor(args.jobs) as pool:
            list(pool.map(one, args.audio))
    else:
        for audio in args.audio:
            one(audio)
    return EXIT_OK


def cmd_train(args, ov):
    manifest = load_manifest(args.manifest)
    fcfg = apply_overrides(FrontendConfig(), ov["frontend"])
    model_cfg = apply_overrides(config_for(args.arch), ov["model"])
    tcfg = apply_overrides(TrainConfig(seed=args.seed), ov["train"])
    dbn_cfg = apply_overrides(DBNConfig(), ov["dbn"])
    metric_cfg = apply_overrides(MetricConfig(), ov["metric"])
    train_songs = load_songs(manifest.split("train"), fcfg)
    valid_songs = load_songs(manifest.split("valid"), fcfg)
    if not train_songs:
        raise DataError("manifest has no 'train' entries")
    _seed(tcfg.seed)
    model = build_model(args.arch, model_cfg)
    result = train(model, train_songs, valid_songs, tcfg, fcfg, dbn_cfg,
                   metric_cfg, out_dir=args.out,
                   on_epoch=lambda r: print(json.dumps(r), flush=True))
    logger.info("best epoch %d, score %.4f", result.best_epoch,
                result.best_score)
    return EXIT_OK


def cmd_evaluate(args, ov):
    for d in (args.est_dir, args.ref_dir):
        if not os.path.isdir(d):
            raise DataError(f"{d} is not a directory")
    result = evaluate_dataset(args.est_dir, args.ref_dir,
                              apply_overrides(MetricConfig(), ov["metric"]),
                              jobs=args.jobs)
    if result["n_files"] == 0:
        raise DataError("no estimate/reference pairs found")
    if not args.downbeats:
        result["downbeat"] = None
    print(format_table(result))
    print(json.dumps({k: result[k] for k in ("beat", "downbeat", "n_files",
                                             "missing")}, sort_keys=True))
    if args.out:
        write_report(args.out, result)
    return EXIT_OK


def write_matrix(prefix, values, **meta):
    """Float32 little-endian dump plus a ``<prefix>.json`` sidecar."""
    values = np.ascontiguousarray(values, dtype="<f4")
    values.tofile(prefix)
    meta = {"rows": int(values.shape[0]), "cols": int(values.shape[1]),
            **meta}
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def read_matrix(prefix):
    with open(f"{prefix}.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    values = np.fromfile(prefix, dtype="<f4")
    return values.reshape(meta["rows"], meta["cols"]), meta


def cmd_export(args, ov):
    if not args.checkpoint:
        raise UsageError("export needs --checkpoint")
    if not args.out:
        raise UsageError("export needs --out")
    if args.activations == (args.attention is not None):
        raise UsageError("choose exactly one of --activations, --attention")
    model, fcfg, _ = load_model(args.checkpoint, args.arch)
    rep = clip_features(load_wav(args.audio), fcfg)
    if args.activations:
        probs = predict_activations(model, rep.values)
        write_matrix(args.out, probs, kind="activations",
                     frame_rate=rep.frame_rate)
        return EXIT_OK
    if not isinstance(model, SpecTNT):
        raise UsageError("attention export needs a spectnt checkpoint")
    window = model.input_frames
    x = rep.values[:window]
    if len(x) < window:
        logger.warning("input has %d frames, padding to the model's %d",
                       len(x), window)
        x = np.pad(x, ((0, window - len(x)), (0, 0)))
    attn = export_attention(model, torch.from_numpy(x[None].astype(np.float32)),
                            args.attention, args.head)
    write_matrix(args.out, attn, kind=args.attention, head=args.head)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="beatforge")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--arch", choices=sorted(ARCHS))
    common.add_argument("--checkpoint")
    common.add_argument("--out")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", parents=[common],
                       help="audio to beat/downbeat annotation")
    p.add_argument("audio", nargs="+")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score estimates against references")
    p.add_argument("est_dir")
    p.add_argument("ref_dir")
    p.add_argument("--downbeats", action="store_true",
                   help="also report downbeat scores")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", parents=[common],
                       help="dump activations or attention maps")
    p.add_argument("audio")
    p.add_argument("--activations", action="store_true")
    p.add_argument("--attention", choices=("spectral", "temporal"))
    p.add_argument("--head", type=int, default=0)
    p.set_defaults(func=cmd_export)
    return parser


def _configure_logging():
    level = os.environ.get("BEATFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("track", "train") and not args.arch:
        parser.error(f"{args.command} needs --arch")
    if args.command == "train" and not args.out:
        parser.error("train needs --out")
    _seed(args.seed)
    try:
        return args.func(args, parse_overrides(args.overrides))
    except (UsageError, HeadOutOfRange) as exc:
        print(f"beatforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"beatforge: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, AudioError, AnnotationError, ManifestError, EmptyIndex,
            WrongDuration, TrainingDiverged, OSError) as exc:
        print(f"beatforge: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
