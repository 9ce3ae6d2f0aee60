"""Command-line entry point.

Subcommands: augment, explore, featmap, pretrain, probe, ablate. Every command
reads an optional JSON run config (``--config``), applies ``--set key=value``
overrides on top, and writes only below ``--out`` (default: the
``GUIDEDCONTRAST_OUT`` environment variable, else ``./out``).

Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure. Failures print a
single ``error[<code>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from ._rng import derive_seed
from .augmentation import (
    AppliedRecord,
    Augmentation,
    AugmentationError,
    apply,
    invert_apply,
    sample_random,
)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .contrastive import ContrastiveError
from .gfm import MappingError
from .guided import coverage_metrics, explore
from .pointcloud import PointCloudError, load_xyz, save_xyz
from .probe import ProbeError
from .trainer import (
    TrainingError,
    ablation_run,
    encoder_input,
    init_encoder,
    pretrain,
    probe_accuracy,
    summarize_ablation,
)

OUT_ENV = "GUIDEDCONTRAST_OUT"
EXPLORE_HEADER = ("trial", "method", "min_pairwise", "mean_nn")
FEATMAP_HEADER = ("index", "x", "y", "z", "cosine_distance")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_DATA_ERRORS = (
    PointCloudError,
    AugmentationError,
    MappingError,
    CheckpointError,
    ProbeError,
    OSError,
    json.JSONDecodeError,
)
_NUMERIC_ERRORS = (TrainingError, enc.EncoderError, ContrastiveError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _parse_set(items) -> dict:
    overrides = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _resolve_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return config.with_overrides(overrides) if overrides else config.validate()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AugmentationError(f"{path}: invalid JSON: {exc}") from None


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cosine_distances(feats: np.ndarray, anchor: int) -> np.ndarray:
    """``1 - cos`` between every row and the anchor row.

    Rows equal to the anchor row get exactly 0. A zero row has no direction,
    so its distance to a different row is 1.
    """
    f = np.asarray(feats, dtype=np.float64)
    a = f[anchor]
    norms = np.linalg.norm(f, axis=1)
    na = norms[anchor]
    dist = np.ones(f.shape[0])
    ok = (norms > 0) & (na > 0)
    dist[ok] = 1.0 - (f[ok] @ a) / (norms[ok] * na)
    dist[np.all(f == a, axis=1)] = 0.0
    return np.clip(dist, 0.0, 2.0)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_augment(args, config: TrainConfig, out: Path) -> str:
    pc = load_xyz(args.input)
    if args.invert:
        record = AppliedRecord.from_dict(_read_json(args.invert))
        inv = invert_apply(record, pc, invert_jitter=not args.keep_jitter)
        save_xyz(inv, out / "inverted.xyz")
        return f"wrote {out / 'inverted.xyz'} ({inv.n} points)"
    if args.random:
        aug = sample_random(config.augment, derive_seed(config.seed, 0))
    elif args.aug:
        aug = Augmentation.from_dict(_read_json(args.aug))
    else:
        raise UsageError("augment needs one of --aug, --random or --invert")
    view, record = apply(aug, pc, args.budget, derive_seed(config.seed, 1))
    save_xyz(view, out / "augmented.xyz")
    _write_json(out / "record.json", record.to_dict())
    return f"wrote {out / 'augmented.xyz'} ({view.n} points) and {out / 'record.json'}"


def cmd_explore(args, config: TrainConfig, out: Path) -> str:
    if args.trials < 1 or args.n_select < 2 or args.candidates < 1:
        raise UsageError("need --trials >= 1, --n-select >= 2 and --candidates >= 1")
    methods = ("guided", "random") if args.method == "both" else (args.method,)
    ga = config.ga
    rows = []
    for t in range(args.trials):
        seed = derive_seed(config.seed, t)
        for m in methods:
            samples = explore(
                m,
                args.n_select,
                args.candidates,
                seed,
                config.augment,
                capacity=ga.capacity or args.n_select,
                epsilon=ga.epsilon,
                c=ga.c,
                weights=ga.weights,
            )
            cov = coverage_metrics(samples, ga.weights, config.augment)
            rows.append([t, m, repr(cov["min_pairwise"]), repr(cov["mean_nn"])])
    (out / "explore.csv").write_text(_csv_text(EXPLORE_HEADER, rows))
    return f"wrote {out / 'explore.csv'} ({len(rows)} rows)"


def cmd_featmap(args, config: TrainConfig, out: Path) -> str:
    pc = load_xyz(args.input)
    if args.checkpoint:
        params, _, _ = load_checkpoint(args.checkpoint)
    else:
        params = init_encoder(config)
    if not 0 <= args.anchor < pc.n:
        raise PointCloudError(f"anchor {args.anchor} out of range for {pc.n} points")
    feats = enc.forward(params, encoder_input(pc, config.center_views))
    dist = cosine_distances(feats, args.anchor)
    rows = [
        [i, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(d))]
        for i, ((x, y, z), d) in enumerate(zip(pc.points, dist))
    ]
    (out / "featmap.csv").write_text(_csv_text(FEATMAP_HEADER, rows))
    return f"wrote {out / 'featmap.csv'} ({pc.n} rows)"


def cmd_pretrain(args, config: TrainConfig, out: Path) -> str:
    _, metrics = pretrain(config, out, resume=args.resume)
    last = metrics.rows[-1] if metrics.rows else None
    if last is None:
        return f"wrote initial checkpoint to {out / 'checkpoint'}"
    return f"epoch {last['epoch']} loss {last['loss_mean']:.6f}; outputs in {out}"


def cmd_probe(args, config: TrainConfig, out: Path) -> str:
    if args.checkpoint:
        params, _, _ = load_checkpoint(args.checkpoint)
    else:
        params = init_encoder(config)
    acc = probe_accuracy(params, config)
    _write_json(out / "probe.json", {"accuracy": acc, "checkpoint": args.checkpoint})
    return f"probe accuracy {acc:.6f}"


def cmd_ablate(args, config: TrainConfig, out: Path) -> str:
    rows = ablation_run(config, out, seeds=args.seeds)
    summary = summarize_ablation(rows)
    _write_json(out / "ablation_summary.json", summary)
    return "; ".join(f"{k} {v['mean']:.4f}+/-{v['std']:.4f}" for k, v in summary.items())


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="config override such as optim.lr_max=0.001 (value parsed as JSON when possible)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="guidedcontrast", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("augment", parents=[common], help="augment a cloud or invert a record")
    p.add_argument("--in", dest="input", required=True, help="input .xyz cloud")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--aug", help="augmentation JSON")
    mode.add_argument("--random", action="store_true", help="sample from the configured ranges")
    mode.add_argument("--invert", metavar="RECORD", help="record JSON to invert --in with")
    p.add_argument("--budget", type=int, help="subsample crop survivors down to this many points")
    p.add_argument("--keep-jitter", action="store_true", help="with --invert, leave the noise in")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("explore", parents=[common], help="coverage of guided vs random sampling")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--n-select", type=int, default=512)
    p.add_argument("--candidates", type=int, default=16)
    p.add_argument("--method", choices=("guided", "random", "both"), default="both")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("featmap", parents=[common], help="per-point feature distance to an anchor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint", help="checkpoint directory (default: untrained init)")
    p.add_argument("--anchor", type=int, default=0)
    p.set_defaults(func=cmd_featmap)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="linear probe on frozen features")
    p.add_argument("--checkpoint", help="checkpoint directory (default: untrained init)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", parents=[common], help="crop/GFM/GA ablation matrix")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(code: int, kind: str, exc) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error[{code}]: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        config = _resolve_config(args)
        out = _out_dir(args)
        message = args.func(args, config, out)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except _DATA_ERRORS as exc:
        return _fail(EXIT_DATA, "data", exc)
    print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
