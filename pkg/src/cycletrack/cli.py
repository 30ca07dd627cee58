"""Command-line entry points: generate, train, eval, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as data_mod
from .checkpoint import CheckpointError, load_model
from .config import ABLATIONS, ConfigError, load_config
from .cycle import train
from .data import DataError, SceneSpec, SpecError
from .evaluation import (evaluate, norm_precision_curve, precision_curve, success_curve,
                         AUC_THRESHOLDS, NORM_THRESHOLDS)
from .model import OracleModel, TrackerModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("cycletrack")


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# generate

def load_generation_spec(path):
    """Read a generation spec: either ``scenes: [...]`` or a random-corpus block.

    Random corpus keys: ``count``, ``length``, ``canvas``, ``max_speed``,
    ``p_distractor``, ``p_occlusion``.
    """
    path = Path(path)
    if not path.exists():
        raise SpecError("spec_file", f"{path} not found")
    try:
        tree = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise SpecError("spec_file", str(exc)) from exc
    if not isinstance(tree, dict):
        raise SpecError("spec_file", "top level must be a mapping")
    return tree


def cmd_generate(spec_file, out_dir, seed):
    tree = load_generation_spec(spec_file)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    if "scenes" in tree:
        for i, scene in enumerate(tree["scenes"]):
            spec = SceneSpec.from_dict(scene)
            entries.append((f"seq{i:04d}", spec, int(rng.integers(2 ** 31))))
    else:
        allowed = {"count", "length", "canvas", "max_speed", "p_distractor", "p_occlusion"}
        unknown = set(tree) - allowed
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown generation key")
        count = tree.get("count", 10)
        length = tree.get("length", 20)
        if not isinstance(count, int) or count < 1:
            raise SpecError("count", "must be a positive integer")
        if not isinstance(length, int) or length < 1:
            raise SpecError("length", "must be a positive integer")
        kw = {k: tree[k] for k in ("max_speed", "p_distractor", "p_occlusion") if k in tree}
        canvas = tuple(tree.get("canvas", (160, 160)))
        for i in range(count):
            spec = data_mod.random_scene(rng, length, canvas, **kw)
            spec.validate()
            entries.append((f"seq{i:04d}", spec, int(rng.integers(2 ** 31))))
    manifest = {"seed": seed, "sequences": []}
    for name, spec, s in entries:
        seq = data_mod.generate(spec, s)
        seq.name = name
        data_mod.save_sequence(seq, out_dir / name)
        manifest["sequences"].append({"id": name, "seed": s, "spec": spec.to_dict()})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# train / eval

def build_model(cfg) -> TrackerModel:
    torch.manual_seed(cfg.seed)
    return TrackerModel(cfg.encoder_config(), cfg.dca.token_length)


def cmd_train(cfg, data_dir, out_dir, resume=False, progress=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sequences = data_mod.load_dataset(data_dir)
    cfg.data.train_dir = str(data_dir)
    cfg.output_dir = str(out_dir)
    cfg.dump(out_dir / "config.yaml")
    model = build_model(cfg)
    counters = train(model, sequences, cfg.train, cfg.dca, cfg.loss, out_dir, seed=cfg.seed,
                     resume=resume, run_config=cfg.to_dict(), progress=progress)
    if counters.skipped_steps >= cfg.train.steps_per_epoch * cfg.train.total_epochs:
        raise NumericError("every training step produced a non-finite loss")
    final = sorted((out_dir / "checkpoints").glob("epoch_*.pt"))[-1]
    return model, final


def _curves(sequences, results):
    pred, gt = [], []
    for seq in sequences:
        boxes = results[seq.name]
        pred.extend(boxes[1:])
        gt.extend(seq.full_annotations[1:])
    return np.array(pred), np.array([b.astuple() for b in gt])


def write_plots(sequences, results_dir, out_dir):
    """Success, precision and normalized-precision curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = {}
    for seq in sequences:
        rows = np.loadtxt(Path(results_dir) / f"{seq.name}.txt", delimiter=",", ndmin=2)
        results[seq.name] = [(x + w / 2, y + h / 2, w, h) for x, y, w, h in rows]
    pred, gt = _curves(sequences, results)
    out_dir = Path(out_dir)
    figs = {
        "success.png": (AUC_THRESHOLDS, success_curve(pred, gt), "overlap threshold", "success rate"),
        "precision.png": (*precision_curve(pred, gt), "location error threshold (px)", "precision"),
        "norm_precision.png": (NORM_THRESHOLDS, norm_precision_curve(pred, gt),
                               "normalized distance threshold", "normalized precision"),
    }
    for name, (x, y, xl, yl) in figs.items():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(x, y)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.set_ylim(0, 1.02)
        fig.tight_layout()
        fig.savefig(out_dir / name, dpi=100)
        plt.close(fig)
    return list(figs)


def cmd_eval(checkpoint, data_dir, out_dir, oracle=False, plots=True):
    sequences = data_mod.load_dataset(data_dir)
    out_dir = Path(out_dir)
    results_dir = out_dir / "results"
    results_dir.mkdir(parents=True, exist_ok=True)
    if oracle:
        model = OracleModel({s.name: s.gt_array() for s in sequences})
    else:
        model, _ = load_model(checkpoint)
    report = evaluate(model, sequences, results_dir)
    payload = report.to_dict()
    payload["checkpoint"] = None if oracle else str(checkpoint)
    payload["oracle"] = bool(oracle)
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    if plots:
        write_plots(sequences, results_dir, out_dir)
    return report


# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="cycletrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="YAML generation spec")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None, help="defaults to CYCLETRACK_SEED, then 0")

    t = sub.add_parser("train", help="self-supervised cycle training")
    t.add_argument("--config", default=None, help="YAML run config")
    t.add_argument("--data", required=False, help="training dataset directory")
    t.add_argument("--out", required=False, help="run directory for the log, config and checkpoints")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--paper-schedule", action="store_true", help="150-epoch optimization schedule")
    t.add_argument("--ablate", choices=sorted(ABLATIONS), default=None, help="DCA variant")

    e = sub.add_parser("eval", help="one-pass evaluation")
    e.add_argument("--checkpoint", default=None, help="model checkpoint (.pt)")
    e.add_argument("--data", required=True, help="evaluation dataset directory")
    e.add_argument("--out", required=True, help="directory for metrics.json, results/ and plots")
    e.add_argument("--oracle", action="store_true", help="score a ground-truth oracle instead of a model")
    e.add_argument("--ablate", choices=sorted(ABLATIONS), default=None,
                   help="train this variant on --train-data first, then evaluate it")
    e.add_argument("--train-data", default=None, help="training data for --ablate")
    e.add_argument("--config", default=None, help="YAML run config for --ablate")
    e.add_argument("--no-plots", action="store_true", help="skip the curve plots")

    pl = sub.add_parser("plot", help="curves from a results directory")
    pl.add_argument("--results", required=True, help="directory of per-sequence result files")
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True)
    return p


def _seed_arg(value):
    if value is not None:
        return value
    return load_config().seed  # honours CYCLETRACK_SEED


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = [a for a in extra if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]]
    stray = [a for a in extra if a not in overrides]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    try:
        if args.command == "generate":
            manifest = cmd_generate(args.spec, args.out, _seed_arg(args.seed))
            print(f"wrote {len(manifest['sequences'])} sequences to {args.out}")
        elif args.command == "train":
            cfg = load_config(args.config, overrides, args.paper_schedule, args.ablate)
            if args.dry_run:
                print(yaml.safe_dump(cfg.to_dict(), sort_keys=True), end="")
                return EXIT_OK
            if not args.data or not args.out:
                raise ConfigError("train: --data and --out are required unless --dry-run")
            _, final = cmd_train(cfg, args.data, args.out, resume=args.resume)
            print(f"final checkpoint: {final}")
        elif args.command == "eval":
            checkpoint = args.checkpoint
            if args.ablate is not None:
                if not args.train_data:
                    raise ConfigError("eval --ablate needs --train-data")
                cfg = load_config(args.config, overrides, ablation=args.ablate)
                _, checkpoint = cmd_train(cfg, args.train_data, Path(args.out) / f"train-{args.ablate}")
            elif not args.oracle and checkpoint is None:
                raise ConfigError("eval: --checkpoint is required")
            report = cmd_eval(checkpoint, args.data, args.out, oracle=args.oracle, plots=not args.no_plots)
            print(f"auc={report.auc:.4f} precision={report.precision:.4f} "
                  f"norm_precision={report.norm_precision:.4f} mean_iou={report.mean_iou:.4f}")
        elif args.command == "plot":
            sequences = data_mod.load_dataset(args.data)
            Path(args.out).mkdir(parents=True, exist_ok=True)
            names = write_plots(sequences, args.results, args.out)
            print("wrote " + ", ".join(names))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
