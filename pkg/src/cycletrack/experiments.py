"""Desk-scale learning runs: untrained baseline, self-supervised variants, supervised upper bound.

Results are cached as JSON keyed by the protocol, the variant, the seed and a
hash of the package source, so repeated test sessions reuse finished runs.

    python3 -m cycletrack.experiments --variants full no-prompt --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ABLATIONS, apply, RunConfig
from .cycle import TrainSchedule, jitter_boxes, make_optimizer, set_epoch_lr, step_seed, train
from .data import generate_corpus, pixel_stats
from .evaluation import evaluate
from .geometry import boxes_to_crop, clip_boxes_to_crop, crop_batch
from .heads import gaussian_target, total_loss
from .model import TrackerModel

log = logging.getLogger(__name__)

CACHE_ENV = "CYCLETRACK_CACHE"
SRC_DIR = Path(__file__).resolve().parent


@dataclass(frozen=True)
class Protocol:
    train_sequences: int = 200
    train_length: int = 6
    eval_sequences: int = 20
    eval_length: int = 30
    eval_seed: int = 10_000
    total_epochs: int = 20
    steps_per_epoch: int = 200
    forward_length: int = 2
    backward_steps: int = 1


DESK = Protocol()


def cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return SRC_DIR.parent.parent / ".cache" / "experiments"


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_key(protocol: Protocol, variant: str, seed: int) -> str:
    blob = json.dumps({"protocol": asdict(protocol), "variant": variant, "seed": seed,
                       "source": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def corpora(protocol: Protocol, seed: int):
    """Per-seed training corpus and the shared held-out corpus."""
    train_seqs, _, _ = generate_corpus(protocol.train_sequences, protocol.train_length, seed)
    eval_seqs, _, _ = generate_corpus(protocol.eval_sequences, protocol.eval_length, protocol.eval_seed)
    return train_seqs, eval_seqs


def variant_config(protocol: Protocol, variant: str, seed: int) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.train = TrainSchedule(total_epochs=protocol.total_epochs, steps_per_epoch=protocol.steps_per_epoch,
                              forward_length=protocol.forward_length, backward_steps=protocol.backward_steps,
                              lr_decay_epoch=int(protocol.total_epochs * 0.8), keep_checkpoints=1)
    if variant in ABLATIONS:
        apply(cfg, ABLATIONS[variant])
    return cfg


def _fresh_model(cfg: RunConfig, train_seqs) -> TrackerModel:
    torch.manual_seed(cfg.seed)
    model = TrackerModel(cfg.encoder_config(), cfg.dca.token_length)
    model.set_pixel_stats(*pixel_stats(train_seqs))
    return model


def supervised_train(model, sequences, sched: TrainSchedule, weights, seed=0):
    """Upper-bound diagnostic: one labeled hop per step, searched around the previous frame's label.

    The search crop gets the same random jitter as the backward hop of the
    self-supervised cycle.  Reads ``full_annotations``; never used by the self-supervised path.
    """
    optimizer = make_optimizer(model, sched)
    model.train()
    for epoch in range(1, sched.total_epochs + 1):
        set_epoch_lr(optimizer, epoch, sched)
        for step in range(sched.steps_per_epoch):
            s = step_seed(seed, epoch, step)
            rng = np.random.default_rng(s)
            gen = torch.Generator().manual_seed(s)
            z, y0, x, prev, gt = [], [], [], [], []
            for _ in range(sched.batch_size):
                seq = sequences[int(rng.integers(len(sequences)))]
                t = int(rng.integers(1, len(seq.frames)))
                z.append(seq.frames[0])
                x.append(seq.frames[t])
                y0.append(seq.first_annotation.astuple())
                prev.append(seq.full_annotations[t - 1].astuple())
                gt.append(seq.full_annotations[t].astuple())
            to_t = lambda fs: torch.from_numpy(np.stack(fs)).permute(0, 3, 1, 2).float()  # noqa: E731
            y0, prev, gt = (torch.tensor(v, dtype=torch.float64) for v in (y0, prev, gt))
            template, _, _ = crop_batch(to_t(z), y0, sched.template_factor, model.cfg.template_res)
            prev = jitter_boxes(prev, sched.scale_jitter, sched.center_jitter, gen)
            search, centers, sides = crop_batch(to_t(x), prev, sched.search_factor, model.cfg.search_res)
            out = model.hop(template, search)
            g, visible = clip_boxes_to_crop(boxes_to_crop(gt, centers, sides))
            g = g.to(out.box.dtype)
            terms = total_loss(out.box, g, out.maps.cls, gaussian_target(g, model.cfg.feat_size).float(),
                               weights, visible)
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), sched.grad_clip)
            optimizer.step()
    return model


def run_variant(variant: str, seed: int, protocol: Protocol = DESK, use_cache=True) -> dict:
    """Train (or skip training for ``untrained``) and score on the held-out corpus.

    ``variant`` is one of the ablation names, ``untrained`` or ``supervised``.
    """
    path = cache_dir() / f"{variant}-s{seed}-{run_key(protocol, variant, seed)}.json"
    if use_cache and path.exists():
        return json.loads(path.read_text())
    torch.set_num_threads(1)
    train_seqs, eval_seqs = corpora(protocol, seed)
    base = "full" if variant in ("untrained", "supervised") else variant
    cfg = variant_config(protocol, base, seed)
    model = _fresh_model(cfg, train_seqs)
    t0 = time.time()
    if variant == "supervised":
        supervised_train(model, train_seqs, cfg.train, cfg.loss, seed)
    elif variant != "untrained":
        with tempfile.TemporaryDirectory() as tmp:
            train(model, train_seqs, cfg.train, cfg.dca, cfg.loss, tmp, seed=seed)
            losses = [json.loads(line)["loss"] for line in open(Path(tmp) / "train_log.jsonl")]
    train_time = time.time() - t0
    report = evaluate(model, eval_seqs)
    result = {"variant": variant, "seed": seed, "mean_iou": report.mean_iou, "auc": report.auc,
              "precision": report.precision, "norm_precision": report.norm_precision,
              "train_seconds": train_time, "protocol": asdict(protocol)}
    if variant not in ("untrained", "supervised"):
        n = max(1, len(losses) // 10)
        result["loss_first_decile_median"] = float(np.median(losses[:n]))
        result["loss_last_decile_median"] = float(np.median(losses[-n:]))
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_suffix(".tmp")
        tmp_path.write_text(json.dumps(result, indent=1, sort_keys=True))
        os.replace(tmp_path, path)
    log.info("%s seed %d: mean IoU %.4f (%.0f s)", variant, seed, report.mean_iou, train_time)
    return result


def summarize(variant: str, seeds=(0, 1, 2), protocol: Protocol = DESK) -> dict:
    runs = [run_variant(variant, s, protocol) for s in seeds]
    return {"variant": variant, "runs": runs,
            "mean_iou": float(np.mean([r["mean_iou"] for r in runs])),
            "auc": float(np.mean([r["auc"] for r in runs]))}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", nargs="+", default=["untrained", "supervised", *ABLATIONS])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for v in args.variants:
        seeds = args.seeds[:1] if v == "supervised" else args.seeds
        s = summarize(v, seeds)
        print(f"{v:12s} mean_iou={s['mean_iou']:.4f} auc={s['auc']:.4f} "
              f"per-seed={[round(r['mean_iou'], 4) for r in s['runs']]}", flush=True)


if __name__ == "__main__":
    main()
