"""Self-supervised cycle training: forward through unlabeled frames, back to frame 0."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import latest_checkpoint, load_checkpoint, save_checkpoint
from .dca import ContextTokens, DcaConfig, Mode, sample_noise, sample_prompt, select_mode, topk_indices, score_tokens
from .data import TrainSample, pixel_stats, sample_training_batch
from .geometry import (SEARCH_FACTOR, TEMPLATE_FACTOR, boxes_to_crop, boxes_to_frame, clip_boxes_to_crop,
                       crop_batch)
from .heads import LossWeights, decode_box, gaussian_target, total_loss
from .model import HopMeta

log = logging.getLogger(__name__)

MIN_BOX_PX = 1.0


@dataclass
class TrainSchedule:
    total_epochs: int = 20
    steps_per_epoch: int = 200
    forward_length: int = 2
    backward_steps: int = 1
    lr_backbone: float = 2e-4
    lr_rest: float = 1e-3
    lr_decay_epoch: int = 16
    weight_decay: float = 1e-4
    batch_size: int = 8
    template_factor: float = TEMPLATE_FACTOR
    search_factor: float = SEARCH_FACTOR
    backward_search_scale: float = 1.5
    scale_jitter: float = 0.25   # log-std of the backward search crop size
    center_jitter: float = 2.0   # backward crop center shift, in target sizes (uniform, full width)
    grad_clip: float = 1.0
    keep_checkpoints: int = 0  # 0 keeps every epoch

    def validate(self):
        for name in ("total_epochs", "steps_per_epoch", "forward_length", "backward_steps",
                     "lr_backbone", "lr_rest", "lr_decay_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be nonnegative")
        if self.lr_decay_epoch > self.total_epochs:
            raise ValueError("train.lr_decay_epoch exceeds train.total_epochs")
        if self.template_factor <= 1 or self.search_factor <= 1:
            raise ValueError("crop factors must exceed 1")
        if self.scale_jitter < 0 or self.center_jitter < 0:
            raise ValueError("train jitter must be nonnegative")


@dataclass
class Counters:
    degenerate_boxes: int = 0
    invisible_targets: int = 0
    skipped_steps: int = 0


@dataclass
class Batch:
    z0: torch.Tensor          # (B, 3, H, W) float
    y0: torch.Tensor          # (B, 4) float64 frame pixels
    x_u: list                 # L tensors (B, 3, H, W)
    seq_ids: list
    frame_indices: list       # L lists of B ints

    @property
    def size(self):
        return self.y0.shape[0]


def collate(samples: list[TrainSample]) -> Batch:
    def stack(frames):
        return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).float()
    L = len(samples[0].x_u)
    if any(len(s.x_u) != L for s in samples):
        raise ValueError("samples in a batch need the same number of unlabeled frames")
    return Batch(
        z0=stack([s.z0 for s in samples]),
        y0=torch.tensor([s.y0.astuple() for s in samples], dtype=torch.float64),
        x_u=[stack([s.x_u[i] for s in samples]) for i in range(L)],
        seq_ids=[s.seq_id for s in samples],
        frame_indices=[[s.frame_indices[i] for s in samples] for i in range(L)],
    )


def clamp_degenerate(boxes: torch.Tensor, counters: Counters | None = None) -> torch.Tensor:
    small = boxes[:, 2:] < MIN_BOX_PX
    if bool(small.any()):
        if counters is not None:
            counters.degenerate_boxes += int(small.any(-1).sum())
        boxes = torch.cat([boxes[:, :2], boxes[:, 2:].clamp(min=MIN_BOX_PX)], -1)
    return boxes


@dataclass
class HopRecord:
    out: object            # model.HopOutput
    centers: torch.Tensor
    sides: torch.Tensor
    box_frame: torch.Tensor
    context_mode: Mode
    context_len: int


@dataclass
class CycleResult:
    boxes: list                                # per hop (B, 4) frame pixels, float64
    hops: list = field(default_factory=list)   # HopRecord per hop
    template: torch.Tensor | None = None


def next_context(model, hop, mode: Mode, k: int, generator=None, exclude_topk=False) -> ContextTokens:
    """Tokens handed to the following hop after ``hop``."""
    if mode == Mode.PROMPT:
        return sample_prompt(hop.f_x, hop.attn, hop.maps.cls, k)
    if mode == Mode.NOISE:
        exclude = None
        if exclude_topk:
            exclude = topk_indices(score_tokens(hop.attn.detach(), hop.maps.cls.detach()), k)
        return sample_noise(hop.f_x, k, generator, exclude)
    if mode == Mode.QUERY:
        q = model.query_tokens[:, :k]
        return ContextTokens(q.expand(hop.f_x.shape[0], -1, -1), Mode.QUERY, None)
    return ContextTokens.empty()


def jitter_boxes(boxes: torch.Tensor, scale: float, center: float, generator=None) -> torch.Tensor:
    """Randomly rescale and shift crop boxes; keeps the aspect ratio."""
    if scale == 0 and center == 0:
        return boxes
    b = boxes.shape[0]
    gain = torch.exp(torch.randn(b, 1, generator=generator, dtype=torch.float64) * scale)
    wh = boxes[:, 2:] * gain
    size = torch.sqrt(wh[:, :1] * wh[:, 1:])
    shift = (torch.rand(b, 2, generator=generator, dtype=torch.float64) - 0.5) * center * size
    return torch.cat([boxes[:, :2] + shift, wh], -1)


def _run_hop(model, template, frames, prev, factor, ctx, seq_ids, frame_idx, cfg, counters):
    res = model.cfg.search_res
    search, centers, sides = crop_batch(frames, prev, factor, res)
    meta = HopMeta(seq_ids, frame_idx, centers, sides)
    out = model.hop(template, search, ctx, meta)
    box = boxes_to_frame(out.box.detach().to(torch.float64), centers, sides)
    box = clamp_degenerate(box, counters)
    return HopRecord(out, centers, sides, box, ctx.mode, len(ctx))


def forward_track(model, batch: Batch, mode: Mode, sched: TrainSchedule, k: int = 8,
                  generator=None, counters: Counters | None = None, exclude_topk=False) -> CycleResult:
    """Track from the labeled frame through the ``L`` unlabeled frames."""
    cfg = model.cfg
    template, _, _ = crop_batch(batch.z0, batch.y0, sched.template_factor, cfg.template_res)
    prev = batch.y0
    ctx = ContextTokens.empty()
    result = CycleResult([], [], template)
    for i, frames in enumerate(batch.x_u):
        hop = _run_hop(model, template, frames, prev, sched.search_factor, ctx,
                       batch.seq_ids, batch.frame_indices[i], cfg, counters)
        result.hops.append(hop)
        result.boxes.append(hop.box_frame)
        prev = hop.box_frame
        ctx = next_context(model, hop.out, mode, k, generator, exclude_topk)
    return result


def backward_track(model, fwd: CycleResult, batch: Batch, mode: Mode, sched: TrainSchedule, k: int = 8,
                   generator=None, counters: Counters | None = None, exclude_topk=False) -> CycleResult:
    """Re-crop a reference from the last forward prediction and track back to frame 0.

    Intermediate hops (``backward_steps > 1``) visit the unlabeled frames in
    reverse order; the last hop searches frame 0 over an enlarged region.
    """
    cfg = model.cfg
    L = len(batch.x_u)
    last = fwd.boxes[-1]
    reference, _, _ = crop_batch(batch.x_u[-1], last, sched.template_factor, cfg.template_res)
    prev = last
    ctx = ContextTokens.empty()
    result = CycleResult([], [], reference)
    m = sched.backward_steps
    for j in range(1, m + 1):
        if j < m:
            i = max(L - 1 - j, 0)
            frames, factor, idx = batch.x_u[i], sched.search_factor, batch.frame_indices[i]
        else:
            frames = batch.z0
            factor = sched.search_factor * sched.backward_search_scale
            idx = [0] * batch.size
        # without jitter the head could learn the fixed target-to-crop ratio
        # of this hop instead of reading the target extent
        crop_box = jitter_boxes(prev, sched.scale_jitter, sched.center_jitter, generator)
        hop = _run_hop(model, reference, frames, crop_box, factor, ctx, batch.seq_ids, idx, cfg, counters)
        result.hops.append(hop)
        result.boxes.append(hop.box_frame)
        prev = hop.box_frame
        if j < m:
            ctx = next_context(model, hop.out, mode, k, generator, exclude_topk)
    return result


def context_mode(epoch: int, dcfg: DcaConfig, sched) -> Mode:
    """Token mode for ``epoch`` under the (possibly ablated) DCA config."""
    if dcfg.learned_queries:
        return Mode.QUERY
    phase = select_mode(epoch, sched)
    if phase == Mode.PROMPT and not dcfg.use_prompt:
        return Mode.NONE
    if phase == Mode.NOISE and not dcfg.use_noise:
        return Mode.PROMPT if dcfg.use_prompt else Mode.NONE
    return phase


def cycle_loss(model, batch: Batch, mode: Mode, sched: TrainSchedule, dcfg: DcaConfig,
               weights: LossWeights, generator=None, counters: Counters | None = None):
    """Run the full cycle and return ``(loss, record, fwd, bwd)``."""
    counters = counters if counters is not None else Counters()
    k = dcfg.token_length
    # Context resets before the backward pass and crops are stop-gradient, so
    # nothing computed during forward tracking reaches the loss.
    with torch.no_grad():
        fwd = forward_track(model, batch, mode, sched, k, generator, counters, dcfg.noise_exclude_topk)
    bwd = backward_track(model, fwd, batch, mode, sched, k, generator, counters, dcfg.noise_exclude_topk)
    final = bwd.hops[-1]
    out = final.out

    gt = boxes_to_crop(batch.y0, final.centers, final.sides)
    gt, visible = clip_boxes_to_crop(gt)
    dtype = out.box.dtype
    gt = gt.to(dtype)
    target = gaussian_target(gt, model.cfg.feat_size)
    terms = total_loss(out.box, gt, out.maps.cls, target.to(dtype), weights, visible)
    counters.invisible_targets += terms.invisible
    loss = terms.total
    record = terms.as_floats()
    record["loss_noise"] = 0.0

    if mode == Mode.NOISE:
        b = batch.size
        if b > 1:
            noise = sample_noise(out.f_x, k, generator)
            # tokens borrowed from the neighbouring sequence of the batch
            noise = ContextTokens(noise.tokens.roll(1, dims=0), Mode.NOISE, noise.source_indices.roll(1, dims=0))
        else:
            noise = sample_noise(fwd.hops[-1].out.f_x, k, generator)
        maps = model.noise_decoder(out.f_x, noise)
        nterms = total_loss(decode_box(maps), gt, maps.cls, target.to(dtype), weights, visible)
        loss = loss + dcfg.noise_loss_weight * nterms.total
        record["loss_noise"] = float(nterms.total.detach())
    record["loss"] = float(loss.detach())
    return loss, record, fwd, bwd


def train_step(model, batch: Batch, epoch: int, optimizer, sched: TrainSchedule, dcfg: DcaConfig,
               weights: LossWeights, dca_sched, generator=None, counters: Counters | None = None):
    """One cycle-consistency update; returns the step's log record."""
    counters = counters if counters is not None else Counters()
    mode = context_mode(epoch, dcfg, dca_sched)
    model.train()
    deg_before = counters.degenerate_boxes
    loss, record, _, _ = cycle_loss(model, batch, mode, sched, dcfg, weights, generator, counters)
    record.update(mode=mode.value, degenerate_boxes=counters.degenerate_boxes - deg_before)
    if not math.isfinite(record["loss"]):
        counters.skipped_steps += 1
        log.warning("non-finite loss at epoch %d, skipping batch", epoch)
        record["skipped"] = True
        return record
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if sched.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), sched.grad_clip)
    optimizer.step()
    return record


def make_optimizer(model, sched: TrainSchedule):
    groups = [
        {"params": list(model.backbone_parameters()), "lr": sched.lr_backbone, "base_lr": sched.lr_backbone},
        {"params": model.other_parameters(), "lr": sched.lr_rest, "base_lr": sched.lr_rest},
    ]
    return torch.optim.AdamW(groups, weight_decay=sched.weight_decay)


def set_epoch_lr(optimizer, epoch: int, sched: TrainSchedule):
    factor = 0.1 if epoch > sched.lr_decay_epoch else 1.0
    for g in optimizer.param_groups:
        g["lr"] = g["base_lr"] * factor


def step_seed(root_seed: int, epoch: int, step: int) -> int:
    return int(np.random.default_rng([root_seed, epoch, step]).integers(2 ** 62))


def train(model, sequences, sched: TrainSchedule, dcfg: DcaConfig, weights: LossWeights,
          out_dir, seed: int = 0, resume: bool = False, run_config: dict | None = None,
          progress=None):
    """Epoch loop over :func:`train_step`.

    Writes ``train_log.jsonl`` (one record per step) and a checkpoint after
    every epoch under ``out_dir/checkpoints``.  With ``resume`` the latest
    checkpoint is restored and training continues at the next step.
    Epochs are numbered from 1.
    """
    sched.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    dca_sched = dcfg.schedule(sched.total_epochs)
    optimizer = make_optimizer(model, sched)
    counters = Counters()
    start_epoch = 1

    latest = latest_checkpoint(ckpt_dir) if resume else None
    if latest is not None:
        state = load_checkpoint(latest)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        counters = Counters(**state.get("counters", {}))
        start_epoch = state["epoch"] + 1
        done = state["epoch"] * sched.steps_per_epoch
        _truncate_log(log_path, done)
        log.info("resumed from %s at epoch %d", latest, start_epoch)
    else:
        torch.manual_seed(seed)
        mean, std = pixel_stats(sequences)
        model.set_pixel_stats(mean, std)
        if log_path.exists():
            log_path.unlink()

    global_step = (start_epoch - 1) * sched.steps_per_epoch
    with open(log_path, "a") as fh:
        for epoch in range(start_epoch, sched.total_epochs + 1):
            set_epoch_lr(optimizer, epoch, sched)
            for step in range(sched.steps_per_epoch):
                s = step_seed(seed, epoch, step)
                rng = np.random.default_rng(s)
                gen = torch.Generator().manual_seed(s)
                samples = sample_training_batch(sequences, sched.forward_length, rng, sched.batch_size)
                record = train_step(model, collate(samples), epoch, optimizer, sched, dcfg, weights,
                                    dca_sched, gen, counters)
                global_step += 1
                record = {"step": global_step, "epoch": epoch, **record}
                fh.write(json.dumps(record) + "\n")
                if progress is not None:
                    progress(record)
            fh.flush()
            save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.pt", model, optimizer=optimizer, epoch=epoch,
                            step=global_step, counters=asdict(counters), run_config=run_config)
            _prune(ckpt_dir, sched.keep_checkpoints)
    return counters


def _truncate_log(path: Path, steps: int):
    if not path.exists():
        return
    lines = path.read_text().splitlines()[:steps]
    path.write_text("".join(line + "\n" for line in lines))


def _prune(ckpt_dir: Path, keep: int):
    if keep <= 0:
        return
    ckpts = sorted(ckpt_dir.glob("epoch_*.pt"))
    for p in ckpts[:-keep]:
        p.unlink()


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
