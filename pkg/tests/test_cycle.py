import math

import numpy as np
import pytest
import torch

from cycletrack import dca
from cycletrack.cycle import (
    Counters, TrainSchedule, backward_track, clamp_degenerate, collate, context_mode, cycle_loss,
    forward_track, jitter_boxes, make_optimizer, read_log, set_epoch_lr, step_seed, train, train_step,
)
from cycletrack.data import SceneSpec, generate, generate_corpus, sample_training_batch
from cycletrack.dca import DcaConfig, DcaSchedule, Mode
from cycletrack.heads import LossWeights
from cycletrack.model import OracleModel, TrackerModel


def _oracle_batch(seqs, L, seed=0, batch_size=2):
    samples = sample_training_batch(seqs, L, np.random.default_rng(seed), batch_size)
    oracle = OracleModel({s.name: s.gt_array() for s in seqs})
    return oracle, collate(samples)


def _sched(**kw):
    base = dict(total_epochs=2, steps_per_epoch=2, lr_decay_epoch=2, batch_size=2)
    base.update(kw)
    return TrainSchedule(**base)


def test_forward_single_hop_no_context(static_sequence):
    oracle, batch = _oracle_batch([static_sequence], 1)
    fwd = forward_track(oracle, batch, Mode.PROMPT, _sched(forward_length=1))
    assert oracle.encode_calls == 1 and oracle.context_lengths == [0]
    assert len(fwd.boxes) == 1


@pytest.mark.parametrize("mode", [Mode.PROMPT, Mode.NOISE])
def test_forward_context_from_second_hop(mode):
    seqs, _, _ = generate_corpus(2, 6, 0)
    oracle, batch = _oracle_batch(seqs, 3)
    forward_track(oracle, batch, mode, _sched(forward_length=3), k=8, generator=torch.Generator().manual_seed(0))
    assert oracle.context_lengths == [0, 8, 8]


def test_forward_oracle_boxes_equal_gt(static_sequence):
    oracle, batch = _oracle_batch([static_sequence], 2)
    fwd = forward_track(oracle, batch, Mode.PROMPT, _sched())
    gt = torch.as_tensor(static_sequence.gt_array())
    for i, boxes in enumerate(fwd.boxes):
        for b, idx in enumerate(batch.frame_indices[i]):
            assert torch.allclose(boxes[b], gt[idx], atol=1e-9)


def test_backward_single_hop_resets_context(static_sequence):
    oracle, batch = _oracle_batch([static_sequence], 2)
    sched = _sched(scale_jitter=0.0, center_jitter=0.0)
    fwd = forward_track(oracle, batch, Mode.PROMPT, sched)
    n = oracle.encode_calls
    bwd = backward_track(oracle, fwd, batch, Mode.PROMPT, sched)
    assert oracle.encode_calls == n + 1
    assert oracle.context_lengths[-1] == 0
    assert torch.equal(bwd.boxes[-1], batch.y0)


def test_backward_multi_hop_visits_frames_in_reverse():
    seqs, _, _ = generate_corpus(2, 8, 1)
    oracle, batch = _oracle_batch(seqs, 3)
    sched = _sched(forward_length=3, backward_steps=3)
    fwd = forward_track(oracle, batch, Mode.PROMPT, sched)
    bwd = backward_track(oracle, fwd, batch, Mode.PROMPT, sched)
    assert len(bwd.hops) == 3
    assert oracle.context_lengths[-3:] == [0, 8, 8]
    assert torch.allclose(bwd.boxes[-1], batch.y0, atol=1e-9)
    # intermediate hops land on the second and first unlabeled frames
    gt = {s.name: torch.as_tensor(s.gt_array()) for s in seqs}
    for hop_boxes, frames in zip(bwd.boxes[:2], (batch.frame_indices[1], batch.frame_indices[0])):
        for b, (sid, fi) in enumerate(zip(batch.seq_ids, frames)):
            assert torch.allclose(hop_boxes[b], gt[sid][fi], atol=1e-9)


def test_oracle_loss_vanishes_with_zero_weights(static_sequence):
    oracle, batch = _oracle_batch([static_sequence], 2)
    loss, record, _, _ = cycle_loss(oracle, batch, Mode.PROMPT, _sched(), DcaConfig(), LossWeights(0, 0))
    assert 0 <= loss.item() <= 1e-6


def test_backward_jittered_oracle_recovers_y0():
    seqs, _, _ = generate_corpus(4, 6, 3)
    oracle, batch = _oracle_batch(seqs, 2, batch_size=4)
    sched = _sched()
    fwd = forward_track(oracle, batch, Mode.PROMPT, sched)
    bwd = backward_track(oracle, fwd, batch, Mode.PROMPT, sched, generator=torch.Generator().manual_seed(1))
    assert torch.allclose(bwd.boxes[-1], batch.y0, atol=1e-9)
    # the crop itself moved
    assert not torch.allclose(bwd.hops[-1].centers, fwd.boxes[-1][:, :2])


def test_jitter_boxes():
    boxes = torch.tensor([[50.0, 60.0, 20.0, 10.0]] * 2000, dtype=torch.float64)
    assert jitter_boxes(boxes, 0.0, 0.0) is boxes
    out = jitter_boxes(boxes, 0.25, 2.0, torch.Generator().manual_seed(0))
    assert torch.allclose(out[:, 2] / out[:, 3], torch.full((2000,), 2.0, dtype=torch.float64))
    log_gain = torch.log(out[:, 2] / 20.0)
    assert abs(log_gain.std().item() - 0.25) < 0.02
    size = torch.sqrt(out[:, 2] * out[:, 3])
    rel = (out[:, :2] - boxes[:, :2]) / size.unsqueeze(-1)
    assert rel.abs().max() <= 1.0 and rel.abs().max() > 0.95
    again = jitter_boxes(boxes, 0.25, 2.0, torch.Generator().manual_seed(0))
    assert torch.equal(out, again)


def test_backward_search_region_is_larger(static_sequence):
    oracle, batch = _oracle_batch([static_sequence], 2)
    sched = _sched(scale_jitter=0.0, center_jitter=0.0)
    fwd = forward_track(oracle, batch, Mode.PROMPT, sched)
    bwd = backward_track(oracle, fwd, batch, Mode.PROMPT, sched)
    assert torch.allclose(bwd.hops[-1].sides, fwd.hops[-1].sides * 1.5)


def test_degenerate_boxes_clamped():
    c = Counters()
    out = clamp_degenerate(torch.tensor([[5.0, 5.0, 0.2, 3.0], [5.0, 5.0, 4.0, 4.0]], dtype=torch.float64), c)
    assert out[0, 2] == 1.0 and out[1, 2] == 4.0 and c.degenerate_boxes == 1


def test_context_mode_variants():
    sched = DcaSchedule(switch_epoch=3)
    assert [context_mode(e, DcaConfig(), sched) for e in (1, 3, 4)] == [Mode.PROMPT, Mode.PROMPT, Mode.NOISE]
    assert context_mode(1, DcaConfig(use_prompt=False), sched) == Mode.NONE
    assert context_mode(4, DcaConfig(use_prompt=False), sched) == Mode.NOISE
    assert context_mode(4, DcaConfig(use_noise=False), sched) == Mode.PROMPT
    assert context_mode(4, DcaConfig(learned_queries=True), sched) == Mode.QUERY


def _tiny_model(tiny_cfg, seed=0):
    torch.manual_seed(seed)
    return TrackerModel(tiny_cfg, 8)


@pytest.mark.parametrize("epoch,mode", [(1, "prompt"), (5, "noise")])
def test_train_step_finite_loss(tiny_cfg, epoch, mode):
    seqs, _, _ = generate_corpus(3, 6, 0)
    model = _tiny_model(tiny_cfg)
    sched = _sched()
    opt = make_optimizer(model, sched)
    batch = collate(sample_training_batch(seqs, 2, np.random.default_rng(0), 2))
    before = [p.detach().clone() for p in model.parameters()]
    rec = train_step(model, batch, epoch, opt, sched, DcaConfig(), LossWeights(), DcaSchedule(switch_epoch=2),
                     torch.Generator().manual_seed(0))
    assert rec["mode"] == mode
    assert math.isfinite(rec["loss"]) and rec["loss"] >= 0
    assert (rec["loss_noise"] > 0) == (mode == "noise")
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_noise_decoder_trains_only_in_noise_mode(tiny_cfg):
    seqs, _, _ = generate_corpus(3, 6, 0)
    model = _tiny_model(tiny_cfg)
    batch = collate(sample_training_batch(seqs, 2, np.random.default_rng(0), 2))
    for mode, expect in ((Mode.PROMPT, False), (Mode.NOISE, True)):
        model.zero_grad()
        loss, _, _, _ = cycle_loss(model, batch, mode, _sched(), DcaConfig(), LossWeights(),
                                   torch.Generator().manual_seed(0))
        loss.backward()
        g = model.noise_decoder.attn.in_proj_weight.grad
        assert (g is not None and g.abs().sum() > 0) == expect


def test_query_tokens_get_gradient_with_multi_hop_backward(tiny_cfg):
    seqs, _, _ = generate_corpus(3, 6, 0)
    model = _tiny_model(tiny_cfg)
    batch = collate(sample_training_batch(seqs, 2, np.random.default_rng(0), 2))
    loss, _, _, _ = cycle_loss(model, batch, Mode.QUERY, _sched(backward_steps=2), DcaConfig(), LossWeights())
    loss.backward()
    assert model.query_tokens.grad.abs().sum() > 0


def test_non_finite_loss_skips_step(tiny_cfg, monkeypatch):
    seqs, _, _ = generate_corpus(2, 6, 0)
    model = _tiny_model(tiny_cfg)
    sched = _sched()
    opt = make_optimizer(model, sched)
    batch = collate(sample_training_batch(seqs, 2, np.random.default_rng(0), 2))
    with torch.no_grad():
        model.head.cls[-1].bias.fill_(float("nan"))
    before = [p.detach().clone() for p in model.parameters()]
    c = Counters()
    rec = train_step(model, batch, 1, opt, sched, DcaConfig(), LossWeights(), DcaSchedule(1), None, c)
    assert rec.get("skipped") and c.skipped_steps == 1
    for a, b in zip(before, model.parameters()):
        assert torch.equal(a, b) or (torch.isnan(a).any() and torch.isnan(b).any())


def test_lr_decay():
    model = torch.nn.Linear(2, 2)

    class M(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.encoder = torch.nn.Linear(2, 2)
            self.head = torch.nn.Linear(2, 2)

        def backbone_parameters(self):
            return self.encoder.parameters()

        def other_parameters(self):
            return list(self.head.parameters())

    sched = TrainSchedule(total_epochs=20, lr_decay_epoch=16)
    opt = make_optimizer(M(), sched)
    set_epoch_lr(opt, 16, sched)
    assert [g["lr"] for g in opt.param_groups] == [2e-4, 1e-3]
    set_epoch_lr(opt, 17, sched)
    assert [g["lr"] for g in opt.param_groups] == pytest.approx([2e-5, 1e-4])
    del model


def test_step_seed_distinct():
    seeds = {step_seed(0, e, s) for e in range(1, 4) for s in range(50)}
    assert len(seeds) == 150
    assert step_seed(1, 1, 1) == step_seed(1, 1, 1)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(total_epochs=5, lr_decay_epoch=6).validate()
    with pytest.raises(ValueError):
        TrainSchedule(forward_length=0).validate()
    with pytest.raises(ValueError):
        TrainSchedule(scale_jitter=-0.1).validate()


def test_identical_seeds_identical_trajectories(tiny_cfg, tmp_path):
    seqs, _, _ = generate_corpus(4, 6, 0)
    sched = _sched(total_epochs=2, steps_per_epoch=50, lr_decay_epoch=2)
    logs = []
    for run in ("a", "b"):
        model = _tiny_model(tiny_cfg)
        train(model, seqs, sched, DcaConfig(switch_epoch=1), LossWeights(), tmp_path / run, seed=11)
        logs.append(read_log(tmp_path / run / "train_log.jsonl"))
    assert len(logs[0]) == 100
    assert [r["loss"] for r in logs[0]] == [r["loss"] for r in logs[1]]


def test_resume_continues_at_next_step(tiny_cfg, tmp_path):
    seqs, _, _ = generate_corpus(4, 6, 0)
    full = _sched(total_epochs=4, steps_per_epoch=3, lr_decay_epoch=3)
    train(_tiny_model(tiny_cfg), seqs, full, DcaConfig(), LossWeights(), tmp_path / "full", seed=2)

    # "interrupt" after two epochs: drop the last checkpoints and log lines
    part = tmp_path / "part"
    train(_tiny_model(tiny_cfg), seqs, full, DcaConfig(), LossWeights(), part, seed=2)
    for p in sorted((part / "checkpoints").glob("*.pt"))[2:]:
        p.unlink()
    lines = (part / "train_log.jsonl").read_text().splitlines()
    (part / "train_log.jsonl").write_text("\n".join(lines[:7]) + "\n")  # a partial third epoch

    train(_tiny_model(tiny_cfg, seed=99), seqs, full, DcaConfig(), LossWeights(), part, seed=2, resume=True)
    a = read_log(tmp_path / "full" / "train_log.jsonl")
    b = read_log(part / "train_log.jsonl")
    assert [r["step"] for r in b] == list(range(1, 13))
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_train_log_fields_and_checkpoints(tiny_cfg, tmp_path):
    seqs, _, _ = generate_corpus(3, 6, 0)
    train(_tiny_model(tiny_cfg), seqs, _sched(total_epochs=2, steps_per_epoch=2), DcaConfig(), LossWeights(),
          tmp_path, seed=0)
    rec = read_log(tmp_path / "train_log.jsonl")[0]
    assert {"step", "epoch", "mode", "loss", "loss_cls", "loss_l1", "loss_giou", "loss_noise",
            "degenerate_boxes"} <= set(rec)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0001.pt", "epoch_0002.pt"]
