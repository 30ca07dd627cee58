import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cycletrack import data
from cycletrack.data import (
    MissingGroundtruthError, NonContiguousFramesError, Occlusion, SceneSpec, SpecError, TrainSample,
    UnreadableImageError, generate, generate_corpus, load_dataset, load_sequence, random_scene,
    sample_training_batch, save_sequence,
)
from cycletrack.geometry import BBox, iou


def _mask_bbox(frame, background):
    diff = np.any(frame != background, axis=-1)
    ys, xs = np.nonzero(diff)
    return BBox.from_xywh(xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)


def test_zero_speed_boxes_identical():
    seq = generate(SceneSpec(speed=0.0, motion="linear", length=6), 0)
    assert len({b.astuple() for b in seq.full_annotations}) == 1


def test_linear_speed_exact():
    spec = SceneSpec(speed=3.0, direction=0.0, start=(40.0, 80.0), target_size=(20, 20), length=10)
    seq = generate(spec, 0)
    cx = [b.cx for b in seq.full_annotations]
    assert np.all(np.diff(cx) == 3.0)
    assert len({b.cy for b in seq.full_annotations}) == 1


def test_generate_is_deterministic():
    spec = SceneSpec(motion="random-walk", distractors=2, distractor_similarity=0.6, length=6)
    a, b = generate(spec, 5), generate(spec, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.full_annotations == b.full_annotations
    c = generate(spec, 6)
    assert not all(np.array_equal(x, y) for x, y in zip(a.frames, c.frames))


@pytest.mark.parametrize("shape", ["rect", "ellipse"])
@pytest.mark.parametrize("motion", ["linear", "sinusoidal", "random-walk"])
def test_gt_matches_rendered_target(shape, motion):
    spec = SceneSpec(target_shape=shape, motion=motion, speed=3.5, direction=0.7, length=12, texture_seed=9)
    seq = generate(spec, 1)
    background = np.clip(np.round(data._texture(np.random.default_rng(9), 160, 160)), 0, 255).astype(np.uint8)
    for frame, box in zip(seq.frames, seq.full_annotations):
        assert iou(_mask_bbox(frame, background), box) >= 0.95


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_scene_target_stays_inside(seed):
    rng = np.random.default_rng(seed)
    spec = random_scene(rng, 12)
    seq = generate(spec, seed)
    cw, ch = spec.canvas
    for b in seq.full_annotations:
        x0, y0, x1, y1 = b.corners()
        inside = (min(x1, cw) - max(x0, 0)) * (min(y1, ch) - max(y0, 0))
        assert inside >= 0.5 * b.area


def test_attributes_follow_spec():
    assert SceneSpec().attributes() == set()
    spec = SceneSpec(occlusions=[Occlusion(2, 3, 0.5)], speed=9.0, distractors=1)
    assert spec.attributes() == {"occlusion", "fast-motion", "distractor"}
    assert generate(spec, 0).attributes == spec.attributes()


def test_occluder_changes_target_pixels():
    base = SceneSpec(speed=0.0, length=5)
    occ = SceneSpec(speed=0.0, length=5, occlusions=[Occlusion(2, 3, 0.5)])
    a, b = generate(base, 0), generate(occ, 0)
    assert np.array_equal(a.frames[1], b.frames[1])
    assert not np.array_equal(a.frames[2], b.frames[2])
    assert a.full_annotations == b.full_annotations


@pytest.mark.parametrize("field,value", [
    ("target_size", (200, 20)), ("motion", "teleport"), ("target_shape", "star"), ("speed", -1.0),
    ("length", 0), ("distractor_similarity", 1.5), ("distractors", -1),
])
def test_invalid_specs_name_field(field, value):
    with pytest.raises(SpecError) as err:
        generate(SceneSpec(**{field: value}), 0)
    assert err.value.field == field


def test_spec_dict_round_trip():
    spec = random_scene(np.random.default_rng(0), 10)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError) as err:
        SceneSpec.from_dict({"colour": 1})
    assert err.value.field == "colour"


def test_save_load_round_trip(tmp_path):
    seq = generate(SceneSpec(length=5, occlusions=[Occlusion(1, 2, 0.3)]), 2)
    save_sequence(seq, tmp_path / "s")
    back = load_sequence(tmp_path / "s")
    assert all(np.array_equal(x, y) for x, y in zip(seq.frames, back.frames))
    assert back.full_annotations == seq.full_annotations
    assert back.first_annotation == seq.first_annotation
    assert back.attributes == seq.attributes and back.name == "s"


def test_single_frame_directory(tmp_path):
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "0001.png")
    (tmp_path / "groundtruth.txt").write_text("10,20,30,40\n")
    seq = load_sequence(tmp_path)
    assert len(seq) == 1
    assert seq.first_annotation.astuple() == (25, 40, 30, 40)


def test_first_frame_only_annotation(tmp_path):
    seq = generate(SceneSpec(length=3), 0)
    save_sequence(seq, tmp_path)
    (tmp_path / "groundtruth.txt").write_text("1,2,3,4\n")
    back = load_sequence(tmp_path)
    assert back.full_annotations is None and back.first_annotation == BBox.from_xywh(1, 2, 3, 4)


def test_load_errors_are_distinct(tmp_path):
    img = Image.fromarray(np.zeros((8, 8, 3), np.uint8))
    missing = tmp_path / "missing"
    missing.mkdir()
    img.save(missing / "0001.png")
    gap = tmp_path / "gap"
    gap.mkdir()
    img.save(gap / "0001.png")
    img.save(gap / "0003.png")
    (gap / "groundtruth.txt").write_text("1,1,2,2\n")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "0001.png").write_bytes(b"not a png")
    (bad / "groundtruth.txt").write_text("1,1,2,2\n")
    codes = set()
    for d, exc in ((missing, MissingGroundtruthError), (gap, NonContiguousFramesError), (bad, UnreadableImageError)):
        with pytest.raises(exc) as err:
            load_sequence(d)
        codes.add(err.value.code)
    assert len(codes) == 3


def test_load_dataset_sorted(tmp_path):
    seqs, _, _ = generate_corpus(3, 4, 0)
    for s in reversed(seqs):
        save_sequence(s, tmp_path / s.name)
    assert [s.name for s in load_dataset(tmp_path)] == ["seq0000", "seq0001", "seq0002"]
    with pytest.raises(data.DataError):
        load_dataset(tmp_path / "nope")


def test_single_window_on_short_sequence():
    seq = generate(SceneSpec(length=3), 0)
    batch = sample_training_batch([seq], 2, np.random.default_rng(0), batch_size=4)
    assert all(s.frame_indices == [1, 2] for s in batch)


def test_batches_deterministic():
    seqs, _, _ = generate_corpus(4, 6, 0)
    a = sample_training_batch(seqs, 2, np.random.default_rng(3), 5)
    b = sample_training_batch(seqs, 2, np.random.default_rng(3), 5)
    assert [(s.seq_id, s.frame_indices) for s in a] == [(s.seq_id, s.frame_indices) for s in b]


def test_samples_carry_no_later_labels():
    seqs, _, _ = generate_corpus(3, 6, 0)
    for s in sample_training_batch(seqs, 2, np.random.default_rng(0), 8):
        assert not hasattr(s, "full_annotations")
        assert set(vars(s)) == {"z0", "y0", "x_u", "seq_id", "frame_indices"}
        assert min(s.frame_indices) >= 1


def test_short_sequences_skipped(caplog):
    short = generate(SceneSpec(length=2), 0)
    ok = generate(SceneSpec(length=4), 0)
    ok.name = "ok"
    with caplog.at_level(logging.WARNING):
        batch = sample_training_batch([short, ok], 2, np.random.default_rng(0), 3)
    assert all(s.seq_id == "ok" for s in batch)
    assert "skipping" in caplog.text
    with pytest.raises(data.DataError):
        sample_training_batch([short], 2, np.random.default_rng(0))


def test_train_sample_needs_frames():
    with pytest.raises(ValueError):
        TrainSample(np.zeros((4, 4, 3)), BBox(1, 1, 1, 1), [], "x", [])
