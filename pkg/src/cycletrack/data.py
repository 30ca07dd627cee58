"""Synthetic video sequences and on-disk sequence I/O."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .geometry import BBox

log = logging.getLogger(__name__)

MOTIONS = ("linear", "sinusoidal", "random-walk")
SHAPES = ("rect", "ellipse")
FAST_MOTION_PX = 8.0


class DataError(Exception):
    code = "data"


class MissingGroundtruthError(DataError):
    code = "missing-groundtruth"


class UnreadableImageError(DataError):
    code = "unreadable-image"


class NonContiguousFramesError(DataError):
    code = "non-contiguous-frames"


class SpecError(DataError):
    code = "invalid-spec"

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Occlusion:
    start: int
    end: int  # inclusive
    coverage: float = 0.5


@dataclass
class SceneSpec:
    canvas: tuple = (160, 160)               # (width, height)
    target_size: tuple = (28, 24)            # (w, h) px
    target_shape: str = "rect"
    target_color: tuple = (220, 60, 40)
    pattern_color: tuple = (250, 230, 80)
    motion: str = "linear"
    speed: float = 3.0                       # px / frame
    direction: float = 0.0                   # radians, linear/sinusoidal heading
    amplitude: float = 10.0                  # sinusoidal lateral amplitude, px
    start: tuple | None = None               # initial center; None = canvas center
    distractors: int = 0
    distractor_similarity: float = 0.0
    occlusions: list = field(default_factory=list)
    texture_seed: int = 0
    length: int = 20

    def validate(self):
        cw, ch = self.canvas
        tw, th = self.target_size
        if cw <= 0 or ch <= 0:
            raise SpecError("canvas", "must be positive")
        if tw < 2 or th < 2:
            raise SpecError("target_size", "must be at least 2 px")
        if tw > cw or th > ch:
            raise SpecError("target_size", f"{self.target_size} larger than canvas {self.canvas}")
        if self.target_shape not in SHAPES:
            raise SpecError("target_shape", f"must be one of {SHAPES}")
        if self.motion not in MOTIONS:
            raise SpecError("motion", f"must be one of {MOTIONS}")
        if self.speed < 0:
            raise SpecError("speed", "must be >= 0")
        if self.length < 1:
            raise SpecError("length", "must be >= 1")
        if not 0 <= self.distractor_similarity <= 1:
            raise SpecError("distractor_similarity", "must lie in [0, 1]")
        if self.distractors < 0:
            raise SpecError("distractors", "must be >= 0")
        for occ in self.occlusions:
            occ = _as_occlusion(occ)
            if occ.start > occ.end or not 0 < occ.coverage <= 1:
                raise SpecError("occlusions", f"bad occluder event {occ}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown scene field")
        d = dict(d)
        for key in ("canvas", "target_size", "target_color", "pattern_color", "start"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        d["occlusions"] = [_as_occlusion(o) for o in d.get("occlusions", [])]
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self):
        d = asdict(self)
        for key in ("canvas", "target_size", "target_color", "pattern_color", "start"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    def attributes(self):
        tags = set()
        if self.occlusions:
            tags.add("occlusion")
        if self.speed >= FAST_MOTION_PX:
            tags.add("fast-motion")
        if self.distractors > 0:
            tags.add("distractor")
        return tags


def _as_occlusion(o):
    if isinstance(o, Occlusion):
        return o
    if isinstance(o, dict):
        return Occlusion(**o)
    return Occlusion(*o)


@dataclass
class FrameSequence:
    frames: list                      # HxWx3 uint8 arrays
    first_annotation: BBox
    full_annotations: list | None = None
    attributes: set = field(default_factory=set)
    name: str = ""

    def __len__(self):
        return len(self.frames)

    def gt_array(self):
        """Full annotations as an ``(T, 4)`` center-size array."""
        return np.array([b.astuple() for b in self.full_annotations], dtype=np.float64)


@dataclass
class TrainSample:
    """One labeled frame plus ``L`` unlabeled frames; no later-frame labels."""
    z0: np.ndarray
    y0: BBox
    x_u: list
    seq_id: str
    frame_indices: list

    def __post_init__(self):
        if len(self.x_u) < 1:
            raise ValueError("a train sample needs at least one unlabeled frame")


# ---------------------------------------------------------------------------
# generation

def _texture(rng, width, height):
    noise = rng.normal(size=(height, width, 3))
    coarse = gaussian_filter(noise, sigma=(6, 6, 0))
    fine = gaussian_filter(rng.normal(size=(height, width, 3)), sigma=(1.2, 1.2, 0))
    base = rng.uniform(70, 170, size=3)
    img = base + 40 * coarse / (coarse.std() + 1e-8) + 12 * fine / (fine.std() + 1e-8)
    return np.clip(img, 0, 255)


def _shape_mask(shape, w, h):
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    # pixel centers inside the inscribed ellipse; reaches every edge pixel row/column
    return ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0


def _paint(img, x0, y0, mask, color, pattern=None):
    """Paint ``mask`` with its top-left at integer ``(x0, y0)``, clipped to the canvas.

    ``pattern`` is an optional ``(mask, color)`` pair painted inside ``mask``.
    """
    h, w = mask.shape
    H, W = img.shape[:2]
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x0 + w, W), min(y0 + h, H)
    if cx0 >= cx1 or cy0 >= cy1:
        return
    sub = mask[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
    region = img[cy0:cy1, cx0:cx1]
    region[sub] = color
    if pattern is not None:
        pat_mask, pat_color = pattern
        region[pat_mask[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0] & sub] = pat_color


def _make_pattern(w, h, color, kind):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        pat = (xx // max(w // 4, 1)) % 2 == 0
    elif kind == 1:
        pat = np.abs(yy - h / 2 + 0.5) < max(h / 6, 1)
    else:
        pat = (np.abs(yy - h / 2 + 0.5) < max(h / 7, 1)) | (np.abs(xx - w / 2 + 0.5) < max(w / 7, 1))
    return pat, tuple(float(c) for c in color)


def _trajectory(spec: SceneSpec, rng):
    cw, ch = spec.canvas
    tw, th = spec.target_size
    lo = np.array([tw / 2, th / 2])
    hi = np.array([cw - tw / 2, ch - th / 2])
    start = np.array(spec.start if spec.start is not None else (cw / 2, ch / 2), dtype=np.float64)
    heading = np.array([math.cos(spec.direction), math.sin(spec.direction)])
    normal = np.array([-heading[1], heading[0]])
    pts = []
    pos = start.copy()
    vel = heading * spec.speed
    for t in range(spec.length):
        if spec.motion == "linear":
            if t > 0:
                pos = pos + vel
                # reflect at the borders so the target never leaves the canvas
                for d in range(2):
                    if pos[d] < lo[d]:
                        pos[d] = 2 * lo[d] - pos[d]
                        vel[d] = -vel[d]
                    elif pos[d] > hi[d]:
                        pos[d] = 2 * hi[d] - pos[d]
                        vel[d] = -vel[d]
            p = pos
        elif spec.motion == "sinusoidal":
            p = start + heading * spec.speed * t + normal * spec.amplitude * math.sin(2 * math.pi * t / 16)
        else:
            if t > 0:
                ang = rng.uniform(0, 2 * math.pi)
                pos = pos + spec.speed * np.array([math.cos(ang), math.sin(ang)])
            p = pos
        pts.append(np.clip(p, lo, hi) if spec.motion != "linear" else p.copy())
    return np.array(pts)


def _lerp_color(a, b, t):
    return tuple(float(x) * (1 - t) + float(y) * t for x, y in zip(a, b))


def generate(spec: SceneSpec, seed: int = 0) -> FrameSequence:
    """Render ``spec`` deterministically.

    Target boxes are snapped to integer pixel edges, so the recorded ground
    truth matches the painted pixels exactly.
    """
    spec.validate()
    rng = np.random.default_rng([seed, spec.texture_seed])
    cw, ch = spec.canvas
    tw, th = (int(round(v)) for v in spec.target_size)
    background = _texture(np.random.default_rng(spec.texture_seed), cw, ch)
    centers = _trajectory(spec, rng)

    target_mask = _shape_mask(spec.target_shape, tw, th)
    pattern = _make_pattern(tw, th, spec.pattern_color, int(rng.integers(3)))

    # distractors: params interpolated from random toward the target's
    distractors = []
    for _ in range(spec.distractors):
        s = spec.distractor_similarity
        rand_color = tuple(rng.uniform(0, 255, size=3))
        dw = int(round((1 - s) * rng.uniform(12, 40) + s * tw))
        dh = int(round((1 - s) * rng.uniform(12, 40) + s * th))
        shape = spec.target_shape if rng.uniform() < 0.5 + s / 2 else str(rng.choice(SHAPES))
        d = {
            "mask": _shape_mask(shape, dw, dh),
            "color": _lerp_color(rand_color, spec.target_color, s),
            "pattern": _make_pattern(dw, dh, _lerp_color(tuple(rng.uniform(0, 255, 3)), spec.pattern_color, s),
                                     int(rng.integers(3))) if s > 0.5 else None,
            "pos": np.array([rng.uniform(dw / 2, cw - dw / 2), rng.uniform(dh / 2, ch - dh / 2)]),
            "speed": rng.uniform(0.5, 1.0) * max(spec.speed, 1.0),
        }
        distractors.append(d)

    occlusions = [_as_occlusion(o) for o in spec.occlusions]
    occluder_color = tuple(np.clip(background.mean(axis=(0, 1)) + rng.uniform(-30, 30, 3), 0, 255))

    frames, boxes = [], []
    for t in range(spec.length):
        img = background.copy()
        for d in distractors:
            if t > 0:
                ang = rng.uniform(0, 2 * math.pi)
                dh_, dw_ = d["mask"].shape
                d["pos"] = np.clip(d["pos"] + d["speed"] * np.array([math.cos(ang), math.sin(ang)]),
                                   [dw_ / 2, dh_ / 2], [cw - dw_ / 2, ch - dh_ / 2])
            dh_, dw_ = d["mask"].shape
            _paint(img, int(round(d["pos"][0] - dw_ / 2)), int(round(d["pos"][1] - dh_ / 2)),
                   d["mask"], d["color"], d["pattern"])
        x0 = int(round(centers[t, 0] - tw / 2))
        y0 = int(round(centers[t, 1] - th / 2))
        _paint(img, x0, y0, target_mask, spec.target_color, pattern)
        for occ in occlusions:
            if occ.start <= t <= occ.end:
                ow = max(1, int(round(tw * occ.coverage)))
                _paint(img, x0 - 2, y0 - 2, np.ones((th + 4, ow + 2), dtype=bool), occluder_color)
        frames.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
        boxes.append(BBox(x0 + tw / 2, y0 + th / 2, float(tw), float(th)))
    return FrameSequence(frames, boxes[0], boxes, spec.attributes())


def random_scene(rng: np.random.Generator, length: int, canvas=(160, 160), max_speed=4.0,
                 p_distractor=0.3, p_occlusion=0.15) -> SceneSpec:
    """Draw a scene from the desk-scale benchmark distribution."""
    cw, ch = canvas
    tw, th = (int(v) for v in rng.integers(18, 37, size=2))
    motion = str(rng.choice(MOTIONS))
    margin = np.array([tw, th])
    start = tuple(float(v) for v in rng.uniform(margin, np.array(canvas) - margin))
    occlusions = []
    if length > 4 and rng.uniform() < p_occlusion:
        s = int(rng.integers(1, length - 1))
        occlusions.append(Occlusion(s, min(length - 1, s + int(rng.integers(1, 4))),
                                    float(rng.uniform(0.2, 0.5))))
    return SceneSpec(
        canvas=tuple(canvas),
        target_size=(tw, th),
        target_shape=str(rng.choice(SHAPES)),
        target_color=tuple(int(v) for v in rng.integers(0, 256, 3)),
        pattern_color=tuple(int(v) for v in rng.integers(0, 256, 3)),
        motion=motion,
        speed=float(rng.uniform(0, max_speed)),
        direction=float(rng.uniform(0, 2 * math.pi)),
        amplitude=float(rng.uniform(0, 12)),
        start=start,
        distractors=int(rng.integers(1, 3)) if rng.uniform() < p_distractor else 0,
        distractor_similarity=float(rng.uniform(0, 0.8)),
        occlusions=occlusions,
        texture_seed=int(rng.integers(2 ** 31)),
        length=length,
    )


def generate_corpus(count, length, seed, canvas=(160, 160), **kw):
    """``count`` random sequences; returns ``(sequences, specs, seeds)``."""
    rng = np.random.default_rng(seed)
    seqs, specs, seeds = [], [], []
    for i in range(count):
        spec = random_scene(rng, length, canvas, **kw)
        s = int(rng.integers(2 ** 31))
        seq = generate(spec, s)
        seq.name = f"seq{i:04d}"
        seqs.append(seq)
        specs.append(spec)
        seeds.append(s)
    return seqs, specs, seeds


# ---------------------------------------------------------------------------
# disk I/O

def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def save_sequence(seq: FrameSequence, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        Image.fromarray(frame).save(directory / f"{i:04d}.png")
    boxes = seq.full_annotations if seq.full_annotations is not None else [seq.first_annotation]
    lines = [",".join(_fmt(v) for v in b.to_xywh()) for b in boxes]
    (directory / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    (directory / "attributes.txt").write_text(",".join(sorted(seq.attributes)) + "\n")


_FRAME_RE = re.compile(r"^(\d+)\.png$")


def load_sequence(directory) -> FrameSequence:
    directory = Path(directory)
    gt_path = directory / "groundtruth.txt"
    if not gt_path.exists():
        raise MissingGroundtruthError(f"{gt_path} not found")
    indexed = []
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indexed.append((int(m.group(1)), p))
    indexed.sort()
    if not indexed:
        raise NonContiguousFramesError(f"no frames in {directory}")
    expected = list(range(indexed[0][0], indexed[0][0] + len(indexed)))
    if [i for i, _ in indexed] != expected or indexed[0][0] != 1:
        raise NonContiguousFramesError(f"frame indices in {directory} are not 1..N")
    frames = []
    for _, p in indexed:
        try:
            with Image.open(p) as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
        except Exception as exc:  # PIL raises several types
            raise UnreadableImageError(f"{p}: {exc}") from exc
    rows = [line for line in gt_path.read_text().splitlines() if line.strip()]
    if not rows:
        raise MissingGroundtruthError(f"{gt_path} is empty")
    boxes = []
    for line in rows:
        vals = [float(v) for v in re.split(r"[,\s]+", line.strip())]
        if len(vals) != 4:
            raise MissingGroundtruthError(f"malformed annotation line {line!r}")
        boxes.append(BBox.from_xywh(*vals))
    full = boxes if len(boxes) == len(frames) else None
    attrs = set()
    attr_path = directory / "attributes.txt"
    if attr_path.exists():
        attrs = {a.strip() for a in attr_path.read_text().split(",") if a.strip()}
    return FrameSequence(frames, boxes[0], full, attrs, directory.name)


def load_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} not found")
    seqs = [load_sequence(p) for p in sorted(directory.iterdir()) if p.is_dir()]
    if not seqs:
        raise DataError(f"no sequences under {directory}")
    return seqs


# ---------------------------------------------------------------------------
# training batches

def sample_training_batch(sequences, L: int, rng: np.random.Generator, batch_size: int = 1):
    """Frame 0 as the labeled source plus a random window of ``L`` later frames.

    Only ``first_annotation`` is read; later-frame labels are never touched.
    """
    usable = []
    for i, seq in enumerate(sequences):
        if len(seq.frames) >= L + 1:
            usable.append(i)
        else:
            log.warning("skipping sequence %s: %d frames < %d", seq.name or i, len(seq.frames), L + 1)
    if not usable:
        raise DataError(f"no sequence has the {L + 1} frames a sample needs")
    batch = []
    for _ in range(batch_size):
        seq = sequences[usable[int(rng.integers(len(usable)))]]
        start = int(rng.integers(1, len(seq.frames) - L + 1))
        idx = list(range(start, start + L))
        batch.append(TrainSample(seq.frames[0], seq.first_annotation, [seq.frames[i] for i in idx],
                                 seq.name, idx))
    return batch


def pixel_stats(sequences, max_frames=2000):
    """Per-channel mean and std over (a subsample of) the corpus frames."""
    frames = [f for seq in sequences for f in seq.frames][:max_frames]
    stack = np.stack([f.reshape(-1, 3) for f in frames]).reshape(-1, 3).astype(np.float64)
    return stack.mean(0), stack.std(0) + 1e-6
