"""Synthetic video generation, annotation I/O, and the crop/resize pipeline."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .geometry import BoundingBox, PixelBox, crop_window

ANNOTATION_NAME = "groundtruth.txt"
ABSENCE_NAME = "absence.txt"
FRAME_DIR = "frames"


@dataclass(frozen=True)
class SyntheticVideoSpec:
    """Recipe for one synthetic moving-object video; deterministic given seed."""

    frames: int = 40
    size: int = 96
    shape: str = "ellipse"  # "rectangle" or "ellipse"
    min_object: float = 12.0
    max_object: float = 28.0
    speed: float = 2.0
    motion_noise: float = 0.3
    scale_drift: float = 0.01
    occluder_prob: float = 0.0
    texture_cells: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.size < 16:
            raise ValueError("degenerate video spec")
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError("object shape must be 'rectangle' or 'ellipse'")
        if not 0 < self.min_object <= self.max_object < self.size:
            raise ValueError("object size range must fit the frame")


@dataclass
class AnnotatedSequence:
    """Frames plus one ground-truth box per frame, with optional absence flags."""

    name: str
    boxes: np.ndarray  # (T, 4) x, y, w, h in pixels
    frame_size: tuple  # (H, W)
    frames: np.ndarray | None = None  # (T, H, W, 3) uint8 when in memory
    frame_paths: list | None = None
    absent: np.ndarray | None = None

    def __post_init__(self):
        n_frames = len(self.frames) if self.frames is not None else len(self.frame_paths)
        if n_frames != len(self.boxes):
            raise ValueError(f"{self.name}: {n_frames} frames but {len(self.boxes)} annotations")
        if self.absent is None:
            self.absent = np.zeros(len(self.boxes), dtype=bool)

    def __len__(self) -> int:
        return len(self.boxes)

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i]
        return np.asarray(Image.open(self.frame_paths[i]).convert("RGB"))

    def materialize(self) -> "AnnotatedSequence":
        """Decode all frames into memory (training touches frames repeatedly)."""
        if self.frames is None:
            self.frames = np.stack([
                np.asarray(Image.open(p).convert("RGB")) for p in self.frame_paths])
        return self

    def pixel_box(self, i: int) -> PixelBox:
        x, y, w, h = self.boxes[i]
        H, W = self.frame_size
        return PixelBox(float(x), float(y), float(w), float(h), W, H)


def generate_synthetic(spec: SyntheticVideoSpec, name: str = "synthetic") -> AnnotatedSequence:
    """Render a textured background with one moving object; constant velocity
    with Gaussian perturbation, log-scale drift, wall bounces, and optional
    occluders drawn over the target (flagged as absent)."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    cells = spec.texture_cells
    grid = rng.uniform(0.15, 0.55, (cells, cells, 3))
    pad = grid.reshape(-1, 3).mean(axis=0)
    background = kernels.crop_bilinear(grid, 0.0, 0.0, float(cells), size, pad)

    bright = rng.random() < 0.5
    color = rng.uniform(0.75, 1.0, 3) if bright else rng.uniform(0.0, 0.2, 3)
    occ_color = pad * 0.5

    w = rng.uniform(spec.min_object, spec.max_object)
    h = rng.uniform(spec.min_object, spec.max_object)
    x = rng.uniform(1.0, size - w - 1.0)
    y = rng.uniform(1.0, size - h - 1.0)
    vx = rng.uniform(-spec.speed, spec.speed)
    vy = rng.uniform(-spec.speed, spec.speed)

    frames = np.empty((spec.frames, size, size, 3), dtype=np.uint8)
    boxes = np.empty((spec.frames, 4), dtype=np.float64)
    absent = np.zeros(spec.frames, dtype=bool)
    for t in range(spec.frames):
        img = background.copy()
        if spec.shape == "ellipse":
            kernels.fill_ellipse(img, x + w / 2.0, y + h / 2.0, w / 2.0, h / 2.0, color)
        else:
            kernels.fill_rect(img, x, y, x + w, y + h, color)
        boxes[t] = (x, y, w, h)
        if spec.occluder_prob > 0 and rng.random() < spec.occluder_prob:
            ow = w * rng.uniform(0.7, 1.2)
            oh = h * rng.uniform(0.7, 1.2)
            ox = x + w / 2.0 + rng.uniform(-0.3, 0.3) * w - ow / 2.0
            oy = y + h / 2.0 + rng.uniform(-0.3, 0.3) * h - oh / 2.0
            kernels.fill_rect(img, ox, oy, ox + ow, oy + oh, occ_color)
            absent[t] = True
        frames[t] = np.clip(img * 255.0, 0.0, 255.0).astype(np.uint8)

        vx += rng.normal(0.0, spec.motion_noise)
        vy += rng.normal(0.0, spec.motion_noise)
        scale = math.exp(rng.normal(0.0, spec.scale_drift))
        w = min(max(w * scale, spec.min_object), spec.max_object * 1.25)
        h = min(max(h * scale, spec.min_object), spec.max_object * 1.25)
        x += vx
        y += vy
        if x < 1.0 or x + w > size - 1.0:
            vx = -vx
            x = min(max(x, 1.0), size - w - 1.0)
        if y < 1.0 or y + h > size - 1.0:
            vy = -vy
            y = min(max(y, 1.0), size - h - 1.0)
    return AnnotatedSequence(name=name, boxes=boxes, frame_size=(size, size),
                             frames=frames, absent=absent)


# ---------------------------------------------------------------------------
# annotation files: one "x,y,w,h" line per frame, pixel units


def read_annotations(path: str) -> np.ndarray:
    boxes = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 comma-separated values")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            boxes.append(vals)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def write_annotations(path: str, boxes: np.ndarray):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    with open(path, "w", encoding="ascii") as fh:
        for b in boxes:
            fh.write("%.4f,%.4f,%.4f,%.4f\n" % tuple(b))


write_predictions = write_annotations


def write_confidences(path: str, confidences) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for c in confidences:
            fh.write("%.6f\n" % float(c))


def save_sequence(seq: AnnotatedSequence, out_dir: str):
    frame_dir = os.path.join(out_dir, FRAME_DIR)
    os.makedirs(frame_dir, exist_ok=True)
    for i in range(len(seq)):
        Image.fromarray(seq.frame(i)).save(os.path.join(frame_dir, "%08d.png" % i))
    write_annotations(os.path.join(out_dir, ANNOTATION_NAME), seq.boxes)
    if seq.absent is not None and seq.absent.any():
        with open(os.path.join(out_dir, ABSENCE_NAME), "w", encoding="ascii") as fh:
            for flag in seq.absent:
                fh.write("%d\n" % int(flag))


def load_sequence(seq_dir: str) -> AnnotatedSequence:
    boxes = read_annotations(os.path.join(seq_dir, ANNOTATION_NAME))
    frame_dir = os.path.join(seq_dir, FRAME_DIR)
    paths = sorted(os.path.join(frame_dir, f) for f in os.listdir(frame_dir)
                   if f.lower().endswith(".png"))
    if len(paths) != len(boxes):
        raise ValueError(f"{seq_dir}: {len(paths)} frames but {len(boxes)} annotation lines")
    with Image.open(paths[0]) as im:
        W, H = im.size
    absent = None
    absence_path = os.path.join(seq_dir, ABSENCE_NAME)
    if os.path.exists(absence_path):
        with open(absence_path, "r", encoding="ascii") as fh:
            absent = np.array([bool(int(line.strip())) for line in fh if line.strip()],
                              dtype=bool)
    return AnnotatedSequence(name=os.path.basename(os.path.normpath(seq_dir)),
                             boxes=boxes, frame_size=(H, W), frame_paths=paths,
                             absent=absent)


def list_sequences(dataset_dir: str) -> list:
    """Paths of all sequence directories (those holding a groundtruth file)."""
    if os.path.exists(os.path.join(dataset_dir, ANNOTATION_NAME)):
        return [dataset_dir]
    out = []
    for entry in sorted(os.listdir(dataset_dir)):
        sub = os.path.join(dataset_dir, entry)
        if os.path.isdir(sub) and os.path.exists(os.path.join(sub, ANNOTATION_NAME)):
            out.append(sub)
    if not out:
        raise ValueError(f"no sequences found under {dataset_dir}")
    return out


def generate_dataset(out_dir: str, videos: int, frames: int, seed: int,
                     size: int = 96, occluder_prob: float = 0.0) -> list:
    """Write `videos` synthetic sequences under out_dir; returns their paths."""
    seeds = np.random.SeedSequence(seed).spawn(videos)
    paths = []
    for i, ss in enumerate(seeds):
        spec = SyntheticVideoSpec(frames=frames, size=size,
                                  shape="ellipse" if i % 2 == 0 else "rectangle",
                                  occluder_prob=occluder_prob,
                                  seed=int(ss.generate_state(1)[0]))
        seq = generate_synthetic(spec, name="video_%03d" % i)
        seq_dir = os.path.join(out_dir, seq.name)
        save_sequence(seq, seq_dir)
        paths.append(seq_dir)
    return paths


# ---------------------------------------------------------------------------
# cropping


@dataclass(frozen=True)
class CropTransform:
    """Affine map between frame pixels and normalized crop coordinates."""

    x0: float
    y0: float
    side: float
    frame_width: int
    frame_height: int

    def frame_to_crop(self, box: PixelBox) -> BoundingBox:
        return BoundingBox((box.x - self.x0) / self.side,
                           (box.y - self.y0) / self.side,
                           (box.x + box.w - self.x0) / self.side,
                           (box.y + box.h - self.y0) / self.side)

    def crop_to_frame(self, box: BoundingBox) -> PixelBox:
        x1 = self.x0 + box.x1 * self.side
        y1 = self.y0 + box.y1 * self.side
        return PixelBox(x1, y1, (box.x2 - box.x1) * self.side,
                        (box.y2 - box.y1) * self.side,
                        self.frame_width, self.frame_height)


def make_crop(frame: np.ndarray, window: PixelBox, out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Extract a square window (mean-padded outside the frame) resized to
    out_size; returns the [0, 1] float crop and the exact affine transform."""
    if window.w <= 0 or window.h <= 0:
        raise ValueError("crop window must have positive size")
    img = np.asarray(frame, dtype=np.float64)
    if frame.dtype == np.uint8:
        img = img / 255.0
    pad = img.reshape(-1, img.shape[-1]).mean(axis=0)
    crop = kernels.crop_bilinear(img, window.x, window.y, window.w, out_size, pad)
    tf = CropTransform(window.x, window.y, window.w, window.frame_width, window.frame_height)
    return crop, tf


def to_model_input(crop: np.ndarray) -> np.ndarray:
    """Map a [0, 1] crop to the [-1, 1] range the patch embedding expects."""
    return crop * 2.0 - 1.0


# ---------------------------------------------------------------------------
# training samples


@dataclass(frozen=True)
class SamplePair:
    """Stage-1 sample: one template crop, one search crop, GT in crop coords."""

    template: np.ndarray
    search: np.ndarray
    gt_box: BoundingBox
    search_transform: CropTransform


@dataclass(frozen=True)
class SampleClip:
    """Stage-2 sample: a consecutive frame range rolled out by the trainer."""

    seq: AnnotatedSequence
    start: int
    length: int


@dataclass(frozen=True)
class PipelineConfig:
    template_size: int = 32
    search_size: int = 64
    template_factor: float = 2.0
    search_factor: float = 4.0
    jitter: float = 0.1


def jittered_window(gt: PixelBox, factor: float, jitter: float, rng) -> PixelBox:
    """Context window around gt with the center and scale perturbed."""
    win = crop_window(gt, factor)
    if jitter <= 0:
        return win
    side = win.w * (1.0 + rng.uniform(-jitter, jitter))
    cx = win.x + win.w / 2.0 + rng.uniform(-jitter, jitter) * win.w
    cy = win.y + win.h / 2.0 + rng.uniform(-jitter, jitter) * win.h
    return PixelBox(cx - side / 2.0, cy - side / 2.0, side, side,
                    gt.frame_width, gt.frame_height)


def make_pair(seq: AnnotatedSequence, cfg: PipelineConfig, rng) -> SamplePair:
    if len(seq) < 2:
        raise ValueError("sequence too short for pair sampling")
    a, b = rng.choice(len(seq), size=2, replace=False)
    template, _ = make_crop(seq.frame(int(a)),
                            crop_window(seq.pixel_box(int(a)), cfg.template_factor),
                            cfg.template_size)
    gt_b = seq.pixel_box(int(b))
    window = jittered_window(gt_b, cfg.search_factor, cfg.jitter, rng)
    search, tf = make_crop(seq.frame(int(b)), window, cfg.search_size)
    return SamplePair(template=template, search=search,
                      gt_box=tf.frame_to_crop(gt_b), search_transform=tf)


def make_clip(seq: AnnotatedSequence, clip_len: int, rng) -> SampleClip:
    if len(seq) < clip_len:
        raise ValueError("sequence too short for clip sampling")
    start = int(rng.integers(0, len(seq) - clip_len + 1))
    return SampleClip(seq=seq, start=start, length=clip_len)


def build_training_sample(seq: AnnotatedSequence, stage: str, rng,
                          cfg: PipelineConfig | None = None, clip_len: int = 8):
    cfg = cfg or PipelineConfig()
    if stage == "pair":
        return make_pair(seq, cfg, rng)
    if stage == "sequential":
        return make_clip(seq, clip_len, rng)
    raise ValueError("stage must be 'pair' or 'sequential'")
