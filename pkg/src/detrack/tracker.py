"""Inference loop: crop, denoise, refine, decode, and update both memories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import data as data_mod
from . import nn
from .data import AnnotatedSequence, CropTransform, make_crop, to_model_input
from .geometry import BoundingBox, PixelBox, crop_window
from .memory import TrajectoryMemory, VisualMemory
from .model import DeTrackModel
from .noise import add_noise, make_schedule
from .vocab import CoordLogits, decode_box, quantize


@dataclass(frozen=True)
class TrackerConfig:
    template_size: int = 32
    search_size: int = 64
    template_factor: float = 2.0
    search_factor: float = 4.0
    visual_len: int = 3  # total templates, fixed one included
    traj_len: int = 7
    sigma1: float = 0.75
    sigma2: float = 0.9
    update_mode: str = "gated"
    multi_pass: int = 1
    inject_noise_t: int = 0  # debug: noise the previous-box input at this timestep
    noise_t_max: int = 1000
    noise_beta_start: float = 1e-4
    noise_beta_end: float = 0.02
    seed: int = 0

    @staticmethod
    def from_flat(cfg: dict, multi_pass: int = 1, update_mode: str | None = None,
                  inject_noise_t: int = 0) -> "TrackerConfig":
        return TrackerConfig(
            template_size=cfg["data.template_size"], search_size=cfg["data.search_size"],
            template_factor=cfg["data.template_factor"],
            search_factor=cfg["data.search_factor"],
            visual_len=cfg["memory.visual_len"], traj_len=cfg["memory.traj_len"],
            sigma1=cfg["memory.sigma1"], sigma2=cfg["memory.sigma2"],
            update_mode=update_mode or cfg["memory.update_mode"],
            multi_pass=multi_pass, inject_noise_t=inject_noise_t,
            noise_t_max=cfg["noise.T_max"], noise_beta_start=cfg["noise.beta_start"],
            noise_beta_end=cfg["noise.beta_end"], seed=cfg["run.seed"])


@dataclass
class TrackerState:
    visual: VisualMemory
    traj: TrajectoryMemory
    prev: PixelBox
    t: int
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass
class FrameResult:
    box: PixelBox
    s1: float
    s2: float
    degenerate: bool
    trace: object


def _template_crop(model_size: int, factor: float, frame: np.ndarray, box: PixelBox):
    crop, _ = make_crop(frame, crop_window(box, factor), model_size)
    return crop


def init(model: DeTrackModel, frame: np.ndarray, gt_box: PixelBox,
         cfg: TrackerConfig) -> TrackerState:
    """Seed both memories from the first frame and its ground-truth box."""
    if gt_box.area() <= 0:
        raise ValueError("initial box must have positive area")
    template = _template_crop(cfg.template_size, cfg.template_factor, frame, gt_box)
    visual = VisualMemory(n_dynamic=cfg.visual_len - 1, sigma1=cfg.sigma1, sigma2=cfg.sigma2)
    visual.initialize(template, frame_index=1)
    traj = TrajectoryMemory(capacity=cfg.traj_len)
    traj.push(gt_box.to_normalized())
    return TrackerState(visual=visual, traj=traj, prev=gt_box, t=1,
                        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF4A3])))


def _box_tokens(state: TrackerState, tf: CropTransform, cfg: TrackerConfig,
                bins: int) -> np.ndarray:
    coords = np.clip(tf.frame_to_crop(state.prev).as_array(), 0.0, 1.0)
    if cfg.inject_noise_t > 0:
        schedule = make_schedule(cfg.noise_t_max, cfg.noise_beta_start, cfg.noise_beta_end)
        coords = add_noise(coords, cfg.inject_noise_t, schedule, state.rng).x_noisy
    return quantize(coords, bins)


def _traj_tokens(state: TrackerState, tf: CropTransform, bins: int) -> np.ndarray:
    rows = []
    for bb in state.traj.as_list():
        px = PixelBox.from_normalized(bb, tf.frame_width, tf.frame_height)
        rows.append(quantize(tf.frame_to_crop(px).as_array(), bins))
    return np.stack(rows)[None]


def track_frame(model: DeTrackModel, state: TrackerState, frame: np.ndarray,
                cfg: TrackerConfig, multi_pass: int | None = None) -> FrameResult:
    """Track one frame, mutate the state, and return the pixel-space box with
    its quality scores. multi_pass > 1 re-runs the forward pass, feeding the
    decoded box back in as the next pass's input box."""
    K = cfg.multi_pass if multi_pass is None else multi_pass
    if K < 1:
        raise ValueError("multi-pass count must be >= 1")
    bins = model.vocab.bins
    window = crop_window(state.prev, cfg.search_factor)
    search, tf = make_crop(frame, window, cfg.search_size)
    search_in = to_model_input(search)[None]
    templates = to_model_input(np.stack(state.visual.templates_view()))[None]
    tokens = _box_tokens(state, tf, cfg, bins)[None]
    traj_tokens = _traj_tokens(state, tf, bins)
    out = None
    box_crop = None
    s2 = 0.0
    for _ in range(K):
        out = model.forward(templates, search_in, tokens, traj_tokens=traj_tokens)
        box_crop, s2 = decode_box(CoordLogits(out.logits.logits[0], out.logits.probs[0]), bins)
        tokens = quantize(np.clip(box_crop.as_array(), 0.0, 1.0), bins)[None]
    score, _ = model.scorer.forward(out.image_tokens.s, box_crop.as_array()[None])
    s1 = float(score[0])
    state.t += 1
    degenerate = box_crop.area() <= 0.0
    if degenerate:
        # conservative recovery: reuse the previous box, leave memories alone
        return FrameResult(box=state.prev, s1=s1, s2=s2, degenerate=True, trace=out.trace)
    pred = tf.crop_to_frame(box_crop).clamped(min_size=1.0)
    state.traj.push(pred.to_normalized())
    candidate = _template_crop(cfg.template_size, cfg.template_factor, frame, pred)
    state.visual.maybe_update(state.t, candidate, s1, s2, mode=cfg.update_mode)
    state.prev = pred
    return FrameResult(box=pred, s1=s1, s2=s2, degenerate=False, trace=out.trace)


@dataclass
class SequenceResult:
    boxes: np.ndarray  # (T, 4) pixel x, y, w, h; frame 0 echoes the init box
    s1: np.ndarray
    s2: np.ndarray
    intermediate: np.ndarray | None = None  # (T, depth, 4) per-block decodes


def run_sequence(model: DeTrackModel, seq: AnnotatedSequence, cfg: TrackerConfig,
                 collect_intermediate: bool = False) -> SequenceResult:
    """Track a whole annotated sequence from its first-frame ground truth."""
    from .vit import intermediate_decode

    T = len(seq)
    depth = model.mc.vit.depth
    boxes = np.zeros((T, 4))
    s1 = np.ones(T)
    s2 = np.ones(T)
    inter = np.zeros((T, depth, 4)) if collect_intermediate else None
    gt0 = seq.pixel_box(0)
    boxes[0] = gt0.as_xywh()
    if collect_intermediate:
        inter[0] = np.tile(gt0.as_xywh(), (depth, 1))
    state = init(model, seq.frame(0), gt0, cfg)
    for t in range(1, T):
        frame = seq.frame(t)
        window = crop_window(state.prev, cfg.search_factor)
        result = track_frame(model, state, frame, cfg)
        boxes[t] = result.box.as_xywh()
        s1[t], s2[t] = result.s1, result.s2
        if collect_intermediate:
            tf = CropTransform(window.x, window.y, window.w,
                               gt0.frame_width, gt0.frame_height)
            for j in range(1, depth + 1):
                bb, _ = intermediate_decode(result.trace, j, model.vocab)
                inter[t, j - 1] = tf.crop_to_frame(bb).clamped(min_size=1.0).as_xywh()
    return SequenceResult(boxes=boxes, s1=s1, s2=s2, intermediate=inter)


def mean_tracking_iou(model: DeTrackModel, sequences: list, cfg: TrackerConfig) -> float:
    """Mean over sequences of the mean per-frame IoU, init frames excluded."""
    from . import kernels

    per_seq = []
    for seq in sequences:
        result = run_sequence(model, seq, cfg)
        pred = result.boxes[1:]
        gt = seq.boxes[1:]
        pred_xyxy = np.column_stack([pred[:, 0], pred[:, 1],
                                     pred[:, 0] + pred[:, 2], pred[:, 1] + pred[:, 3]])
        gt_xyxy = np.column_stack([gt[:, 0], gt[:, 1],
                                   gt[:, 0] + gt[:, 2], gt[:, 1] + gt[:, 3]])
        per_seq.append(float(kernels.iou_xyxy(pred_xyxy, gt_xyxy).mean()))
    return float(np.mean(per_seq))


def measure_forward_macs(model: DeTrackModel, seq: AnnotatedSequence,
                         cfg: TrackerConfig, multi_pass: int) -> int:
    """Multiply-accumulates actually executed while tracking frame 1."""
    state = init(model, seq.frame(0), seq.pixel_box(0), cfg)
    nn.flop_meter.reset()
    with nn.flop_meter.measure():
        track_frame(model, state, seq.frame(1), cfg, multi_pass=multi_pass)
    return nn.flop_meter.macs


def draw_overlay(frame: np.ndarray, pred: PixelBox, gt: PixelBox | None = None) -> Image.Image:
    """Prediction in red, optional ground truth in green."""
    img = Image.fromarray(frame).convert("RGB")
    draw = ImageDraw.Draw(img)
    if gt is not None:
        draw.rectangle([gt.x, gt.y, gt.x + gt.w, gt.y + gt.h], outline=(0, 200, 0), width=1)
    draw.rectangle([pred.x, pred.y, pred.x + pred.w, pred.y + pred.h],
                   outline=(230, 30, 30), width=1)
    return img
