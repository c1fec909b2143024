"""Three-stage training: noised-pair pretraining, sequential rollout with live
trajectory memory, then quality-head fitting against true IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import nn
from .geometry import BoundingBox, PixelBox, iou, siou_loss_grad
from .model import DeTrackModel
from .noise import add_noise, make_schedule, sample_timestep
from .scorer import quality_loss_grad
from .vocab import CoordLogits, decode_box, quantize


@dataclass(frozen=True)
class LossReport:
    ce: float
    siou: float
    total: float


def _ce_and_grad(probs: np.ndarray, gt_tokens: np.ndarray):
    """Mean-over-coordinates cross entropy per item plus d(loss)/d(logits)."""
    B = probs.shape[0]
    rows = np.arange(B)[:, None], np.arange(4)[None, :]
    picked = probs[rows[0], rows[1], gt_tokens]
    ce = -np.log(np.maximum(picked, 1e-300)).mean(axis=1)
    dlogits = probs.copy()
    dlogits[rows[0], rows[1], gt_tokens] -= 1.0
    return ce, dlogits / 4.0


def _siou_and_grad(probs: np.ndarray, gt_boxes: np.ndarray, bins: int):
    """Soft-argmax decode each item, apply the SIoU loss, and push the
    gradient back to the logits through the softmax expectation."""
    B = probs.shape[0]
    values = np.arange(bins, dtype=np.float64) / (bins - 1)
    boxes = probs @ values
    if not np.all(np.isfinite(boxes)):
        raise RuntimeError("loss diverged (non-finite)")
    losses = np.zeros(B)
    dlogits = np.zeros_like(probs)
    for i in range(B):
        gt = np.clip(gt_boxes[i], 0.0, 1.0)
        if gt[2] - gt[0] <= 1e-6 or gt[3] - gt[1] <= 1e-6:
            continue  # target left the crop; no geometric supervision
        b = boxes[i]
        swap_x, swap_y = b[0] > b[2], b[1] > b[3]
        pred = np.array([min(b[0], b[2]), min(b[1], b[3]),
                         max(b[0], b[2]), max(b[1], b[3])])
        losses[i], dpred = siou_loss_grad(pred, gt)
        db = dpred.copy()
        if swap_x:
            db[0], db[2] = dpred[2], dpred[0]
        if swap_y:
            db[1], db[3] = dpred[3], dpred[1]
        dprob = db[:, None] * values[None, :]
        p = probs[i]
        dlogits[i] = p * (dprob - np.sum(dprob * p, axis=1, keepdims=True))
    return losses, dlogits


def _loss_batch(cl: CoordLogits, gt_boxes: np.ndarray, bins: int,
                lambda_ce: float, lambda_siou: float):
    """Batch-mean losses and the gradient w.r.t. the logits (already averaged)."""
    gt_tokens = quantize(np.clip(gt_boxes, 0.0, 1.0), bins)
    ce, dce = _ce_and_grad(cl.probs, gt_tokens)
    si, dsi = _siou_and_grad(cl.probs, gt_boxes, bins)
    B = gt_boxes.shape[0]
    dlogits = (lambda_ce * dce + lambda_siou * dsi) / B
    return float(ce.mean()), float(si.mean()), dlogits


def compute_loss(logits, gt: BoundingBox, bins: int,
                 lambda_ce: float = 1.0, lambda_siou: float = 1.0):
    """Single-sample loss: cross entropy on the quantized target tokens plus
    SIoU on the soft-argmax decode. Returns (LossReport, dlogits (4, bins))."""
    cl = logits if isinstance(logits, CoordLogits) else CoordLogits.from_logits(np.asarray(logits))
    batch = CoordLogits(logits=cl.logits[None], probs=cl.probs[None])
    ce, si, dlogits = _loss_batch(batch, gt.as_array()[None], bins, lambda_ce, lambda_siou)
    report = LossReport(ce=ce, siou=si, total=lambda_ce * ce + lambda_siou * si)
    if not math.isfinite(report.total):
        raise RuntimeError("loss diverged (non-finite)")
    return report, dlogits[0]


# ---------------------------------------------------------------------------
# batch assembly


def _standardize(stack: np.ndarray) -> np.ndarray:
    return data_mod.to_model_input(stack)


def _template_stack(seq, frame_ids, pcfg: data_mod.PipelineConfig) -> np.ndarray:
    crops = []
    for fi in frame_ids:
        win = data_mod.crop_window(seq.pixel_box(int(fi)), pcfg.template_factor)
        crop, _ = data_mod.make_crop(seq.frame(int(fi)), win, pcfg.template_size)
        crops.append(crop)
    return np.stack(crops)


def _pick_frames(rng, length: int, count: int) -> np.ndarray:
    replace = length < count
    return rng.choice(length, size=count, replace=replace)


def _pipeline_cfg(cfg: dict) -> data_mod.PipelineConfig:
    return data_mod.PipelineConfig(
        template_size=cfg["data.template_size"], search_size=cfg["data.search_size"],
        template_factor=cfg["data.template_factor"],
        search_factor=cfg["data.search_factor"], jitter=cfg["data.jitter"])


def _traj_tokens_for(traj, tf, bins: int) -> np.ndarray:
    """Map frame-normalized trajectory boxes into crop coordinates and tokens."""
    rows = []
    for bb in traj:
        px = PixelBox.from_normalized(bb, tf.frame_width, tf.frame_height)
        crop_bb = tf.frame_to_crop(px)
        rows.append(quantize(crop_bb.as_array(), bins))
    return np.stack(rows)


class _Logger:
    """One log line per N steps: step,epoch,ce,siou,total,lr."""

    def __init__(self, every: int, stage: int):
        self.every = every
        self.stage = stage
        self.history = []

    def log(self, step, epoch, ce, si, total, lr):
        self.history.append((step, epoch, ce, si, total, lr))
        if self.every > 0 and step % self.every == 0:
            print(f"{step},{epoch},{ce:.4f},{si:.4f},{total:.4f},{lr:.2e}")


def _check_finite(total: float):
    if not math.isfinite(total):
        raise RuntimeError("loss diverged (non-finite)")


def _make_optimizer(model: DeTrackModel, cfg: dict, groups: tuple) -> nn.AdamW:
    all_groups = model.param_groups()
    lrs = {"vit": cfg["train.lr_vit"], "refiner": cfg["train.lr_refiner"],
           "scorer": cfg["train.lr_scorer"]}
    return nn.AdamW({g: (all_groups[g], lrs[g]) for g in groups},
                    weight_decay=cfg["train.weight_decay"],
                    clip_norm=cfg["train.clip_norm"])


def _aux_state_grad(model: DeTrackModel, out, gt_boxes: np.ndarray, bins: int,
                    weight: float):
    """Auxiliary cross entropy on the vocabulary readout of the final denoised
    latent; keeps the pre-refiner state decodable on its own."""
    if weight <= 0:
        return 0.0, None
    state = out.trace.states[-1]
    cl = CoordLogits.from_logits(model.vocab.readout(state))
    gt_tokens = quantize(np.clip(gt_boxes, 0.0, 1.0), bins)
    ce, dlogits = _ce_and_grad(cl.probs, gt_tokens)
    dlogits *= weight / gt_boxes.shape[0]
    d_state = model.vocab.readout_backward(state, dlogits)
    return float(ce.mean()), d_state


# ---------------------------------------------------------------------------
# stage 1: noised ground-truth pairs


def train_stage1(model: DeTrackModel, cfg: dict, sequences: list,
                 optimizer: nn.AdamW | None = None) -> list:
    pcfg = _pipeline_cfg(cfg)
    bins = cfg["vocab.bins"]
    schedule = make_schedule(cfg["noise.T_max"], cfg["noise.beta_start"], cfg["noise.beta_end"])
    ss = np.random.SeedSequence([cfg["run.seed"], 1])
    data_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    opt = optimizer or _make_optimizer(model, cfg, ("vit", "refiner"))
    logger = _Logger(cfg["train.log_every"], stage=1)
    batch = cfg["train.batch"]
    steps_per_epoch = max(1, len(sequences) * cfg["train.samples_per_video"] // batch)
    step = 0
    for epoch in range(1, cfg["train.stage1_epochs"] + 1):
        decay = cfg["train.decay_factor"] if epoch >= cfg["train.stage1_decay_epoch"] else 1.0
        opt.set_lr("vit", cfg["train.lr_vit"] * decay)
        opt.set_lr("refiner", cfg["train.lr_refiner"] * decay)
        for _ in range(steps_per_epoch):
            n = int(data_rng.integers(1, cfg["memory.visual_len"] + 1))
            templates, searches, tokens, gts = [], [], [], []
            for _ in range(batch):
                seq = sequences[int(data_rng.integers(len(sequences)))]
                frames = _pick_frames(data_rng, len(seq), n + 1)
                templates.append(_template_stack(seq, frames[:n], pcfg))
                gt_px = seq.pixel_box(int(frames[n]))
                window = data_mod.jittered_window(gt_px, pcfg.search_factor,
                                                  pcfg.jitter, data_rng)
                search, tf = data_mod.make_crop(seq.frame(int(frames[n])), window,
                                                pcfg.search_size)
                searches.append(search)
                gt_crop = tf.frame_to_crop(gt_px).as_array()
                t = schedule.t_max if cfg["noise.fixed_t"] else sample_timestep(schedule, noise_rng)
                sample = add_noise(gt_crop, t, schedule, noise_rng)
                tokens.append(quantize(sample.x_noisy, bins))
                gts.append(gt_crop)
            out = model.forward(_standardize(np.stack(templates)),
                                _standardize(np.stack(searches)),
                                np.stack(tokens))
            gt_arr = np.stack(gts)
            ce, si, dlogits = _loss_batch(out.logits, gt_arr, bins,
                                          cfg["train.lambda_ce"], cfg["train.lambda_siou"])
            model.zero_grad()
            aux_ce, d_state = _aux_state_grad(model, out, gt_arr, bins,
                                              cfg["train.lambda_vit_ce"])
            model.backward(out, dlogits, d_state)
            total = (cfg["train.lambda_ce"] * ce + cfg["train.lambda_siou"] * si
                     + cfg["train.lambda_vit_ce"] * aux_ce)
            _check_finite(total)
            opt.step()
            step += 1
            logger.log(step, epoch, ce, si, total, opt.lr("vit"))
    return logger.history


# ---------------------------------------------------------------------------
# stage 2: sequential rollout with live trajectory memory


def _rollout_clip_batch(model: DeTrackModel, cfg: dict, items: list, n: int,
                        pcfg, bins: int, rng, train: bool = True,
                        collect=None):
    """Roll a batch of aligned clips; when train=True accumulates gradients.

    items: list of (seq, start). All clips share the same length; the
    trajectory is seeded with the start-frame ground truth and then fed with
    the model's own predictions (or ground truth under teacher forcing).
    """
    clip_len = min(cfg["train.clip_len"], min(len(seq) - start for seq, start in items))
    teacher = cfg["train.teacher_forcing"]
    lam_ce, lam_siou = cfg["train.lambda_ce"], cfg["train.lambda_siou"]
    traj_cap = cfg["memory.traj_len"]
    templates = []
    states = []
    for seq, start in items:
        frames = _pick_frames(rng, len(seq), n)
        templates.append(_template_stack(seq, frames, pcfg))
        gt0 = seq.pixel_box(start)
        states.append({"prev": gt0, "traj": [gt0.to_normalized()]})
    templates = _standardize(np.stack(templates))
    totals = []
    frames_used = clip_len - 1
    for p in range(1, clip_len):
        searches, tfs, gts = [], [], []
        for (seq, start), st in zip(items, states):
            window = data_mod.crop_window(st["prev"], pcfg.search_factor)
            search, tf = data_mod.make_crop(seq.frame(start + p), window, pcfg.search_size)
            searches.append(search)
            tfs.append(tf)
            gts.append(tf.frame_to_crop(seq.pixel_box(start + p)).as_array())
        tokens = np.stack([
            quantize(np.clip(tf.frame_to_crop(st["prev"]).as_array(), 0.0, 1.0), bins)
            for tf, st in zip(tfs, states)])
        traj_tokens = np.stack([
            _traj_tokens_for(st["traj"][-traj_cap:], tf, bins)
            for tf, st in zip(tfs, states)])
        out = model.forward(templates, _standardize(np.stack(searches)),
                            tokens, traj_tokens=traj_tokens)
        gt_arr = np.stack(gts)
        if train:
            ce, si, dlogits = _loss_batch(out.logits, gt_arr, bins, lam_ce, lam_siou)
            aux_ce, d_state = _aux_state_grad(model, out, gt_arr, bins,
                                              cfg["train.lambda_vit_ce"])
            model.backward(out, dlogits / frames_used,
                           None if d_state is None else d_state / frames_used)
            totals.append(lam_ce * ce + lam_siou * si + cfg["train.lambda_vit_ce"] * aux_ce)
        for i, ((seq, start), st, tf) in enumerate(zip(items, states, tfs)):
            box_crop, conf = decode_box(CoordLogits(out.logits.logits[i],
                                                    out.logits.probs[i]), bins)
            pred_px = tf.crop_to_frame(box_crop).clamped(min_size=1.0)
            gt_px = seq.pixel_box(start + p)
            if collect is not None:
                collect(out.image_tokens.s[i], box_crop,
                        iou(pred_px.to_normalized(), gt_px.to_normalized()))
            if teacher:
                st["prev"] = gt_px
                st["traj"].append(gt_px.to_normalized())
            else:
                st["prev"] = pred_px
                st["traj"].append(pred_px.to_normalized())
            st["traj"] = st["traj"][-traj_cap:]
    return float(np.mean(totals)) if totals else 0.0


def train_stage2(model: DeTrackModel, cfg: dict, sequences: list) -> list:
    pcfg = _pipeline_cfg(cfg)
    bins = cfg["vocab.bins"]
    ss = np.random.SeedSequence([cfg["run.seed"], 2])
    data_rng = np.random.default_rng(ss.spawn(1)[0])
    opt = _make_optimizer(model, cfg, ("vit", "refiner"))
    factor = cfg["train.stage2_lr_factor"]
    opt.set_lr("vit", cfg["train.lr_vit"] * factor)
    opt.set_lr("refiner", cfg["train.lr_refiner"] * factor)
    logger = _Logger(cfg["train.log_every"], stage=2)
    batch = cfg["train.batch"]
    clip_len = cfg["train.clip_len"]
    step = 0
    for epoch in range(1, cfg["train.stage2_epochs"] + 1):
        order = data_rng.permutation(len(sequences))
        for lo in range(0, len(order) - batch + 1, batch):
            n = int(data_rng.integers(1, cfg["memory.visual_len"] + 1))
            items = []
            for idx in order[lo:lo + batch]:
                seq = sequences[int(idx)]
                start = int(data_rng.integers(0, max(1, len(seq) - clip_len + 1)))
                items.append((seq, start))
            model.zero_grad()
            total = _rollout_clip_batch(model, cfg, items, n, pcfg, bins, data_rng)
            _check_finite(total)
            opt.step()
            step += 1
            logger.log(step, epoch, 0.0, 0.0, total, opt.lr("vit"))
    return logger.history


# ---------------------------------------------------------------------------
# stage 3: quality head only, everything else frozen


def train_stage3(model: DeTrackModel, cfg: dict, sequences: list) -> list:
    pcfg = _pipeline_cfg(cfg)
    bins = cfg["vocab.bins"]
    ss = np.random.SeedSequence([cfg["run.seed"], 3])
    data_rng = np.random.default_rng(ss.spawn(1)[0])
    tokens_rows, box_rows, iou_rows = [], [], []

    def collect(tokens, box_crop, true_iou):
        tokens_rows.append(tokens)
        box_rows.append(box_crop.as_array())
        iou_rows.append(true_iou)

    batch = cfg["train.batch"]
    for lo in range(0, len(sequences), batch):
        chunk = sequences[lo:lo + batch]
        length = min(len(s) for s in chunk)
        items = [(seq, 0) for seq in chunk]
        roll_cfg = dict(cfg)
        roll_cfg["train.clip_len"] = length
        n = int(data_rng.integers(1, cfg["memory.visual_len"] + 1))
        _rollout_clip_batch(model, roll_cfg, items, n, pcfg, bins, data_rng,
                            train=False, collect=collect)
    tokens_all = np.stack(tokens_rows)
    boxes_all = np.stack(box_rows)
    ious_all = np.asarray(iou_rows)

    opt = _make_optimizer(model, cfg, ("scorer",))
    logger = _Logger(cfg["train.log_every"], stage=3)
    step = 0
    for epoch in range(1, cfg["train.stage3_epochs"] + 1):
        decay = cfg["train.decay_factor"] if epoch >= cfg["train.stage3_decay_epoch"] else 1.0
        opt.set_lr("scorer", cfg["train.lr_scorer"] * decay)
        order = data_rng.permutation(len(ious_all))
        for lo in range(0, len(order) - batch + 1, batch):
            idx = order[lo:lo + batch]
            scores, cache = model.scorer.forward(tokens_all[idx], boxes_all[idx])
            err = scores - ious_all[idx]
            loss = float(np.mean(err * err))
            _check_finite(loss)
            opt.zero_grad()
            model.scorer.backward(quality_loss_grad(scores, ious_all[idx]) / len(idx), cache)
            opt.step()
            step += 1
            logger.log(step, epoch, 0.0, 0.0, loss, opt.lr("scorer"))
    return logger.history


def scorer_mae(model: DeTrackModel, cfg: dict, sequences: list) -> float:
    """Mean absolute error of the quality head against true IoU on a rollout."""
    pcfg = _pipeline_cfg(cfg)
    bins = cfg["vocab.bins"]
    rng = np.random.default_rng(np.random.SeedSequence([cfg["run.seed"], 4]))
    rows = []

    def collect(tokens, box_crop, true_iou):
        score, _ = model.scorer.forward(tokens[None], box_crop.as_array()[None])
        rows.append(abs(float(score[0]) - true_iou))

    batch = cfg["train.batch"]
    for lo in range(0, len(sequences), batch):
        chunk = sequences[lo:lo + batch]
        items = [(seq, 0) for seq in chunk]
        roll_cfg = dict(cfg)
        roll_cfg["train.clip_len"] = min(len(s) for s in chunk)
        _rollout_clip_batch(model, roll_cfg, items, int(rng.integers(1, cfg["memory.visual_len"] + 1)),
                            pcfg, bins, rng, train=False, collect=collect)
    return float(np.mean(rows))
