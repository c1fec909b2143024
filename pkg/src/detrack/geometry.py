"""Box algebra shared by the data pipeline, losses, memory gating and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SIN45 = math.sqrt(2.0) / 2.0
_EPS = 1e-12
SIOU_THETA = 4.0


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box (x1, y1, x2, y2), normalized units relative to a stated
    reference frame (search crop or full image, per call site)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in a)
        return BoundingBox(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_canonical(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2 and self.is_finite()

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2))


@dataclass(frozen=True)
class PixelBox:
    """Top-left + size box in pixel units, tied to a frame of known size."""

    x: float
    y: float
    w: float
    h: float
    frame_width: int
    frame_height: int

    def as_xywh(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def as_xyxy(self) -> np.ndarray:
        return np.array([self.x, self.y, self.x + self.w, self.y + self.h], dtype=np.float64)

    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def area(self) -> float:
        return self.w * self.h

    def to_normalized(self) -> BoundingBox:
        W, H = float(self.frame_width), float(self.frame_height)
        return BoundingBox(self.x / W, self.y / H, (self.x + self.w) / W, (self.y + self.h) / H)

    @staticmethod
    def from_normalized(b: BoundingBox, frame_width: int, frame_height: int) -> "PixelBox":
        W, H = float(frame_width), float(frame_height)
        return PixelBox(b.x1 * W, b.y1 * H, (b.x2 - b.x1) * W, (b.y2 - b.y1) * H,
                        frame_width, frame_height)

    def clamped(self, min_size: float = 1.0) -> "PixelBox":
        """Clip the box to the frame, keeping at least min_size pixels per side."""
        W, H = float(self.frame_width), float(self.frame_height)
        x1 = min(max(self.x, 0.0), W - min_size)
        y1 = min(max(self.y, 0.0), H - min_size)
        x2 = min(max(self.x + self.w, x1 + min_size), W)
        y2 = min(max(self.y + self.h, y1 + min_size), H)
        return PixelBox(x1, y1, x2 - x1, y2 - y1, self.frame_width, self.frame_height)


def canonicalize(b: BoundingBox) -> BoundingBox:
    """Sort corners so that x1 <= x2 and y1 <= y2."""
    if not b.is_finite():
        raise ValueError("invalid box: non-finite coordinate")
    return BoundingBox(min(b.x1, b.x2), min(b.y1, b.y2), max(b.x1, b.x2), max(b.y1, b.y2))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two canonical boxes; 0 when the union is empty."""
    if not (a.is_finite() and b.is_finite()):
        raise ValueError("invalid box: non-finite coordinate")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def crop_window(prev: PixelBox, factor: float) -> PixelBox:
    """Square context window centered on prev with side factor * sqrt(w*h).

    The window may extend past the frame; padding is the crop code's job.
    """
    if factor <= 0:
        raise ValueError("crop factor must be positive")
    if prev.area() <= 0:
        raise ValueError("zero-area box has no crop window")
    cx, cy = prev.center()
    side = factor * math.sqrt(prev.w * prev.h)
    return PixelBox(cx - side / 2.0, cy - side / 2.0, side, side,
                    prev.frame_width, prev.frame_height)


def siou_loss(pred: BoundingBox, gt: BoundingBox) -> float:
    """SIoU regression loss: 1 - IoU plus angle-weighted distance and shape penalties."""
    loss, _ = siou_loss_grad(pred.as_array(), gt.as_array())
    return float(loss)


def siou_loss_grad(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """SIoU loss and its gradient with respect to the four pred coordinates.

    pred, gt: (4,) float arrays in corner form (x1, y1, x2, y2), pred canonical,
    gt with positive area. The gradient is the exact derivative of the closed
    form, defined almost everywhere (branch points of abs/min/max excluded).
    """
    px1, py1, px2, py2 = (float(v) for v in pred)
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)
    if not all(math.isfinite(v) for v in (px1, py1, px2, py2, gx1, gy1, gx2, gy2)):
        raise ValueError("invalid box: non-finite coordinate")
    w2, h2 = gx2 - gx1, gy2 - gy1
    if w2 <= 0 or h2 <= 0:
        raise ValueError("degenerate target: ground-truth box must have positive area")
    w1, h1 = px2 - px1, py2 - py1

    # IoU term. d<coord> holds the partial of the named scalar w.r.t. pred.
    ix1, ix2 = max(px1, gx1), min(px2, gx2)
    iy1, iy2 = max(py1, gy1), min(py2, gy2)
    iw, ih = ix2 - ix1, iy2 - iy1
    inter = max(0.0, iw) * max(0.0, ih)
    union = w1 * h1 + w2 * h2 - inter
    iou_v = inter / union if union > 0 else 0.0

    d_inter = np.zeros(4)
    if iw > 0 and ih > 0:
        if px1 >= gx1:
            d_inter[0] = -ih
        if px2 <= gx2:
            d_inter[2] = ih
        if py1 >= gy1:
            d_inter[1] = -iw
        if py2 <= gy2:
            d_inter[3] = iw
    d_area1 = np.array([-h1, -w1, h1, w1])
    d_union = d_area1 - d_inter
    d_iou = (d_inter * union - inter * d_union) / (union * union) if union > 0 else np.zeros(4)

    # Angle cost on the center offset (gt center minus pred center).
    scw = 0.5 * (gx1 + gx2) - 0.5 * (px1 + px2)
    sch = 0.5 * (gy1 + gy2) - 0.5 * (py1 + py2)
    d_scw = np.array([-0.5, 0.0, -0.5, 0.0])
    d_sch = np.array([0.0, -0.5, 0.0, -0.5])
    sigma = math.sqrt(scw * scw + sch * sch) + _EPS
    d_sigma = (scw * d_scw + sch * d_sch) / sigma

    sin_a = abs(sch) / sigma
    sin_b = abs(scw) / sigma
    if sin_a > _SIN45:
        u = sin_b
        d_u = (math.copysign(1.0, scw) * d_scw * sigma - abs(scw) * d_sigma) / (sigma * sigma)
    else:
        u = sin_a
        d_u = (math.copysign(1.0, sch) * d_sch * sigma - abs(sch) * d_sigma) / (sigma * sigma)
    u = min(u, 1.0 - _EPS)
    angle = math.cos(2.0 * math.asin(u) - math.pi / 2.0)
    d_angle = (2.0 * (1.0 - 2.0 * u * u) / math.sqrt(1.0 - u * u)) * d_u

    # Distance cost over the enclosing box, damped by the angle cost.
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    d_cw = np.array([-1.0 if px1 <= gx1 else 0.0, 0.0, 1.0 if px2 >= gx2 else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if py1 <= gy1 else 0.0, 0.0, 1.0 if py2 >= gy2 else 0.0])
    rho_x = (scw / cw) ** 2
    rho_y = (sch / ch) ** 2
    d_rho_x = 2.0 * (scw / cw) * (d_scw * cw - scw * d_cw) / (cw * cw)
    d_rho_y = 2.0 * (sch / ch) * (d_sch * ch - sch * d_ch) / (ch * ch)
    gamma = 2.0 - angle
    d_gamma = -d_angle
    ex, ey = math.exp(-gamma * rho_x), math.exp(-gamma * rho_y)
    dist = (1.0 - ex) + (1.0 - ey)
    d_dist = ex * (d_gamma * rho_x + gamma * d_rho_x) + ey * (d_gamma * rho_y + gamma * d_rho_y)

    # Shape cost on relative side-length mismatch.
    d_w1 = np.array([-1.0, 0.0, 1.0, 0.0])
    d_h1 = np.array([0.0, -1.0, 0.0, 1.0])
    mw, mh = max(w1, w2), max(h1, h2)
    ow, oh = abs(w1 - w2) / mw, abs(h1 - h2) / mh
    d_ow = (math.copysign(1.0, w1 - w2) * mw - abs(w1 - w2) * (1.0 if w1 >= w2 else 0.0)) / (mw * mw) * d_w1
    d_oh = (math.copysign(1.0, h1 - h2) * mh - abs(h1 - h2) * (1.0 if h1 >= h2 else 0.0)) / (mh * mh) * d_h1
    ew, eh = math.exp(-ow), math.exp(-oh)
    shape = (1.0 - ew) ** SIOU_THETA + (1.0 - eh) ** SIOU_THETA
    d_shape = (SIOU_THETA * (1.0 - ew) ** (SIOU_THETA - 1.0) * ew * d_ow
               + SIOU_THETA * (1.0 - eh) ** (SIOU_THETA - 1.0) * eh * d_oh)

    loss = 1.0 - iou_v + 0.5 * (dist + shape)
    grad = -d_iou + 0.5 * (d_dist + d_shape)
    return loss, grad
