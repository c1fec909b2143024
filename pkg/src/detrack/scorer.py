"""Box-quality head: predicts the IoU of a decoded box from search features."""

from __future__ import annotations

import numpy as np

from . import nn


class QualityScorer:
    """Average-pools search tokens under the box, appends the coordinates,
    and maps through a two-layer perceptron with a sigmoid output."""

    def __init__(self, dim: int, hidden: int, grid: int, rng):
        self.dim = dim
        self.grid = grid
        centers = (np.arange(grid) + 0.5) / grid
        self.cx = np.tile(centers, grid)
        self.cy = np.repeat(centers, grid)
        self.lin1 = nn.Linear(dim + 4, hidden, rng)
        self.lin2 = nn.Linear(hidden, 1, rng)

    def _pool_weights(self, boxes: np.ndarray) -> np.ndarray:
        """(B, 4) boxes -> (B, N) mean-pooling weights over patch centers."""
        B = boxes.shape[0]
        inside = ((self.cx[None, :] >= boxes[:, 0:1]) & (self.cx[None, :] <= boxes[:, 2:3])
                  & (self.cy[None, :] >= boxes[:, 1:2]) & (self.cy[None, :] <= boxes[:, 3:4]))
        weights = inside.astype(np.float64)
        counts = weights.sum(axis=1)
        for i in np.nonzero(counts == 0)[0]:
            bx = 0.5 * (boxes[i, 0] + boxes[i, 2])
            by = 0.5 * (boxes[i, 1] + boxes[i, 3])
            nearest = np.argmin((self.cx - bx) ** 2 + (self.cy - by) ** 2)
            weights[i, nearest] = 1.0
            counts[i] = 1.0
        return weights / counts[:, None]

    def forward(self, search_tokens: np.ndarray, boxes: np.ndarray):
        """search_tokens (B, N, C), boxes (B, 4) in search-crop coordinates."""
        w = self._pool_weights(np.asarray(boxes, dtype=np.float64))
        pooled = np.einsum("bn,bnc->bc", w, search_tokens)
        feat = np.concatenate([pooled, boxes], axis=1)
        h, c1 = self.lin1.forward(feat)
        r = np.maximum(h, 0.0)
        logit, c2 = self.lin2.forward(r)
        score = nn.sigmoid(logit[:, 0])
        return score, (c1, c2, h, score)

    def backward(self, dscore: np.ndarray, cache):
        """Accumulates parameter gradients only; the backbone stays frozen."""
        c1, c2, h, score = cache
        dlogit = (dscore * score * (1.0 - score))[:, None]
        dr = self.lin2.backward(dlogit, c2)
        dh = dr * (h > 0)
        self.lin1.backward(dh, c1)

    def params(self) -> dict:
        out = {}
        for name, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            out.update(nn.collect_params(name, lin))
        return out


def quality_loss(pred_score: float, true_iou: float) -> float:
    """Squared error between the predicted and the true IoU."""
    d = pred_score - true_iou
    return d * d


def quality_loss_grad(pred_score, true_iou):
    return 2.0 * (np.asarray(pred_score) - np.asarray(true_iou))
