"""Coordinate vocabulary: quantization, word embedding, and similarity readout.

Continuous box coordinates in [0, 1] map to one of B bins; bins index a
learned B x C embedding table. Decoding computes dot-product similarity
between a latent and the table, softmaxes per coordinate, and takes the
argmax bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, canonicalize
from .nn import Param, flop_meter, init_normal, softmax


@dataclass
class CoordLogits:
    """Per-coordinate bin logits (4 x B) and their row softmax."""

    logits: np.ndarray
    probs: np.ndarray

    @staticmethod
    def from_logits(logits: np.ndarray) -> "CoordLogits":
        return CoordLogits(logits=logits, probs=softmax(logits, axis=-1))


class Vocabulary:
    """Shared word-embedding table for box tokens.

    When tied (default) the same table embeds input tokens and scores output
    latents; untied keeps a separate readout matrix of the same shape.
    """

    def __init__(self, bins: int, dim: int, rng, tied: bool = True):
        if bins < 2:
            raise ValueError("vocabulary needs at least 2 bins")
        self.bins = bins
        self.dim = dim
        self.tied = tied
        self.table = Param(init_normal(rng, (bins, dim)))
        self.readout_table = None if tied else Param(init_normal(rng, (bins, dim)))

    def params(self) -> dict[str, Param]:
        out = {"table": self.table}
        if self.readout_table is not None:
            out["readout_table"] = self.readout_table
        return out

    def _readout_matrix(self) -> Param:
        return self.table if self.tied else self.readout_table

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        """Look up token rows: (..., 4) ints -> (..., 4, C)."""
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.bins:
            raise ValueError(f"token outside [0, {self.bins - 1}]")
        return self.table.value[tokens]

    def embed_backward(self, tokens: np.ndarray, dout: np.ndarray):
        np.add.at(self.table.grad, tokens.reshape(-1),
                  dout.reshape(-1, self.dim))

    def readout(self, latent: np.ndarray) -> np.ndarray:
        """Similarity logits: (..., 4, C) -> (..., 4, B)."""
        w = self._readout_matrix().value
        flop_meter.add(latent.size // latent.shape[-1] * w.size)
        return latent @ w.T

    def readout_backward(self, latent: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        w = self._readout_matrix()
        lat2 = latent.reshape(-1, self.dim)
        dlog2 = dlogits.reshape(-1, self.bins)
        w.grad += dlog2.T @ lat2
        return dlogits @ w.value


def quantize(x, bins: int):
    """Map [0, 1] coordinates to bin indices, round half up; out-of-range clamps."""
    if bins < 2:
        raise ValueError("vocabulary needs at least 2 bins")
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * (bins - 1)
    tok = np.floor(v + 0.5).astype(np.int64)
    return tok if tok.ndim else int(tok)


def dequantize(token, bins: int):
    """Bin index back to the coordinate at its bin center: token / (B - 1)."""
    tok = np.asarray(token)
    if tok.min() < 0 or tok.max() >= bins:
        raise ValueError(f"token outside [0, {bins - 1}]")
    out = tok.astype(np.float64) / (bins - 1)
    return out if out.ndim else float(out)


def decode_box(logits: np.ndarray | CoordLogits, bins: int) -> tuple[BoundingBox, float]:
    """Argmax decode of 4 x B logits into a canonical box plus a confidence.

    Confidence is the mean over the four coordinates of the max row
    probability. Argmax ties break toward the lowest bin index.
    """
    cl = logits if isinstance(logits, CoordLogits) else CoordLogits.from_logits(logits)
    tokens = np.argmax(cl.probs, axis=-1)
    coords = dequantize(tokens, bins)
    confidence = float(np.mean(np.max(cl.probs, axis=-1)))
    return canonicalize(BoundingBox.from_array(coords)), confidence


def expected_box(probs: np.ndarray, bins: int) -> np.ndarray:
    """Soft-argmax decode: per-coordinate expectation of the bin centers."""
    values = np.arange(bins, dtype=np.float64) / (bins - 1)
    return probs @ values
