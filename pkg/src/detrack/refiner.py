"""Box refining and mapping: trajectory-conditioned refinement of the denoised box.

The denoised 4-token latent is stacked after the embedded trajectory boxes
(oldest first) and run through layers of block-causal self-attention,
cross-attention into the image tokens, and an FFN. The refined current-box
latent is scored against the vocabulary to produce per-coordinate bin logits.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .vocab import CoordLogits, Vocabulary

MAX_BOXES = 8  # 7 trajectory slots plus the current box


def build_mask(k_boxes: int) -> np.ndarray:
    """Block lower-triangular mask at box granularity over (4k, 4k) token pairs.

    True where attention is allowed: tokens of box g see boxes 1..g only.
    """
    if k_boxes < 1:
        raise ValueError("mask needs at least one box")
    box_idx = np.repeat(np.arange(k_boxes), 4)
    return box_idx[:, None] >= box_idx[None, :]


class RefinerLayer:
    def __init__(self, dim: int, heads: int, ffn_ratio: float, rng):
        self.ln1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln3 = nn.LayerNorm(dim)
        self.ffn = nn.FeedForward(dim, int(dim * ffn_ratio), rng)

    def forward(self, y: np.ndarray, image_tokens: np.ndarray, mask: np.ndarray):
        n1, c_ln1 = self.ln1.forward(y)
        a, c_sa = self.self_attn.forward(n1, n1, mask=mask)
        y1 = y + a
        n2, c_ln2 = self.ln2.forward(y1)
        kv, c_lnkv = self.ln_kv.forward(image_tokens)
        x, c_ca = self.cross_attn.forward(n2, kv)
        y2 = y1 + x
        n3, c_ln3 = self.ln3.forward(y2)
        f, c_ffn = self.ffn.forward(n3)
        y3 = y2 + f
        return y3, (c_ln1, c_sa, c_ln2, c_lnkv, c_ca, c_ln3, c_ffn)

    def backward(self, dy3: np.ndarray, cache):
        c_ln1, c_sa, c_ln2, c_lnkv, c_ca, c_ln3, c_ffn = cache
        dn3 = self.ffn.backward(dy3, c_ffn)
        dy2 = dy3 + self.ln3.backward(dn3, c_ln3)
        dn2, dkv = self.cross_attn.backward(dy2, c_ca)
        d_image = self.ln_kv.backward(dkv, c_lnkv)
        dy1 = dy2 + self.ln2.backward(dn2, c_ln2)
        dq, dkv_self = self.self_attn.backward(dy1, c_sa)
        dy = dy1 + self.ln1.backward(dq + dkv_self, c_ln1)
        return dy, d_image

    def params(self) -> dict:
        out = {}
        for name, sub in (("ln1", self.ln1), ("self_attn", self.self_attn),
                          ("ln2", self.ln2), ("ln_kv", self.ln_kv),
                          ("cross_attn", self.cross_attn), ("ln3", self.ln3),
                          ("ffn", self.ffn)):
            out.update(nn.collect_params(name, sub))
        return out


class BoxRefiner:
    def __init__(self, dim: int, heads: int, ffn_ratio: float, n_layers: int,
                 vocab: Vocabulary, rng):
        self.dim = dim
        self.n_layers = n_layers
        self.vocab = vocab
        self.layers = [RefinerLayer(dim, heads, ffn_ratio, rng) for _ in range(n_layers)]
        # learned temporal index per box slot; the current box is pinned to the
        # last slot so its embedding does not depend on how full the memory is
        self.temporal_emb = nn.Param(nn.init_normal(rng, (MAX_BOXES, dim)))
        self.final_ln = nn.LayerNorm(dim)

    def refine(self, traj_latents: np.ndarray | None, current: np.ndarray,
               image_tokens: np.ndarray, layers: int | None = None):
        """traj_latents (B, k, 4, C) oldest first or None, current (B, 4, C).

        Trajectory latents are context only: no gradient is propagated into
        them. Returns (refined latent (B, 4, C), logits (B, 4, bins), cache).
        """
        if image_tokens.size == 0:
            raise ValueError("refiner needs image tokens for cross-attention")
        n_layers = self.n_layers if layers is None else layers
        if not 1 <= n_layers <= self.n_layers:
            raise ValueError(f"layer count must be in [1, {self.n_layers}]")
        B = current.shape[0]
        k = 0 if traj_latents is None or traj_latents.shape[1] == 0 else traj_latents.shape[1]
        if k > MAX_BOXES - 1:
            raise ValueError(f"at most {MAX_BOXES - 1} trajectory boxes supported")
        slots = np.arange(MAX_BOXES - 1 - k, MAX_BOXES)
        if k:
            y = np.concatenate([traj_latents.reshape(B, 4 * k, self.dim), current], axis=1)
        else:
            y = current
        y = y + np.repeat(self.temporal_emb.value[slots], 4, axis=0)
        mask = build_mask(k + 1)
        layer_caches = []
        for layer in self.layers[:n_layers]:
            y, c = layer.forward(y, image_tokens, mask)
            layer_caches.append(c)
        normed, c_final = self.final_ln.forward(y)
        refined = normed[:, -4:]
        logits = self.vocab.readout(refined)
        cache = (k, slots, layer_caches, c_final, refined, image_tokens.shape, n_layers)
        return refined, CoordLogits.from_logits(logits), cache

    def backward(self, dlogits: np.ndarray, cache,
                 d_refined_extra: np.ndarray | None = None):
        """Returns (d_current (B, 4, C), d_image_tokens)."""
        k, slots, layer_caches, c_final, refined, image_shape, n_layers = cache
        d_refined = self.vocab.readout_backward(refined, dlogits)
        if d_refined_extra is not None:
            d_refined = d_refined + d_refined_extra
        B = d_refined.shape[0]
        d_normed = np.zeros((B, 4 * (k + 1), self.dim))
        d_normed[:, -4:] = d_refined
        dy = self.final_ln.backward(d_normed, c_final)
        d_image = np.zeros(image_shape)
        for layer, c in zip(reversed(self.layers[:n_layers]), reversed(layer_caches)):
            dy, d_img = layer.backward(dy, c)
            d_image += d_img
        self.temporal_emb.grad[slots] += dy.reshape(B, k + 1, 4, self.dim).sum(axis=(0, 2))
        return dy[:, -4:], d_image

    def params(self) -> dict:
        out = {"temporal_emb": self.temporal_emb}
        out.update(nn.collect_params("final_ln", self.final_ln))
        for j, layer in enumerate(self.layers):
            out.update(nn.collect_params(f"layer{j}", layer))
        return out
