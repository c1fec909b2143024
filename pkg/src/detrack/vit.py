"""Denoising ViT: image-attention layers interleaved with box-denoising blocks.

Template and search patches flow through joint self-attention layers. After
layer j, denoising block j cross-attends from the 4-token box latent into the
current search tokens, applies an FFN, predicts a noise increment with a
two-layer perceptron, and subtracts it from the latent. One forward pass
therefore executes the whole denoising chain; the trace of intermediate
latents is kept so any step can be decoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import BoundingBox
from .vocab import CoordLogits, Vocabulary, decode_box

NOISE_PRED_MODES = ("per_block", "total")


@dataclass
class VitConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    patch: int = 16
    ffn_ratio: float = 4.0
    noise_pred_mode: str = "per_block"
    template_size: int = 32
    search_size: int = 64
    template_pos_emb: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.noise_pred_mode not in NOISE_PRED_MODES:
            raise ValueError(f"noise_pred_mode must be one of {NOISE_PRED_MODES}")
        if self.template_size % self.patch or self.search_size % self.patch:
            raise ValueError("image sizes must be multiples of the patch size")

    @property
    def tokens_per_template(self) -> int:
        return (self.template_size // self.patch) ** 2

    @property
    def search_tokens(self) -> int:
        return (self.search_size // self.patch) ** 2


@dataclass
class ImageTokens:
    """Template tokens z (B, N_z, C) and search tokens s (B, N_s, C)."""

    z: np.ndarray
    s: np.ndarray


@dataclass
class DenoiseTrace:
    """Per-block latent states and predicted noises for one forward pass.

    states[0] is the embedded noisy input, states[j] the output of block j;
    ffn_states[j-1] is the pre-subtraction latent of block j, so
    states[j] == ffn_states[j-1] - eps[j-1] holds identically.
    """

    states: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    ffn_states: list = field(default_factory=list)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, H*W/patch^2, patch*patch*3), row-major patch order."""
    B, H, W, C = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, gh, patch, gw, patch, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


def unpatchify_grad(dpatches: np.ndarray, H: int, W: int, patch: int) -> np.ndarray:
    B = dpatches.shape[0]
    gh, gw = H // patch, W // patch
    C = dpatches.shape[-1] // (patch * patch)
    x = dpatches.reshape(B, gh, gw, patch, patch, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


class ImageAttentionBlock:
    """Joint self-attention plus FFN over the concatenated [z, s] tokens."""

    def __init__(self, cfg: VitConfig, rng):
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = nn.MultiHeadAttention(cfg.dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ffn = nn.FeedForward(cfg.dim, int(cfg.dim * cfg.ffn_ratio), rng)

    def forward(self, z: np.ndarray, s: np.ndarray):
        if z.shape[-1] != s.shape[-1]:
            raise ValueError("template/search width mismatch")
        nz = z.shape[1]
        u = np.concatenate([z, s], axis=1)
        n1, c_ln1 = self.ln1.forward(u)
        a, c_attn = self.attn.forward(n1, n1)
        u1 = u + a
        n2, c_ln2 = self.ln2.forward(u1)
        f, c_ffn = self.ffn.forward(n2)
        u2 = u1 + f
        cache = (nz, c_ln1, c_attn, c_ln2, c_ffn)
        return u2[:, :nz], u2[:, nz:], cache

    def backward(self, dz: np.ndarray, ds: np.ndarray, cache):
        nz, c_ln1, c_attn, c_ln2, c_ffn = cache
        du2 = np.concatenate([dz, ds], axis=1)
        dn2 = self.ffn.backward(du2, c_ffn)
        du1 = du2 + self.ln2.backward(dn2, c_ln2)
        dq, dkv = self.attn.backward(du1, c_attn)
        du = du1 + self.ln1.backward(dq + dkv, c_ln1)
        return du[:, :nz], du[:, nz:]

    def params(self) -> dict:
        out = {}
        for name, sub in (("ln1", self.ln1), ("attn", self.attn),
                          ("ln2", self.ln2), ("ffn", self.ffn)):
            out.update(nn.collect_params(name, sub))
        return out


class DenoisingBlock:
    """One denoising step: cross-attend to search tokens, FFN, subtract noise."""

    def __init__(self, cfg: VitConfig, rng, head_active: bool):
        self.ln_q = nn.LayerNorm(cfg.dim)
        self.ln_kv = nn.LayerNorm(cfg.dim)
        self.attn = nn.MultiHeadAttention(cfg.dim, cfg.heads, rng)
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.ffn = nn.FeedForward(cfg.dim, int(cfg.dim * cfg.ffn_ratio), rng)
        # NoisePred: two linear layers around a ReLU, no normalization
        self.np1 = nn.Linear(cfg.dim, cfg.dim, rng)
        self.np2 = nn.Linear(cfg.dim, cfg.dim, rng)
        self.head_active = head_active

    def forward(self, s: np.ndarray, x: np.ndarray):
        qn, c_lnq = self.ln_q.forward(x)
        kn, c_lnkv = self.ln_kv.forward(s)
        a, c_attn = self.attn.forward(qn, kn)
        x1 = x + a
        f_in, c_lnf = self.ln_f.forward(x1)
        f, c_ffn = self.ffn.forward(f_in)
        x2 = x1 + f
        if self.head_active:
            h, c_np1 = self.np1.forward(x2)
            r = np.maximum(h, 0.0)
            eps, c_np2 = self.np2.forward(r)
        else:
            h, c_np1, c_np2 = None, None, None
            eps = np.zeros_like(x2)
        x_next = x2 - eps
        cache = (c_lnq, c_lnkv, c_attn, c_lnf, c_ffn, c_np1, c_np2, h)
        return x_next, eps, x2, cache

    def backward(self, dx_next: np.ndarray, cache):
        c_lnq, c_lnkv, c_attn, c_lnf, c_ffn, c_np1, c_np2, h = cache
        dx2 = dx_next.copy()
        if self.head_active:
            deps = -dx_next
            dr = self.np2.backward(deps, c_np2)
            dh = dr * (h > 0)
            dx2 += self.np1.backward(dh, c_np1)
        df_in = self.ffn.backward(dx2, c_ffn)
        dx1 = dx2 + self.ln_f.backward(df_in, c_lnf)
        dqn, dkn = self.attn.backward(dx1, c_attn)
        dx = dx1 + self.ln_q.backward(dqn, c_lnq)
        ds = self.ln_kv.backward(dkn, c_lnkv)
        return ds, dx

    def params(self) -> dict:
        out = {}
        for name, sub in (("ln_q", self.ln_q), ("ln_kv", self.ln_kv), ("attn", self.attn),
                          ("ln_f", self.ln_f), ("ffn", self.ffn),
                          ("np1", self.np1), ("np2", self.np2)):
            out.update(nn.collect_params(name, sub))
        return out


class DenoisingViT:
    def __init__(self, cfg: VitConfig, vocab: Vocabulary, rng):
        if vocab.dim != cfg.dim:
            raise ValueError("vocabulary width must match model width")
        self.cfg = cfg
        self.vocab = vocab
        patch_dim = cfg.patch * cfg.patch * 3
        self.patch_embed = nn.Linear(patch_dim, cfg.dim, rng)
        self.pos_template = nn.Param(nn.init_normal(rng, (cfg.tokens_per_template, cfg.dim)))
        self.pos_search = nn.Param(nn.init_normal(rng, (cfg.search_tokens, cfg.dim)))
        self.slot_emb = nn.Param(nn.init_normal(rng, (4, cfg.dim)))
        self.image_blocks = [ImageAttentionBlock(cfg, rng) for _ in range(cfg.depth)]
        self.denoise_blocks = [
            DenoisingBlock(cfg, rng,
                           head_active=(cfg.noise_pred_mode == "per_block") or j == cfg.depth - 1)
            for j in range(cfg.depth)
        ]

    def set_noise_pred_mode(self, mode: str):
        if mode not in NOISE_PRED_MODES:
            raise ValueError(f"noise_pred_mode must be one of {NOISE_PRED_MODES}")
        self.cfg.noise_pred_mode = mode
        for j, blk in enumerate(self.denoise_blocks):
            blk.head_active = (mode == "per_block") or j == self.cfg.depth - 1

    def embed_images(self, templates: np.ndarray, search: np.ndarray):
        cfg = self.cfg
        B, n = templates.shape[0], templates.shape[1]
        tz = patchify(templates.reshape(B * n, cfg.template_size, cfg.template_size, 3), cfg.patch)
        z, cz = self.patch_embed.forward(tz)
        z = z.reshape(B, n * cfg.tokens_per_template, cfg.dim)
        if cfg.template_pos_emb:
            z = z + np.tile(self.pos_template.value, (n, 1))
        ts = patchify(search, cfg.patch)
        s, cs = self.patch_embed.forward(ts)
        s = s + self.pos_search.value
        return z, s, (cz, cs, B, n)

    def forward(self, templates: np.ndarray, search: np.ndarray, box_tokens: np.ndarray):
        """templates (B, n, Hz, Wz, 3), search (B, Hs, Ws, 3), box_tokens (B, 4).

        Returns (ImageTokens, DenoiseTrace, cache). Trace arrays carry the
        batch dimension.
        """
        if search.shape[1] != self.cfg.search_size or templates.shape[2] != self.cfg.template_size:
            raise ValueError("input image size does not match the configured model")
        z, s, c_embed = self.embed_images(templates, search)
        x = self.vocab.embed(box_tokens) + self.slot_emb.value
        trace = DenoiseTrace(states=[x], eps=[], ffn_states=[])
        block_caches = []
        for ib, db in zip(self.image_blocks, self.denoise_blocks):
            z, s, c_ib = ib.forward(z, s)
            x, eps, x2, c_db = db.forward(s, x)
            trace.states.append(x)
            trace.eps.append(eps)
            trace.ffn_states.append(x2)
            block_caches.append((c_ib, c_db))
        cache = (c_embed, block_caches, box_tokens)
        return ImageTokens(z=z, s=s), trace, cache

    def backward(self, dz: np.ndarray | None, ds: np.ndarray | None,
                 dx_final: np.ndarray | None, cache):
        """Backpropagate gradients on the final tokens and final latent."""
        (cz, cs, B, n), block_caches, box_tokens = cache
        cfg = self.cfg
        nz = n * cfg.tokens_per_template
        ns = cfg.search_tokens
        dz = np.zeros((B, nz, cfg.dim)) if dz is None else dz
        ds = np.zeros((B, ns, cfg.dim)) if ds is None else ds.copy()
        dx = np.zeros((B, 4, cfg.dim)) if dx_final is None else dx_final
        for ib, db, (c_ib, c_db) in zip(reversed(self.image_blocks),
                                        reversed(self.denoise_blocks),
                                        reversed(block_caches)):
            ds_db, dx = db.backward(dx, c_db)
            dz, ds = ib.backward(dz, ds + ds_db, c_ib)
        self.slot_emb.grad += dx.sum(axis=0)
        self.vocab.embed_backward(box_tokens, dx)
        if cfg.template_pos_emb:
            self.pos_template.grad += dz.reshape(B, n, cfg.tokens_per_template, cfg.dim).sum(axis=(0, 1))
        self.pos_search.grad += ds.sum(axis=0)
        dtz = self.patch_embed.backward(dz.reshape(B * n, cfg.tokens_per_template, cfg.dim), cz)
        dts = self.patch_embed.backward(ds, cs)
        d_templates = unpatchify_grad(dtz, cfg.template_size, cfg.template_size, cfg.patch)
        d_search = unpatchify_grad(dts, cfg.search_size, cfg.search_size, cfg.patch)
        return d_templates.reshape(B, n, cfg.template_size, cfg.template_size, 3), d_search

    def params(self) -> dict:
        out = {"patch_embed.w": self.patch_embed.w, "patch_embed.b": self.patch_embed.b,
               "pos_template": self.pos_template, "pos_search": self.pos_search,
               "slot_emb": self.slot_emb}
        for j, blk in enumerate(self.image_blocks):
            out.update(nn.collect_params(f"image_block{j}", blk))
        for j, blk in enumerate(self.denoise_blocks):
            out.update(nn.collect_params(f"denoise_block{j}", blk))
        return out


def intermediate_decode(trace: DenoiseTrace, j: int, vocab: Vocabulary,
                        item: int = 0) -> tuple[BoundingBox, float]:
    """Decode the latent after block j (j = 0 is the raw input) without the refiner."""
    if not 0 <= j < len(trace.states):
        raise ValueError(f"block index {j} outside trace")
    latent = trace.states[j][item]
    logits = vocab.readout(latent)
    return decode_box(CoordLogits.from_logits(logits), vocab.bins)


def zero_residual_branches(vit: DenoisingViT):
    """Zero attention out-projections and FFN second layers of the denoising blocks.

    In this regime each block reduces to x_next = x - NoisePred(x), so the
    final latent equals the input minus the summed predicted noises exactly.
    """
    for blk in vit.denoise_blocks:
        blk.attn.wo.w.value[...] = 0.0
        blk.attn.wo.b.value[...] = 0.0
        blk.ffn.lin2.w.value[...] = 0.0
        blk.ffn.lin2.b.value[...] = 0.0
