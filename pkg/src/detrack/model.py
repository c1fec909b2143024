"""Full tracker model: vocabulary + denoising ViT + refiner + quality head.

Also owns the versioned checkpoint container and the analytic
multiply-accumulate estimate used by the CLI info command.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .refiner import BoxRefiner
from .scorer import QualityScorer
from .vit import DenoisingViT, VitConfig
from .vocab import CoordLogits, Vocabulary

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vit: VitConfig
    bins: int = 100
    tied: bool = True
    refiner_layers: int = 6
    use_template_kv: bool = False
    scorer_hidden: int = 256

    @staticmethod
    def from_flat(cfg: dict) -> "ModelConfig":
        vit = VitConfig(depth=cfg["vit.depth"], dim=cfg["vit.dim"], heads=cfg["vit.heads"],
                        patch=cfg["vit.patch"], ffn_ratio=cfg["vit.ffn_ratio"],
                        noise_pred_mode=cfg["vit.noise_pred_mode"],
                        template_size=cfg["data.template_size"],
                        search_size=cfg["data.search_size"],
                        template_pos_emb=cfg["vit.template_pos_emb"])
        if cfg["vocab.dim"] != cfg["vit.dim"]:
            raise ValueError("vocab.dim must equal vit.dim")
        return ModelConfig(vit=vit, bins=cfg["vocab.bins"], tied=cfg["vocab.tied"],
                           refiner_layers=cfg["refiner.layers"],
                           use_template_kv=cfg["refiner.use_template_kv"],
                           scorer_hidden=cfg["iounet.hidden"])


@dataclass
class ForwardOut:
    image_tokens: object
    trace: object
    refined: np.ndarray
    logits: CoordLogits
    cache: tuple


class DeTrackModel:
    def __init__(self, mc: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD37A]))
        self.mc = mc
        self.vocab = Vocabulary(mc.bins, mc.vit.dim, rng, tied=mc.tied)
        self.vit = DenoisingViT(mc.vit, self.vocab, rng)
        self.refiner = BoxRefiner(mc.vit.dim, mc.vit.heads, mc.vit.ffn_ratio,
                                  mc.refiner_layers, self.vocab, rng)
        self.scorer = QualityScorer(mc.vit.dim, mc.scorer_hidden,
                                    mc.vit.search_size // mc.vit.patch, rng)

    # -- parameters ---------------------------------------------------------

    def param_groups(self) -> dict[str, dict[str, nn.Param]]:
        vit_params = nn.collect_params("vit", self.vit)
        vit_params.update(nn.collect_params("vocab", self.vocab))
        return {"vit": vit_params,
                "refiner": nn.collect_params("refiner", self.refiner),
                "scorer": nn.collect_params("scorer", self.scorer)}

    def params(self) -> dict[str, nn.Param]:
        out = {}
        for group in self.param_groups().values():
            out.update(group)
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params().values())

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    # -- forward / backward -------------------------------------------------

    def forward(self, templates: np.ndarray, search: np.ndarray,
                box_tokens: np.ndarray, traj_tokens: np.ndarray | None = None,
                refiner_layers: int | None = None) -> ForwardOut:
        """templates (B, n, Hz, Wz, 3), search (B, Hs, Ws, 3), box_tokens (B, 4)
        ints, traj_tokens (B, k, 4) ints oldest first or None."""
        image_tokens, trace, vit_cache = self.vit.forward(templates, search, box_tokens)
        if traj_tokens is not None and traj_tokens.size:
            traj_latents = self.vocab.embed(traj_tokens) + self.vit.slot_emb.value
        else:
            traj_latents = None
        if self.mc.use_template_kv:
            kv = np.concatenate([image_tokens.s, image_tokens.z], axis=1)
        else:
            kv = image_tokens.s
        refined, logits, ref_cache = self.refiner.refine(
            traj_latents, trace.states[-1], kv, layers=refiner_layers)
        return ForwardOut(image_tokens=image_tokens, trace=trace, refined=refined,
                          logits=logits, cache=(vit_cache, ref_cache))

    def backward(self, out: ForwardOut, dlogits: np.ndarray,
                 d_state_final: np.ndarray | None = None):
        """Accumulate gradients from the refined logits (and optionally an
        extra gradient on the final denoised latent) into all parameters."""
        vit_cache, ref_cache = out.cache
        d_current, d_kv = self.refiner.backward(dlogits, ref_cache)
        if d_state_final is not None:
            d_current = d_current + d_state_final
        if self.mc.use_template_kv:
            ns = out.image_tokens.s.shape[1]
            ds, dz = d_kv[:, :ns], d_kv[:, ns:]
        else:
            ds, dz = d_kv, None
        self.vit.backward(dz, ds, d_current, vit_cache)

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
        for name, p in params.items():
            if arrays[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value[...] = arrays[name]


def build_model(cfg: dict) -> DeTrackModel:
    return DeTrackModel(ModelConfig.from_flat(cfg), seed=cfg["run.seed"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: DeTrackModel, config: dict,
                    optimizer: nn.AdamW | None = None, extra: dict | None = None):
    arrays = {"__version__": np.array(CHECKPOINT_VERSION),
              "__config__": np.array(json.dumps(config, sort_keys=True))}
    for name, value in model.state_arrays().items():
        arrays[f"param/{name}"] = value
    if optimizer is not None:
        for name, value in optimizer.state_arrays().items():
            arrays[f"opt/{name}"] = value
    if extra:
        arrays["__extra__"] = np.array(json.dumps(extra, sort_keys=True))
    np.savez_compressed(path, **arrays)


def load_checkpoint(path: str):
    """Returns (config dict, param arrays, optimizer arrays, extra dict)."""
    try:
        npz = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from None
    if "__version__" not in npz or int(npz["__version__"]) > CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    config = json.loads(str(npz["__config__"].item()))
    params = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    opt = {k[len("opt/"):]: npz[k] for k in npz.files if k.startswith("opt/")}
    extra = json.loads(str(npz["__extra__"].item())) if "__extra__" in npz.files else {}
    return config, params, opt, extra


def load_model(path: str) -> tuple[DeTrackModel, dict]:
    config, params, _, _ = load_checkpoint(path)
    model = build_model(config)
    model.load_state_arrays(params)
    return model, config


# ---------------------------------------------------------------------------
# analytic cost model (multiply-accumulates for one forward pass)


def flops_estimate(cfg: dict, n_templates: int | None = None,
                   traj_boxes: int | None = None) -> int:
    """Multiply-accumulate count of one forward pass, matching what the
    runtime flop meter measures for the same token counts."""
    mc = ModelConfig.from_flat(cfg)
    C = mc.vit.dim
    H = int(C * mc.vit.ffn_ratio)
    n = cfg["memory.visual_len"] if n_templates is None else n_templates
    k = cfg["memory.traj_len"] if traj_boxes is None else traj_boxes
    nz = n * mc.vit.tokens_per_template
    ns = mc.vit.search_tokens
    pdim = mc.vit.patch * mc.vit.patch * 3

    total = (nz + ns) * pdim * C  # patch embedding
    t = nz + ns
    per_image_block = t * C * 3 * C + 2 * t * t * C + t * C * C + 2 * t * C * H
    total += mc.vit.depth * per_image_block
    heads = mc.vit.depth if mc.vit.noise_pred_mode == "per_block" else 1
    per_denoise = (4 * C * C + 2 * ns * C * C + 2 * 4 * ns * C
                   + 4 * C * C + 2 * 4 * C * H)
    total += mc.vit.depth * per_denoise + heads * 2 * 4 * C * C
    tr = 4 * (k + 1)
    nkv = ns + (nz if mc.use_template_kv else 0)
    per_refiner = (tr * C * 3 * C + 2 * tr * tr * C + tr * C * C
                   + tr * C * C + 2 * nkv * C * C + 2 * tr * nkv * C + tr * C * C
                   + 2 * tr * C * H)
    total += mc.refiner_layers * per_refiner
    total += 4 * C * mc.bins  # vocabulary readout
    total += (C + 4) * mc.scorer_hidden + mc.scorer_hidden  # quality head
    return int(total)
