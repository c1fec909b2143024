import numpy as np
import pytest

from detrack.model import DeTrackModel, ModelConfig
from detrack.vit import VitConfig


def finite_diff(fn, param_value: np.ndarray, indices, eps: float = 1e-6):
    """Central finite differences of a scalar fn() w.r.t. selected entries of
    an array that fn reads in place."""
    grads = {}
    for idx in indices:
        old = param_value[idx]
        param_value[idx] = old + eps
        lp = fn()
        param_value[idx] = old - eps
        lm = fn()
        param_value[idx] = old
        grads[idx] = (lp - lm) / (2 * eps)
    return grads


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(depth: int = 2, dim: int = 32, heads: int = 2, bins: int = 12,
               refiner_layers: int = 2, noise_pred_mode: str = "per_block",
               template_pos_emb: bool = True, seed: int = 0) -> DeTrackModel:
    mc = ModelConfig(
        vit=VitConfig(depth=depth, dim=dim, heads=heads, patch=16,
                      template_size=32, search_size=64,
                      noise_pred_mode=noise_pred_mode,
                      template_pos_emb=template_pos_emb),
        bins=bins, refiner_layers=refiner_layers, scorer_hidden=16)
    return DeTrackModel(mc, seed=seed)


def model_inputs(rng, batch: int = 2, n_templates: int = 2, bins: int = 12,
                 traj_boxes: int = 0):
    templates = rng.random((batch, n_templates, 32, 32, 3)) * 2 - 1
    search = rng.random((batch, 64, 64, 3)) * 2 - 1
    tokens = rng.integers(0, bins, (batch, 4))
    traj = rng.integers(0, bins, (batch, traj_boxes, 4)) if traj_boxes else None
    return templates, search, tokens, traj
