"""DeTrack: box tracking by in-model latent denoising.

A noisy box token sequence is progressively denoised by stacked denoising
blocks inside one ViT forward pass, refined against trajectory and visual
memory, and read out through a coordinate vocabulary.
"""

from .geometry import BoundingBox, PixelBox
from .model import DeTrackModel, build_model, load_model, save_checkpoint

__version__ = "0.1.0"

__all__ = ["BoundingBox", "PixelBox", "DeTrackModel", "build_model",
           "load_model", "save_checkpoint", "__version__"]
