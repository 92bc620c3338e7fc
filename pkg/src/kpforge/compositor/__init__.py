"""Cut-and-paste training image generation."""

from .blending import (BLEND_MODES, BlendError, PoissonConvergenceError, alpha_blend,
                       discrete_laplacian, laplacian_blend, poisson_blend)
from .compose import (AffineMap, CompositeRejected, CompositeSpec, ForegroundAsset,
                      augment_with_distractors, compose_sample, load_asset, load_assets,
                      load_backgrounds, paste_distractor, sample_spec, save_asset)
from .generate import generate_dataset

__all__ = [
    "BLEND_MODES", "BlendError", "PoissonConvergenceError", "alpha_blend", "discrete_laplacian",
    "laplacian_blend", "poisson_blend", "AffineMap", "CompositeRejected", "CompositeSpec",
    "ForegroundAsset", "augment_with_distractors", "compose_sample", "load_asset", "load_assets",
    "load_backgrounds", "paste_distractor", "sample_spec", "save_asset", "generate_dataset",
]
