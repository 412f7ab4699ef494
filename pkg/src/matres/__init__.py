"""matres: test-time adaptation that lets matching and restoration guide each other.

A frozen matcher estimates the LQ->HQ homography from generative-prior
features, a frozen reference-guided restorer produces the enhanced image, and
only a small zero-initialised adapter is optimised per image pair.
"""

from .adapter import AdapterState, init_adapter
from .evalkit import corner_errors, mauc, psnr, ssim
from .priors import PriorBackbone, extract_prior, init_backbone
from .restorer import Restorer, init_restorer
from .synth import PairSpec, build_corpus, make_pair
from .tta import AdaptConfig, AdaptResult, adapt, baseline

__all__ = [
    "AdaptConfig", "AdaptResult", "AdapterState", "PairSpec", "PriorBackbone", "Restorer",
    "adapt", "baseline", "build_corpus", "corner_errors", "extract_prior", "init_adapter",
    "init_backbone", "init_restorer", "make_pair", "mauc", "psnr", "ssim",
]

__version__ = "0.1.0"
