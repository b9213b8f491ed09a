"""Deformable 2D Gaussian video representation with scale-aware grouping and progressive coding."""

import warnings

# numba warns about the TBB version at import on some systems; the workqueue
# fallback is used and results are unaffected.
warnings.filterwarnings("ignore", message=".*TBB.*")

from .gaussian import Gaussian2D, GaussianSet  # noqa: E402
from .model import GopModel  # noqa: E402
from .raster import area_downsample, render, render_at_scale  # noqa: E402

__all__ = ["Gaussian2D", "GaussianSet", "GopModel", "area_downsample", "render", "render_at_scale"]
__version__ = "0.1.0"
