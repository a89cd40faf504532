"""agrisim: deterministic simulation of an aerial-ground precision farming stack.

Synthetic row-crop fields, multispectral rasters and colored clouds, crop-row
detection and row-relative localization, sliding-window pose-graph fusion,
aerial-ground and temporal map registration, informative path planning over a
GP terrain belief, UAV-UGV mission coordination over lossy links, and plant
level weed treatment, all seeded and reproducible.
"""

from .errors import AgrisimError, ConfigError

__version__ = "0.1.0"

__all__ = ["AgrisimError", "ConfigError", "__version__"]
