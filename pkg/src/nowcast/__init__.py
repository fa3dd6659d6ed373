"""Precipitation nowcasting from satellite radiances.

Transformer (ViViT, SWIN-UNETR) and 3D U-Net models mapping a 4-step,
11-band satellite context to 32 future radar rain masks, plus the
loss, threshold, calibration and ensembling machinery around them.
"""

from nowcast.errors import ConfigurationError, DomainError, NowcastError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DomainError", "NowcastError", "__version__"]
