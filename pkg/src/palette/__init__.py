"""Cultural Palette: gate-weighted expert merging, preference alignment, and
country-level opinion evaluation at desk scale."""

__version__ = "0.1.0"

from .common import CONTINENTS

__all__ = ["CONTINENTS", "__version__"]
