"""Image-recipe retrieval with two-level cross-attention matching and masked self-distillation."""

from .config import Config
from .model import RecipeImageModel

__version__ = "0.1.0"
__all__ = ["Config", "RecipeImageModel", "__version__"]
