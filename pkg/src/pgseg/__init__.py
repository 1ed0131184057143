"""Prior-guided multi-organ segmentation (desk-scale)."""

from pgseg.vocab import ORGANS, NUM_CLASSES, VocabularyError

__version__ = "0.1.0"

__all__ = ["ORGANS", "NUM_CLASSES", "VocabularyError", "__version__"]
