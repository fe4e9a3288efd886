"""Self-supervised content-based retrieval for CT liver slices.

Pipeline: Hounsfield-window the slices two ways, train a siamese encoder on
the paired views, embed everything with the wide window, retrieve by cosine
similarity, and explain retrievals with randomized occlusion saliency.
"""

from . import augment, errors, imaging, index, metrics, relax, selfsup

__all__ = ["augment", "errors", "imaging", "index", "metrics", "relax", "selfsup"]

__version__ = "0.1.0"
