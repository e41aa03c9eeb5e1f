"""Synthetic blood-smear scenes, region detection and multi-label cell typing.

The pipeline runs in four steps. First, detect candidate regions. Next, crop
and resize each region to a fixed patch. Then embed the patch with a frozen
convolutional featurizer and score it with six independent binary heads.
Finally, a small gradient-boosted model flags regions that contain any
abnormal cell type.
"""

from .synthgen import ABNORMAL_TYPES, CELL_TYPES

__version__ = "0.1.0"

__all__ = ["ABNORMAL_TYPES", "CELL_TYPES", "__version__"]
