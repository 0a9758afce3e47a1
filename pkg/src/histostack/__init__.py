"""histostack: 3D reconstruction toolkit for serial section image stacks.

Reconstructs a smooth volume from misaligned, intensity-inconsistent 2D
section images.  The stages: intensity standardization onto a learned
standard scale, global affine registration in an edgeness feature space
(serially composed along the stack), locally-affine elastic refinement,
automatic best-reference-slice selection per subvolume, rigid chaining of
subvolumes, and smoothness scoring with the correspondence alignment
measure (CAM).
"""

__version__ = "0.1.0"

from histostack.image import Image, Pyramid
from histostack.transform import Affine2D, LocalAffineField, TransformChain

__all__ = [
    "Image",
    "Pyramid",
    "Affine2D",
    "LocalAffineField",
    "TransformChain",
    "__version__",
]
