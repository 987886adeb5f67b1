"""codlab: a desk-scale camouflaged-object-detection laboratory.

Everything runs on CPU from scratch: tensor library with autodiff,
object-gradient label generation, the two-branch segmentation model
with gradient-induced fusion, losses, training, and the standard
five-metric evaluation suite with threshold curves.
"""

__version__ = "0.1.0"
