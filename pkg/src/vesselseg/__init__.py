"""Small-vessel segmentation: a Siamese multi-scale-supervised 3D U-Net trained
with an elastic-deformation consistency loss, a Frangi baseline, and the
data plumbing around them."""

__version__ = "0.1.0"
