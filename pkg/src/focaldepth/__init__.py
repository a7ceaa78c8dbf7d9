"""Focal-length-aware RGB-D toolkit.

Modules:
    numerics    planes, feature stacks, resampling, gradient tape
    camera      pinhole projection, backprojection, PLY export
    dataset_io  RGB-D sample + manifest reading and writing
    augment     focal-diversity augmentation (crop / resample / depth scale)
    metrics     depth-estimation evaluation metrics
    focal_net   toy focal-conditioned depth model and trainer
    synthetic   procedural textured-plane RGB-D scenes
    cli         command-line front-end
"""

__version__ = "0.1.0"
