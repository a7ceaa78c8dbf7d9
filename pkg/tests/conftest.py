import hashlib

import numpy as np

from focaldepth.camera import CameraIntrinsics
from focaldepth.dataset_io import AugmentationTag, RgbdSample
from focaldepth.numerics import Plane2D


def tree_digest(root):
    """Order-stable digest of every file under root (byte-identity checks)."""
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def centered_camera(height, width, fx=50.0, fy=None):
    """Camera with the principal point at the pixel-center image center."""
    return CameraIntrinsics(fx, fy if fy is not None else fx, (width - 1) / 2.0, (height - 1) / 2.0)


def make_rgbd(height=20, width=30, seed=0, fx=50.0, depth_range=(0.5, 6.0),
              invalid_fraction=0.0, source_id="sample"):
    """Random but valid RGB-D sample with a centered principal point."""
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    depth = rng.uniform(*depth_range, (height, width))
    mask = np.ones((height, width))
    if invalid_fraction > 0:
        mask = (rng.uniform(size=(height, width)) >= invalid_fraction).astype(np.float64)
    depth = np.where(mask == 1, depth, 0.0)
    return RgbdSample(
        rgb=rgb,
        depth=Plane2D(depth),
        valid_mask=Plane2D(mask),
        intrinsics=centered_camera(height, width, fx),
        source_id=source_id,
        tag=AugmentationTag.original(),
    )
