"""Procedural textured-plane RGB-D scenes.

Each scene is a fronto-parallel textured wall at a per-sample depth, with an
optional smaller fronto-parallel patch floating in front of it. Texture
brightness is tied to world position, so image appearance encodes the
scene-size-to-focal ratio: the same picture can come from a near wall shot
wide or a far wall shot narrow, which is exactly the ambiguity a
focal-conditioned model is supposed to resolve and a focal-blind model
cannot. Depth maps are analytic, so these scenes double as exact geometry
oracles.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics
from .dataset_io import AugmentationTag, Manifest, RgbdSample, write_sample
from .errors import ArgumentError
from .numerics import Plane2D

DEFAULT_DEPTH_RANGE = (1.8, 4.2)
PATCH_HALF_SIZE = 0.15  # meters
PATCH_DEPTH_RATIO = 0.6
_RADIAL_SCALE = 3.0  # meters of lateral distance per full brightness swing


def scene_camera(focal: float, height: int, width: int) -> CameraIntrinsics:
    """Single-focal camera with the principal point at the image center."""
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)


def _wall_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(3,H,W) texture in [0,1] as a function of world position on the plane.

    Brightness is dominated by the distance from the plane's origin, so the
    apparent shading gradient of a view encodes how many meters of wall the
    frame spans (scene-size/focal ambiguity made legible)."""
    radial = np.hypot(x, y)
    ch0 = 0.05 + 0.90 * np.clip(radial / _RADIAL_SCALE, 0.0, 1.0)
    ch1 = 0.5 + 0.25 * np.sin(2 * np.pi * x / 0.8) * np.sin(2 * np.pi * y / 0.8)
    ch2 = 0.10 + 0.80 * np.clip(0.5 * (x + y) / _RADIAL_SCALE + 0.5, 0.0, 1.0)
    return np.stack([ch0, ch1, ch2])


def render_plane_scene(
    cam: CameraIntrinsics,
    height: int,
    width: int,
    wall_depth: float,
    with_patch: bool = True,
    patch_center=(0.0, 0.1),
    source_id: str = "scene",
    tag: AugmentationTag = None,
) -> RgbdSample:
    """Render the wall (+ optional front patch) seen by cam at H x W."""
    if wall_depth <= 0:
        raise ArgumentError(f"wall depth must be positive, got {wall_depth}")
    # x/z and y/z along each pixel ray, (H,W)
    dir_x, dir_y = np.meshgrid(
        (np.arange(width) - cam.cx) / cam.fx,
        (np.arange(height) - cam.cy) / cam.fy,
    )

    rgb01 = _wall_texture(dir_x * wall_depth, dir_y * wall_depth)
    depth = np.full((height, width), wall_depth)

    if with_patch:
        patch_depth = PATCH_DEPTH_RATIO * wall_depth
        px = dir_x * patch_depth
        py = dir_y * patch_depth
        hit = (np.abs(px - patch_center[0]) <= PATCH_HALF_SIZE) & (
            np.abs(py - patch_center[1]) <= PATCH_HALF_SIZE
        )
        patch_tex = 0.45 * _wall_texture(px, py) + 0.05
        rgb01 = np.where(hit[None], patch_tex, rgb01)
        depth = np.where(hit, patch_depth, depth)

    rgb = np.clip(np.rint(rgb01 * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return RgbdSample(
        rgb=rgb,
        depth=Plane2D(depth),
        valid_mask=Plane2D(np.ones((height, width))),
        intrinsics=cam,
        source_id=source_id,
        tag=tag or AugmentationTag.original(),
    )


def sample_set(
    count: int,
    focal: float,
    height: int,
    width: int,
    seed: int,
    depth_range=DEFAULT_DEPTH_RANGE,
    with_patch: bool = True,
    id_prefix: str = "synth",
) -> list:
    """Scenes with per-sample wall depths and patch placements."""
    rng = np.random.default_rng(seed)
    cam = scene_camera(focal, height, width)
    samples = []
    for i in range(count):
        wall_depth = float(rng.uniform(*depth_range))
        patch_center = (float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.25, 0.25)))
        samples.append(
            render_plane_scene(
                cam, height, width, wall_depth,
                with_patch=with_patch,
                patch_center=patch_center,
                source_id=f"{id_prefix}_{i:04d}",
            )
        )
    return samples


def write_sample_set(samples, out_dir, depth_scale: float = 1000.0) -> Manifest:
    """Write scenes as PNG pairs plus a manifest.jsonl under out_dir."""
    records = [write_sample(s, out_dir, depth_scale=depth_scale) for s in samples]
    manifest = Manifest(records, out_dir)
    manifest.save(manifest.base_dir / "manifest.jsonl")
    return manifest
