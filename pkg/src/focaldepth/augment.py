"""Focal-diversity augmentation: center crop, nearest-neighbor upsample, and
the two depth treatments.

Both modes crop a factor-k window centered on the principal point and
nearest-neighbor upsample back to the input size. Focal-change mode keeps
every depth value and divides the focal lengths by the realized crop ratio
(the output is the same scene seen at a longer focal length); depth-rescale
mode keeps the focal lengths and multiplies depth by k (the output is a
depth-compressed scene at the original focal length). The principal point is
mapped through crop+resize in both modes; for a centered principal point the
mapping is the identity. Focal corrections use the realized ratios
crop_h/h and crop_w/w rather than the nominal k so the geometry stays exact
under integer rounding of the crop window.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics
from .dataset_io import (
    MODE_DEPTH_RESCALE,
    MODE_FOCAL_CHANGE,
    AugmentationTag,
    Manifest,
    RgbdSample,
    load_sample,
    write_sample,
)
from .errors import ArgumentError, FocalDepthError
from .numerics import Plane2D, nearest_index, round_half_up

log = logging.getLogger(__name__)


def center_crop(sample: RgbdSample, k: float) -> RgbdSample:
    """Crop a factor-k window centered on the principal point.

    The crop offset shifts cx/cy; focal lengths are untouched.
    """
    if not 0 < k <= 1:
        raise ArgumentError(f"crop factor must be in (0, 1], got {k}")
    h, w = sample.height, sample.width
    crop_h = round_half_up(k * h)
    crop_w = round_half_up(k * w)
    if crop_h < 1 or crop_w < 1:
        raise ArgumentError(f"crop factor {k} yields an empty {crop_h}x{crop_w} window")
    cam = sample.intrinsics
    off_y = int(np.clip(round_half_up(cam.cy - crop_h / 2), 0, h - crop_h))
    off_x = int(np.clip(round_half_up(cam.cx - crop_w / 2), 0, w - crop_w))
    sl = (slice(off_y, off_y + crop_h), slice(off_x, off_x + crop_w))
    return RgbdSample(
        rgb=sample.rgb[sl],
        depth=Plane2D(sample.depth.data[sl]),
        valid_mask=Plane2D(sample.valid_mask.data[sl]),
        intrinsics=CameraIntrinsics(cam.fx, cam.fy, cam.cx - off_x, cam.cy - off_y),
        source_id=sample.source_id,
        tag=sample.tag,
    )


def _nn_upsample(cropped: RgbdSample, out_h: int, out_w: int):
    """Upsample all three layers with one shared nearest-neighbor index map.

    Returns the resampled arrays plus the mapped principal point and the
    realized per-axis scale ratios (src/out).
    """
    yi = nearest_index(cropped.height, out_h)
    xi = nearest_index(cropped.width, out_w)
    rgb = cropped.rgb[yi[:, None], xi[None, :]]
    depth = cropped.depth.data[yi[:, None], xi[None, :]]
    mask = cropped.valid_mask.data[yi[:, None], xi[None, :]]
    ky = cropped.height / out_h
    kx = cropped.width / out_w
    cam = cropped.intrinsics
    # A source position s lands at output position (s + 0.5)/ratio - 0.5
    # under the pixel-center convention; map the principal point through it.
    cx = (cam.cx + 0.5) / kx - 0.5
    cy = (cam.cy + 0.5) / ky - 0.5
    return rgb, depth, mask, cx, cy, kx, ky


def augment_focal_change(sample: RgbdSample, k: float) -> RgbdSample:
    """Crop by k and upsample back; depth values unchanged, focal divided by k.

    Equivalent to re-shooting the cropped scene with a focal length of
    roughly fx/k (exactly fx divided by the realized crop ratio).
    """
    cropped = center_crop(sample, k)
    h, w = sample.height, sample.width
    rgb, depth, mask, cx, cy, kx, ky = _nn_upsample(cropped, h, w)
    return RgbdSample(
        rgb=rgb,
        depth=Plane2D(depth),
        valid_mask=Plane2D(mask),
        intrinsics=CameraIntrinsics(cropped.intrinsics.fx / kx, cropped.intrinsics.fy / ky, cx, cy),
        source_id=sample.source_id,
        tag=AugmentationTag.focal_change(k),
    )


def augment_depth_rescale(sample: RgbdSample, k: float) -> RgbdSample:
    """Crop by k and upsample back; depth multiplied by k, focal unchanged."""
    cropped = center_crop(sample, k)
    h, w = sample.height, sample.width
    rgb, depth, mask, cx, cy, _, _ = _nn_upsample(cropped, h, w)
    return RgbdSample(
        rgb=rgb,
        depth=Plane2D(depth * k),
        valid_mask=Plane2D(mask),
        intrinsics=CameraIntrinsics(cropped.intrinsics.fx, cropped.intrinsics.fy, cx, cy),
        source_id=sample.source_id,
        tag=AugmentationTag.depth_rescale(k),
    )


@dataclass(frozen=True)
class AugmentationRecipe:
    """Fully determines one augmented output: crop factor, mode, draw seed."""

    k: float
    mode: str
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.k <= 1:
            raise ArgumentError(f"crop factor must be in (0, 1], got {self.k}")
        if self.mode not in (MODE_FOCAL_CHANGE, MODE_DEPTH_RESCALE):
            raise ArgumentError(f"unknown augmentation mode {self.mode!r}")

    def apply(self, sample: RgbdSample) -> RgbdSample:
        if self.mode == MODE_FOCAL_CHANGE:
            return augment_focal_change(sample, self.k)
        return augment_depth_rescale(sample, self.k)


@dataclass(frozen=True)
class MixPolicy:
    """How augmented modes are mixed across a dataset."""

    focal_change_fraction: float = 0.6
    depth_rescale_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.focal_change_fraction < 0 or self.depth_rescale_fraction < 0:
            raise ArgumentError("mode fractions must be non-negative")
        total = self.focal_change_fraction + self.depth_rescale_fraction
        if abs(total - 1.0) > 1e-9:
            raise ArgumentError(f"mode fractions must sum to 1, got {total}")


def assign_modes(n: int, policy: MixPolicy) -> list:
    """Deterministic stratified mode assignment.

    Exactly round(fraction * n) samples get focal-change mode, so the
    realized fraction is within 0.5/n of the policy for any n and exact
    whenever fraction * n is an integer. The placement (not the count)
    is shuffled from the policy seed.
    """
    n_focal = int(round(policy.focal_change_fraction * n))
    modes = np.array([MODE_DEPTH_RESCALE] * n, dtype=object)
    order = np.random.default_rng(policy.seed).permutation(n)
    modes[order[:n_focal]] = MODE_FOCAL_CHANGE
    return list(modes)


def draw_recipe(policy: MixPolicy, index: int, mode: str, k_range) -> AugmentationRecipe:
    """Per-record recipe; the RNG stream is keyed by (seed, index) so batches
    are reproducible independently of worker scheduling."""
    k_min, k_max = k_range
    if not 0 < k_min <= k_max <= 1:
        raise ArgumentError(f"k range must satisfy 0 < k_min <= k_max <= 1, got {k_range}")
    rng = np.random.default_rng([policy.seed, index])
    k = float(rng.uniform(k_min, k_max))
    return AugmentationRecipe(k=k, mode=mode, seed=policy.seed)


@dataclass
class AugmentOutcome:
    """Result of a batch augmentation: the new manifest plus a failure log."""

    manifest: Manifest
    manifest_path: Optional[Path]
    failures: list = field(default_factory=list)  # (source_id, message)


def augment_dataset(
    manifest: Manifest,
    policy: MixPolicy,
    k_range=(0.7, 1.0),
    out_dir=None,
    jobs: int = 1,
) -> AugmentOutcome:
    """Augment every manifest record and write the results under out_dir.

    Per-sample failures are collected into the outcome instead of aborting
    the batch; the output manifest keeps input order for the successes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = assign_modes(len(manifest), policy)

    def work(item):
        index, record = item
        recipe = draw_recipe(policy, index, modes[index], k_range)
        sample = load_sample(record, manifest.base_dir)
        out = recipe.apply(sample)
        return write_sample(out, out_dir, depth_scale=record.depth_scale)

    results: list = [None] * len(manifest)
    failures = []
    items = list(enumerate(manifest.records))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(work, item): item for item in items}
            for fut, item in futures.items():
                try:
                    results[item[0]] = fut.result()
                except (FocalDepthError, OSError) as exc:
                    failures.append((item[1].source_id, str(exc)))
    else:
        for item in items:
            try:
                results[item[0]] = work(item)
            except (FocalDepthError, OSError) as exc:
                failures.append((item[1].source_id, str(exc)))

    records = [r for r in results if r is not None]
    new_manifest = Manifest(records, out_dir)
    manifest_path = new_manifest.save(out_dir / "manifest.jsonl")
    if failures:
        log.warning("augmentation failed for %d of %d samples", len(failures), len(manifest))
    return AugmentOutcome(manifest=new_manifest, manifest_path=manifest_path, failures=failures)
