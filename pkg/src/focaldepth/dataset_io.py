"""RGB-D sample and manifest I/O.

On-disk contract: a manifest is UTF-8 JSON Lines, one record per line with
fields rgb_path, depth_path, fx, fy, cx, cy, depth_scale, source_id and an
optional augmentation tag; unknown fields are ignored, duplicate source_id
values are rejected, and paths resolve relative to the manifest's directory.
RGB images are 8-bit 3-channel PNG; depth maps are single-channel 16-bit PNG
storing depth_scale raw units per meter with raw 0 as the invalid sentinel.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics
from .errors import (
    ArgumentError,
    BitDepthError,
    DimensionError,
    ManifestError,
    MissingFileError,
)
from .numerics import Plane2D

log = logging.getLogger(__name__)

MODE_ORIGINAL = "original"
MODE_FOCAL_CHANGE = "focal_change"
MODE_DEPTH_RESCALE = "depth_rescale"
_MODES = (MODE_ORIGINAL, MODE_FOCAL_CHANGE, MODE_DEPTH_RESCALE)

DEFAULT_DEPTH_SCALE = 1000.0  # millimeter PNGs


@dataclass(frozen=True)
class AugmentationTag:
    """Provenance of a sample: how it was derived and with which crop factor."""

    mode: str = MODE_ORIGINAL
    k: Optional[float] = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ArgumentError(f"unknown augmentation mode {self.mode!r}")
        if self.mode == MODE_ORIGINAL and self.k is not None:
            raise ArgumentError("original samples carry no crop factor")
        if self.mode != MODE_ORIGINAL and (self.k is None or not 0 < self.k <= 1):
            raise ArgumentError(f"crop factor must be in (0, 1], got {self.k}")

    @classmethod
    def original(cls):
        return cls(MODE_ORIGINAL)

    @classmethod
    def focal_change(cls, k: float):
        return cls(MODE_FOCAL_CHANGE, float(k))

    @classmethod
    def depth_rescale(cls, k: float):
        return cls(MODE_DEPTH_RESCALE, float(k))

    def to_json(self) -> dict:
        out = {"mode": self.mode}
        if self.k is not None:
            out["k"] = self.k
        return out

    @classmethod
    def from_json(cls, obj) -> "AugmentationTag":
        if obj is None:
            return cls.original()
        return cls(obj.get("mode", MODE_ORIGINAL), obj.get("k"))


@dataclass
class RgbdSample:
    """An in-memory RGB-D pair with focal metadata and provenance."""

    rgb: np.ndarray  # (H,W,3) uint8
    depth: Plane2D  # meters
    valid_mask: Plane2D  # {0,1}
    intrinsics: CameraIntrinsics
    source_id: str
    tag: AugmentationTag = field(default_factory=AugmentationTag.original)

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb)
        if self.rgb.dtype != np.uint8 or self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DimensionError(f"rgb must be (H,W,3) uint8, got {self.rgb.shape} {self.rgb.dtype}")
        hw = self.rgb.shape[:2]
        if self.depth.shape != hw or self.valid_mask.shape != hw:
            raise DimensionError(
                f"rgb {hw}, depth {self.depth.shape}, mask {self.valid_mask.shape} disagree"
            )
        m = self.valid_mask.data
        if not np.all((m == 0) | (m == 1)):
            raise ArgumentError("valid_mask must contain only 0 and 1")
        if np.any(self.depth.data[m == 1] <= 0):
            raise ArgumentError("depth must be positive wherever valid_mask == 1")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class ManifestRecord:
    rgb_path: str
    depth_path: str
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float
    source_id: str
    augmentation: AugmentationTag = field(default_factory=AugmentationTag.original)

    def __post_init__(self):
        if self.depth_scale <= 0:
            raise ManifestError(f"depth_scale must be positive, got {self.depth_scale}")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def to_json_line(self) -> str:
        obj = {
            "rgb_path": self.rgb_path,
            "depth_path": self.depth_path,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "depth_scale": self.depth_scale,
            "source_id": self.source_id,
        }
        if self.augmentation.mode != MODE_ORIGINAL:
            obj["augmentation"] = self.augmentation.to_json()
        return json.dumps(obj)

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        try:
            return cls(
                rgb_path=obj["rgb_path"],
                depth_path=obj["depth_path"],
                fx=float(obj["fx"]),
                fy=float(obj["fy"]),
                cx=float(obj["cx"]),
                cy=float(obj["cy"]),
                depth_scale=float(obj["depth_scale"]),
                source_id=str(obj["source_id"]),
                augmentation=AugmentationTag.from_json(obj.get("augmentation")),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest record missing field {exc}") from exc


@dataclass
class Manifest:
    records: list
    base_dir: Path

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        seen = set()
        for rec in self.records:
            if rec.source_id in seen:
                raise ManifestError(f"duplicate source_id {rec.source_id!r}")
            seen.add(rec.source_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            records.append(ManifestRecord.from_json(obj))
        return cls(records, path.parent)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            "".join(rec.to_json_line() + "\n" for rec in self.records), encoding="utf-8"
        )
        return path


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise BitDepthError(f"{path}: expected 8-bit RGB PNG, got mode {img.mode!r}")
        return np.asarray(img, dtype=np.uint8)


def _load_depth_raw(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I"):
            raise BitDepthError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode!r}")
        arr = np.asarray(img)
    if arr.min() < 0 or arr.max() > 65535:
        raise BitDepthError(f"{path}: raw depth values outside 16-bit range")
    return arr.astype(np.uint16)


def load_sample(record: ManifestRecord, base_dir) -> RgbdSample:
    """Materialize a manifest record: depth in meters, raw 0 masked out."""
    base_dir = Path(base_dir)
    rgb_path = base_dir / record.rgb_path
    depth_path = base_dir / record.depth_path
    for p in (rgb_path, depth_path):
        if not p.exists():
            raise MissingFileError(f"file not found: {p}")
    rgb = _load_rgb(rgb_path)
    raw = _load_depth_raw(depth_path)
    if raw.shape != rgb.shape[:2]:
        raise DimensionError(f"rgb {rgb.shape[:2]} vs depth {raw.shape} in {record.source_id!r}")
    depth = raw.astype(np.float64) / record.depth_scale
    mask = (raw > 0).astype(np.float64)
    return RgbdSample(
        rgb=rgb,
        depth=Plane2D(depth),
        valid_mask=Plane2D(mask),
        intrinsics=record.intrinsics(),
        source_id=record.source_id,
        tag=record.augmentation,
    )


def quantize_depth(depth: Plane2D, mask: Plane2D, depth_scale: float):
    """Depth (m) -> (uint16 raw at depth_scale units/m, clamped pixel count)."""
    raw = np.rint(depth.data * depth_scale)
    raw = np.where(mask.data == 1, raw, 0.0)
    clamped = int(np.count_nonzero(raw > 65535))
    return np.clip(raw, 0, 65535).astype(np.uint16), clamped


def write_sample(sample: RgbdSample, out_dir, depth_scale: float = DEFAULT_DEPTH_SCALE) -> ManifestRecord:
    """Write a sample's PNG pair into out_dir and return its manifest record.

    Depth values beyond the representable 16-bit range are clamped and
    counted (logged as a warning), never a failure.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb_name = f"{sample.source_id}_rgb.png"
    depth_name = f"{sample.source_id}_depth.png"
    Image.fromarray(sample.rgb, mode="RGB").save(out_dir / rgb_name)
    raw, clamped = quantize_depth(sample.depth, sample.valid_mask, depth_scale)
    if clamped:
        log.warning(
            "%s: %d depth pixels exceeded the 16-bit range at scale %g and were clamped",
            sample.source_id, clamped, depth_scale,
        )
    Image.fromarray(raw).save(out_dir / depth_name)
    return ManifestRecord(
        rgb_path=rgb_name,
        depth_path=depth_name,
        fx=sample.intrinsics.fx,
        fy=sample.intrinsics.fy,
        cx=sample.intrinsics.cx,
        cy=sample.intrinsics.cy,
        depth_scale=depth_scale,
        source_id=sample.source_id,
        augmentation=sample.tag,
    )


def with_tag(record: ManifestRecord, tag: AugmentationTag) -> ManifestRecord:
    return replace(record, augmentation=tag)
