"""Image frames, scan geometry metadata and their on-disk form.

A frame on disk is a grayscale PNG plus a ``key=value`` sidecar text file
with the same stem and a ``.txt`` suffix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image

from .boxes import BoundingBox
from .errors import GeometryError

CARTESIAN = "cartesian_frustum"
POLAR = "polar"
REPRESENTATIONS = (CARTESIAN, POLAR)


@dataclass(frozen=True)
class ScanParameters:
    """Acquisition geometry of a sector scan.

    Lengths are in millimetres, ``sector_width`` is the full aperture in
    radians. ``apex_offset`` is the distance from the top image row to the
    virtual transducer apex, which sits above the image.
    """

    depth_of_scan: float
    voxel_size: float
    sector_width: float
    zoom_level: float = 1.0
    apex_offset: float = 0.0

    def validate(self) -> "ScanParameters":
        vals = (self.depth_of_scan, self.voxel_size, self.sector_width,
                self.zoom_level, self.apex_offset)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite scan parameters: {self}")
        if self.depth_of_scan <= 0:
            raise GeometryError("depth_of_scan must be positive")
        if self.voxel_size <= 0:
            raise GeometryError("voxel_size must be positive")
        if not 0 < self.sector_width < math.pi:
            raise GeometryError("sector_width must lie in (0, pi)")
        if self.zoom_level < 1:
            raise GeometryError("zoom_level must be >= 1")
        if self.apex_offset < 0:
            raise GeometryError("apex_offset must be >= 0")
        return self

    @property
    def pixel_spacing(self) -> float:
        """Displayed millimetres per pixel once zoom is applied."""
        return self.voxel_size / self.zoom_level


@dataclass
class ImageFrame:
    pixels: np.ndarray
    representation: str = CARTESIAN
    subject_id: str = ""
    label: Optional[str] = None
    scan_params: Optional[ScanParameters] = None
    gt_box: Optional[BoundingBox] = None
    # coordinate transform from the source frame, set by preprocess()
    transform: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"frame pixels must be 2D, got shape {self.pixels.shape}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("frame intensities must lie in [0, 1]")
        if self.representation == CARTESIAN and self.scan_params is None:
            raise GeometryError("cartesian frustum frames require scan_params")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, **changes) -> "ImageFrame":
        return replace(self, pixels=pixels, **changes)


# -- disk I/O ---------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG into floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        raise ValueError(f"{path}: expected a grayscale image")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int64):
        # PIL opens 16-bit PNGs as mode I;16 or I
        return arr.astype(np.float64) / 65535.0
    raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")


def write_png(path, pixels: np.ndarray, bits: int = 8) -> None:
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.round(pixels * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(pixels * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


SIDECAR_KEYS = {
    "depth_mm": "depth_of_scan",
    "voxel_mm": "voxel_size",
    "sector_rad": "sector_width",
    "zoom": "zoom_level",
    "apex_mm": "apex_offset",
}


def sidecar_path(png_path) -> Path:
    return Path(png_path).with_suffix(".txt")


def write_sidecar(path, frame: ImageFrame) -> None:
    lines = [f"representation={frame.representation}",
             f"subject={frame.subject_id}",
             f"label={frame.label or ''}"]
    if frame.scan_params is not None:
        for key, attr in SIDECAR_KEYS.items():
            lines.append(f"{key}={getattr(frame.scan_params, attr)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict[str, str]:
    meta = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed sidecar line {raw!r}")
        meta[key.strip()] = value.strip()
    return meta


def scan_params_from_meta(meta: dict[str, str]) -> Optional[ScanParameters]:
    if "depth_mm" not in meta:
        return None
    try:
        kwargs = {attr: float(meta[key]) for key, attr in SIDECAR_KEYS.items() if key in meta}
        return ScanParameters(**kwargs).validate()
    except (TypeError, ValueError) as exc:
        raise GeometryError(f"invalid scan metadata: {exc}") from exc


def load_frame(png_path, gt_box: Optional[BoundingBox] = None) -> ImageFrame:
    pixels = read_png(png_path)
    side = sidecar_path(png_path)
    meta = read_sidecar(side) if side.exists() else {}
    params = scan_params_from_meta(meta)
    rep = meta.get("representation") or (CARTESIAN if params is not None else POLAR)
    return ImageFrame(
        pixels=pixels,
        representation=rep,
        subject_id=meta.get("subject", ""),
        label=meta.get("label") or None,
        scan_params=params,
        gt_box=gt_box,
    )


def save_frame(png_path, frame: ImageFrame, bits: int = 8) -> None:
    write_png(png_path, frame.pixels, bits=bits)
    write_sidecar(sidecar_path(png_path), frame)
