"""Scan conversion between the cartesian frustum display and polar sampling.

Point arrays throughout are ``(n, 2)`` float arrays of ``(row, col)`` in
pixel-centre coordinates (pixel ``k`` is centred on ``k``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox
from .errors import GeometryError
from .frames import CARTESIAN, POLAR, ImageFrame, ScanParameters

INPUT_SIZE = 224
DEFAULT_CROP = 0.10


@dataclass(frozen=True)
class PolarGrid:
    """Mapping between a cartesian frustum image and a polar raster.

    Polar rows span radii ``apex_offset .. apex_offset + depth_of_scan`` and
    polar columns span beam angles ``-sector/2 .. +sector/2``, both endpoint
    inclusive. The apex sits on the vertical centre line of the image,
    ``apex_offset`` millimetres above the first row.
    """

    params: ScanParameters
    image_shape: tuple[int, int]
    rows: int
    cols: int

    @property
    def apex_col(self) -> float:
        return (self.image_shape[1] - 1) / 2.0

    def _radius(self, i):
        p = self.params
        return p.apex_offset + p.depth_of_scan * i / max(self.rows - 1, 1)

    def _angle(self, j):
        sw = self.params.sector_width
        return -sw / 2 + sw * j / max(self.cols - 1, 1)

    def polar_to_cartesian(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        s = self.params.pixel_spacing
        r = self._radius(pts[:, 0])
        theta = self._angle(pts[:, 1])
        col = self.apex_col + r * np.sin(theta) / s
        row = (r * np.cos(theta) - self.params.apex_offset) / s
        return np.stack([row, col], axis=1)

    def cartesian_to_polar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        p = self.params
        s = p.pixel_spacing
        dx = (pts[:, 1] - self.apex_col) * s
        dy = pts[:, 0] * s + p.apex_offset
        r = np.hypot(dx, dy)
        theta = np.arctan2(dx, dy)
        i = (r - p.apex_offset) * max(self.rows - 1, 1) / p.depth_of_scan
        j = (theta + p.sector_width / 2) * max(self.cols - 1, 1) / p.sector_width
        return np.stack([i, j], axis=1)

    # uniform step interface used by Transform
    forward = cartesian_to_polar
    inverse = polar_to_cartesian


def default_polar_shape(params: ScanParameters) -> tuple[int, int]:
    """Near-isotropic raster: one row per pixel of depth, one column per
    pixel of arc length at mid depth."""
    s = params.pixel_spacing
    rows = max(2, int(round(params.depth_of_scan / s)))
    r_mid = params.apex_offset + params.depth_of_scan / 2
    cols = max(2, int(round(r_mid * params.sector_width / s)))
    return rows, cols


@dataclass(frozen=True)
class RowCrop:
    """Drop ``offset`` rows from the top (and as many from the bottom)."""

    offset: int

    def forward(self, pts):
        pts = np.array(pts, dtype=np.float64).reshape(-1, 2)
        pts[:, 0] -= self.offset
        return pts

    def inverse(self, pts):
        pts = np.array(pts, dtype=np.float64).reshape(-1, 2)
        pts[:, 0] += self.offset
        return pts


@dataclass(frozen=True)
class Resample:
    """Half-pixel-centred scaling between two raster shapes."""

    in_shape: tuple[int, int]
    out_shape: tuple[int, int]

    def _scale(self):
        return (self.out_shape[0] / self.in_shape[0], self.out_shape[1] / self.in_shape[1])

    def forward(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        sy, sx = self._scale()
        return np.stack([(pts[:, 0] + 0.5) * sy - 0.5, (pts[:, 1] + 0.5) * sx - 0.5], axis=1)

    def inverse(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        sy, sx = self._scale()
        return np.stack([(pts[:, 0] + 0.5) / sy - 0.5, (pts[:, 1] + 0.5) / sx - 0.5], axis=1)


@dataclass(frozen=True)
class Transform:
    """Composition of coordinate steps, applied left to right."""

    steps: tuple = ()
    out_shape: Optional[tuple[int, int]] = None

    def then(self, step, out_shape) -> "Transform":
        return Transform(self.steps + (step,), tuple(out_shape))

    def forward(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        for step in self.steps:
            pts = step.forward(pts)
        return pts

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        for step in reversed(self.steps):
            pts = step.inverse(pts)
        return pts

    def map_box(self, box: BoundingBox, samples: int = 64) -> Optional[BoundingBox]:
        """Tight box around the image of ``box``'s outline.

        Edges are sampled densely since the polar map bends straight lines.
        Returns None if the mapped box falls outside the output raster.
        """
        x0, x1 = box.x0 - 0.5, box.x1 - 0.5
        y0, y1 = box.y0 - 0.5, box.y1 - 0.5
        t = np.linspace(0.0, 1.0, samples)
        xs = x0 + (x1 - x0) * t
        ys = y0 + (y1 - y0) * t
        outline = np.concatenate([
            np.stack([np.full_like(xs, y0), xs], 1),
            np.stack([np.full_like(xs, y1), xs], 1),
            np.stack([ys, np.full_like(ys, x0)], 1),
            np.stack([ys, np.full_like(ys, x1)], 1),
        ])
        mapped = self.forward(outline)
        h, w = self.out_shape
        r0 = max(0, int(math.floor(mapped[:, 0].min() + 0.5)))
        r1 = min(h, int(math.ceil(mapped[:, 0].max() + 0.5)))
        c0 = max(0, int(math.floor(mapped[:, 1].min() + 0.5)))
        c1 = min(w, int(math.ceil(mapped[:, 1].max() + 0.5)))
        if r0 >= r1 or c0 >= c1:
            return None
        return BoundingBox(c0, r0, c1, r1)


def _sample(pixels: np.ndarray, coords: np.ndarray, mode: str) -> np.ndarray:
    out = ndimage.map_coordinates(pixels, coords, order=1, mode=mode, cval=0.0)
    return np.clip(out, 0.0, 1.0)


def polar_grid(frame: ImageFrame, out_rows: Optional[int] = None,
               out_cols: Optional[int] = None) -> PolarGrid:
    if frame.scan_params is None:
        raise GeometryError("frame has no scan parameters")
    params = frame.scan_params.validate()
    rows, cols = default_polar_shape(params)
    rows = rows if out_rows is None else out_rows
    cols = cols if out_cols is None else out_cols
    if rows <= 0 or cols <= 0:
        raise ValueError(f"output dimensions must be positive, got {rows}x{cols}")
    return PolarGrid(params, frame.shape, int(rows), int(cols))


def frustum_to_polar(frame: ImageFrame, out_rows: Optional[int] = None,
                     out_cols: Optional[int] = None) -> ImageFrame:
    """Resample a cartesian frustum frame onto its (depth, angle) raster."""
    if frame.representation != CARTESIAN:
        raise GeometryError(f"expected a cartesian frame, got {frame.representation}")
    grid = polar_grid(frame, out_rows, out_cols)
    ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    src = grid.polar_to_cartesian(np.stack([ii.ravel(), jj.ravel()], axis=1))
    values = _sample(frame.pixels, src.T, mode="constant").reshape(grid.rows, grid.cols)
    gt = frame.gt_box
    prior = frame.transform or Transform(out_shape=frame.shape)
    transform = prior.then(grid, (grid.rows, grid.cols))
    if gt is not None:
        gt = Transform((grid,), (grid.rows, grid.cols)).map_box(gt)
    return frame.with_pixels(values, representation=POLAR, gt_box=gt, transform=transform)


def crop_depth(frame: ImageFrame, fraction: float = DEFAULT_CROP) -> ImageFrame:
    """Remove ``floor(fraction * rows)`` rows from both depth ends."""
    if frame.representation != POLAR:
        raise GeometryError("crop_depth expects a polar frame")
    if not 0 <= fraction < 0.5:
        raise ValueError(f"crop fraction must lie in [0, 0.5), got {fraction}")
    rows = frame.shape[0]
    k = int(math.floor(fraction * rows))
    if rows - 2 * k < 1:
        raise ValueError("crop leaves no rows")
    values = frame.pixels[k:rows - k].copy()
    step = RowCrop(k)
    out_shape = values.shape
    gt = frame.gt_box
    if gt is not None:
        gt = Transform((step,), out_shape).map_box(gt, samples=2)
    prior = frame.transform or Transform(out_shape=frame.shape)
    return frame.with_pixels(values, gt_box=gt, transform=prior.then(step, out_shape))


def resize_to_input(frame: ImageFrame, size: int | Sequence[int] = INPUT_SIZE) -> ImageFrame:
    """Bilinear resample to ``size x size`` (or an explicit ``(rows, cols)``)."""
    if frame.pixels.size == 0:
        raise ValueError("cannot resize an empty image")
    out_shape = (size, size) if isinstance(size, (int, np.integer)) else tuple(size)
    if min(out_shape) <= 0:
        raise ValueError(f"invalid output size {out_shape}")
    step = Resample(frame.shape, out_shape)
    if frame.shape == out_shape:
        values = frame.pixels.copy()
    else:
        ii, jj = np.meshgrid(np.arange(out_shape[0]), np.arange(out_shape[1]), indexing="ij")
        src = step.inverse(np.stack([ii.ravel(), jj.ravel()], axis=1))
        values = _sample(frame.pixels, src.T, mode="nearest").reshape(out_shape)
    gt = frame.gt_box
    if gt is not None:
        gt = Transform((step,), out_shape).map_box(gt, samples=2)
    prior = frame.transform or Transform(out_shape=frame.shape)
    return frame.with_pixels(values, gt_box=gt, transform=prior.then(step, out_shape))


def preprocess(frame: ImageFrame, crop: float = DEFAULT_CROP, size: int = INPUT_SIZE,
               out_rows: Optional[int] = None, out_cols: Optional[int] = None) -> ImageFrame:
    """Polar projection (cartesian input only), depth crop, resize.

    The result carries ``transform``, which maps source-frame points to the
    output raster; ``gt_box`` is mapped through the whole chain at once.
    """
    src_box = frame.gt_box
    start = frame.with_pixels(frame.pixels, transform=Transform(out_shape=frame.shape))
    if frame.representation == CARTESIAN:
        start = frustum_to_polar(start, out_rows, out_cols)
    out = resize_to_input(crop_depth(start, crop), size)
    gt = out.transform.map_box(src_box) if src_box is not None else None
    return out.with_pixels(out.pixels, gt_box=gt)
