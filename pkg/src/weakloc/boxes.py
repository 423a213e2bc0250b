"""Axis-aligned boxes in pixel coordinates and their overlap score."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``.

    ``x`` runs along columns and ``y`` along rows.
    """

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"empty box: {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def clip(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            max(0, self.x0), max(0, self.y0), min(width, self.x1), min(height, self.y1)
        )

    def flip_horizontal(self, width: int) -> "BoundingBox":
        # column c maps to width - 1 - c, so [x0, x1) maps to [width - x1, width - x0)
        return BoundingBox(width - self.x1, self.y0, width - self.x0, self.y1)

    def scaled(self, s: int) -> "BoundingBox":
        return BoundingBox(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two half-open boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
