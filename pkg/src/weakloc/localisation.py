"""Bounding boxes from proposal maps."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage

from .boxes import BoundingBox, iou  # noqa: F401  (re-exported)

THRESHOLD_RULES = ("literal", "range")
_EIGHT = np.ones((3, 3), dtype=bool)


class BoxResult(NamedTuple):
    box: BoundingBox
    degenerate: bool
    grid_box: BoundingBox | None = None


def proposal_threshold(M: np.ndarray, rule: str = "literal") -> float:
    """``1.3 * median`` (literal) or ``median + 0.3 * (max - median)`` (range)."""
    med = float(np.median(M))
    if rule == "literal":
        return 1.3 * med
    if rule == "range":
        return med + 0.3 * (float(M.max()) - med)
    raise ValueError(f"unknown threshold rule {rule!r}")


def scale_box(grid_box: BoundingBox, grid_shape, image_size) -> BoundingBox:
    """Grid cells to image pixels, rounding outward."""
    gh, gw = grid_shape
    ih, iw = image_size
    sy, sx = ih / gh, iw / gw
    box = BoundingBox(
        int(math.floor(grid_box.x0 * sx)), int(math.floor(grid_box.y0 * sy)),
        int(math.ceil(grid_box.x1 * sx)), int(math.ceil(grid_box.y1 * sy)),
    )
    return box.clip(ih, iw)


def extract_bbox(M, image_size, rule: str = "literal") -> BoxResult:
    """Box around the 8-connected above-threshold region holding the peak.

    Cells strictly above the threshold form the mask; the component that
    contains the first (row-major) maximum of ``M`` is boxed on the grid and
    then scaled to ``image_size``. When no cell clears the threshold the
    full image is returned with ``degenerate=True``.
    """
    if isinstance(M, torch.Tensor):
        M = M.detach().cpu().numpy()
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ValueError(f"proposal map must be a non-empty 2D array, got shape {M.shape}")
    ih, iw = image_size
    t = proposal_threshold(M, rule)
    mask = M > t
    peak = np.unravel_index(int(np.argmax(M)), M.shape)
    if not mask[peak]:
        return BoxResult(BoundingBox(0, 0, iw, ih), True, None)
    labels, _ = ndimage.label(mask, structure=_EIGHT)
    rows, cols = np.nonzero(labels == labels[peak])
    grid_box = BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    return BoxResult(scale_box(grid_box, M.shape, (ih, iw)), False, grid_box)


class Localisation(NamedTuple):
    label: int
    box: BoundingBox
    proposal: np.ndarray
    degenerate: bool
    scores: np.ndarray


def localise(network, frame, rule: str = "literal") -> Localisation:
    """Predicted class (argmax logit) and the box from the proposal map."""
    from .model import forward

    out = forward(network, frame)
    M = out.proposal.detach().cpu().numpy()
    res = extract_bbox(M, frame.shape, rule)
    scores = out.scores.detach().cpu().numpy()
    return Localisation(int(np.argmax(scores)), res.box, M, res.degenerate, scores)


def localise_batch(network, frames, rule: str = "literal") -> list[Localisation]:
    from .model import forward

    out = forward(network, list(frames))
    logits = out.scores.detach().cpu().numpy()
    maps = out.proposal.detach().cpu().numpy()
    results = []
    for f, s, M in zip(frames, logits, maps):
        res = extract_bbox(M, f.shape, rule)
        results.append(Localisation(int(np.argmax(s)), res.box, M, res.degenerate, s))
    return results
