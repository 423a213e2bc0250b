"""Fast in-package oracle checks run by ``weakloc selftest``.

Each check compares a library routine against an independent computation
and raises ``AssertionError`` on disagreement. The pytest suite goes
further; these exist so an installed copy can vouch for itself.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from .boxes import BoundingBox, iou
from .frames import ScanParameters
from .geometry import PolarGrid, default_polar_shape
from .localisation import extract_bbox, scale_box
from .spn import build_transition, multilabel_soft_margin_loss, propagate

CHECKS: dict[str, Callable[[np.random.Generator], None]] = {}


def check(fn):
    CHECKS[fn.__name__] = fn
    return fn


@check
def proposal_simplex(rng):
    for _ in range(100):
        K, H, W = rng.integers(1, 9), rng.integers(1, 15), rng.integers(1, 15)
        U = torch.as_tensor(rng.random((K, H, W)))
        P = build_transition(U, radius=3)
        res = propagate(P, max_iter=2000)
        M = res.proposal
        assert float(M.min()) >= 0 and abs(float(M.sum()) - 1) <= 1e-6
        if res.converged:
            assert float((P.T @ M - M).abs().sum()) <= 1e-5


@check
def solver_two_state(rng):
    P = torch.tensor([[[0.9, 0.1], [0.5, 0.5]]], dtype=torch.float64)
    M = propagate(P[0], tol=1e-14, max_iter=10_000).proposal
    assert np.allclose(M.numpy(), [5 / 6, 1 / 6], atol=1e-8)


@check
def loss_scalar(rng):
    for _ in range(200):
        C = int(rng.integers(1, 8))
        x = rng.uniform(-10, 10, C)
        y = rng.integers(0, 2, C)
        ref = -sum(yi * math.log(1 / (1 + math.exp(-xi))) + (1 - yi) * math.log(1 / (1 + math.exp(xi)))
                   for xi, yi in zip(x, y))
        got = float(multilabel_soft_margin_loss(torch.as_tensor(x)[None], torch.as_tensor(y)[None]))
        assert abs(got - ref) <= 1e-9
    big = multilabel_soft_margin_loss(torch.tensor([[1e4, -1e4]], dtype=torch.float64),
                                      torch.tensor([[0, 1]]))
    assert torch.isfinite(big)


@check
def geometry_round_trip(rng):
    for _ in range(20):
        p = ScanParameters(rng.uniform(40, 200), rng.uniform(0.2, 1.0), rng.uniform(0.3, 2.5),
                           rng.uniform(1, 2), rng.uniform(0, 30))
        rows, cols = default_polar_shape(p)
        s = p.pixel_spacing
        R = p.apex_offset + p.depth_of_scan
        h = int(math.ceil((R - p.apex_offset * math.cos(p.sector_width / 2)) / s)) + 2
        w = int(math.ceil(2 * R * math.sin(p.sector_width / 2) / s)) + 2
        grid = PolarGrid(p, (h, w), rows, cols)
        depth = rng.uniform(0, p.depth_of_scan, 50)
        angle = rng.uniform(-p.sector_width / 2, p.sector_width / 2, 50)
        r = p.apex_offset + depth
        pts = np.stack([(r * np.cos(angle) - p.apex_offset) / s, (w - 1) / 2 + r * np.sin(angle) / s], 1)
        back = grid.cartesian_to_polar(pts)
        assert np.abs(back[:, 0] - depth * (rows - 1) / p.depth_of_scan).max() < 0.5
        assert np.abs(back[:, 1] - (angle + p.sector_width / 2) * (cols - 1) / p.sector_width).max() < 0.5


@check
def bbox_scan(rng):
    for _ in range(200):
        H, W = rng.integers(1, 15, 2)
        M = rng.random((H, W)) ** 4
        M /= M.sum()
        t = 1.3 * np.median(M)
        res = extract_bbox(M, (224, 224))
        peak = np.unravel_index(np.argmax(M), M.shape)
        if not M[peak] > t:
            assert res.degenerate
            continue
        lab, _ = ndimage.label(M > t, np.ones((3, 3)))
        ys, xs = np.nonzero(lab == lab[peak])
        grid_box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        assert res.box == scale_box(grid_box, M.shape, (224, 224))


@check
def iou_pixels(rng):
    assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 15, 10)) == 1 / 3
    for _ in range(200):
        a = np.zeros((40, 40), bool)
        b = np.zeros((40, 40), bool)
        boxes = []
        for m in (a, b):
            x0, y0 = rng.integers(0, 25, 2)
            x1, y1 = x0 + rng.integers(1, 15), y0 + rng.integers(1, 15)
            m[y0:y1, x0:x1] = True
            boxes.append(BoundingBox(int(x0), int(y0), int(x1), int(y1)))
        assert iou(*boxes) == (a & b).sum() / (a | b).sum()


def run(seed: int = 0, report=print) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            fn(np.random.default_rng(seed))
            status = "PASS"
        except AssertionError as exc:
            failures += 1
            status = f"FAIL {exc}".rstrip()
        report(f"{status[:4]} {name} ({time.perf_counter() - t0:.2f}s){status[4:]}")
    return failures
