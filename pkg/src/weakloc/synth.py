"""Synthetic sector-scan frames with ground-truth labels and boxes.

Each subject gets its own scan geometry, gain and speckle grain. Frames are
tissue background under multiplicative speckle plus, for every class except
background, one cartoon primitive whose footprint defines the box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox
from .data import ClassTaxonomy, Manifest, ManifestEntry, write_manifest
from .frames import CARTESIAN, ImageFrame, ScanParameters, save_frame

CANVAS = 256

# labelled frame counts per region of the clinical data set; the generator
# mirrors this class imbalance
REFERENCE_COUNTS = {
    "head": 25249, "thorax": 32254, "abdomen": 16220, "spine": 5980,
    "limbs": 11617, "placenta": 6081, "background": 12687,
}


@dataclass(frozen=True)
class SubjectStyle:
    params: ScanParameters
    gain: float
    grain: float
    tissue: float
    size: float  # primitive radius scale in pixels


def draw_subject(rng: np.random.Generator, canvas: int = CANVAS) -> SubjectStyle:
    sector = rng.uniform(0.9, 1.4)
    depth = rng.uniform(90.0, 160.0)
    apex = rng.uniform(0.0, 25.0)
    zoom = rng.uniform(1.0, 1.3)
    usable = canvas - 6
    spacing = max(depth / usable, 2 * (apex + depth) * math.sin(sector / 2) / usable)
    params = ScanParameters(depth, spacing * zoom, sector, zoom, apex).validate()
    return SubjectStyle(
        params=params,
        gain=rng.uniform(0.85, 1.15),
        grain=rng.uniform(0.7, 1.4),
        tissue=rng.uniform(0.18, 0.26),
        size=rng.uniform(0.15, 0.19) * depth / spacing,
    )


def frustum_mask(params: ScanParameters, shape) -> np.ndarray:
    h, w = shape
    s = params.pixel_spacing
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = (cc - (w - 1) / 2) * s
    dy = rr * s + params.apex_offset
    r = np.hypot(dx, dy)
    th = np.arctan2(dx, dy)
    return (r >= params.apex_offset) & (r <= params.apex_offset + params.depth_of_scan) \
        & (np.abs(th) <= params.sector_width / 2)


def _smooth_noise(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return field / (field.std() + 1e-12)


# -- primitives ------------------------------------------------------------------
# Each returns (intensity, footprint) on local coordinates (u along the long
# axis, v across it), both arrays of the window's shape.

def _ellipse(u, v, a, b):
    return (u / a) ** 2 + (v / b) ** 2


def _head(u, v, R, rng):
    e = _ellipse(u, v, R, 0.85 * R)
    foot = e <= 1
    rim = np.exp(-((np.sqrt(e) - 0.92) * R / 2.2) ** 2)
    inner = 0.08 * foot
    return np.maximum(0.95 * rim, inner), foot


def _thorax(u, v, R, rng):
    rad = np.hypot(u, v)
    foot = rad <= 0.8 * R
    body = 0.4 * foot
    bright = 0.8 * (1 / (1 + np.exp((rad - 0.55 * R) / 1.5)))
    core = 1 / (1 + np.exp((rad - 0.28 * R) / 1.2))
    return np.where(foot, np.maximum(body, bright) * (1 - 0.9 * core), 0.0), foot


def _abdomen(u, v, R, rng):
    e = _ellipse(u, v, 1.1 * R, 0.8 * R)
    foot = e <= 1
    return 0.5 / (1 + np.exp((np.sqrt(e) - 0.93) * 12)), foot


def _spine(u, v, R, rng):
    half = 1.1 * R
    bend = rng.uniform(-0.08, 0.08) / R
    vv = v - bend * u * u
    thick = 0.2 * R
    foot = (np.abs(u) <= half) & (np.abs(vv) <= thick)
    period = max(6.0, 0.3 * R)
    dash = (np.mod(u + half, period) < 0.7 * period)
    return np.where(foot & dash, 1.0, np.where(foot, 0.3, 0.0)), foot


def _limbs(u, v, R, rng):
    half_len, half_w = 0.9 * R, 0.3 * R
    foot = (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
    bones = np.zeros_like(u)
    for off in (-0.12 * R, 0.12 * R):
        bones = np.maximum(bones, np.exp(-((v - off) / 1.3) ** 2))
    return np.where(foot, np.maximum(0.28, 0.95 * bones), 0.0), foot


def _placenta(u, v, R, rng):
    half_len, half_w = 1.2 * R, 0.35 * R
    foot = (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
    grain = 0.55 + 0.25 * np.sign(np.sin(u * 1.7) * np.sin(v * 1.7 + 0.5))
    return np.where(foot, grain, 0.0), foot


PRIMITIVES: dict[str, Callable] = {
    "head": _head, "thorax": _thorax, "abdomen": _abdomen,
    "spine": _spine, "limbs": _limbs, "placenta": _placenta,
}
# (max rotation, whether a quarter turn is allowed)
ROTATION = {
    "head": (math.pi, False), "thorax": (0.0, False), "abdomen": (0.15, True),
    "spine": (0.05, True), "limbs": (0.05, True), "placenta": (0.05, False),
}


def render_primitive(label, style: SubjectStyle, shape, inside: np.ndarray, rng):
    """Place a primitive fully inside the frustum.

    Returns ``(intensity, footprint)`` as full-canvas arrays.
    """
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    p = style.params
    for _ in range(200):
        R = style.size * rng.uniform(0.85, 1.15)
        rad = p.apex_offset + p.depth_of_scan * rng.uniform(0.3, 0.75)
        th = p.sector_width * rng.uniform(-0.3, 0.3)
        s = p.pixel_spacing
        cy = (rad * math.cos(th) - p.apex_offset) / s
        cx = (w - 1) / 2 + rad * math.sin(th) / s
        max_rot, quarter = ROTATION[label]
        ang = rng.uniform(-max_rot, max_rot)
        if quarter and rng.random() < 0.5:
            ang += math.pi / 2
        du, dv = cc - cx, rr - cy
        u = du * math.cos(ang) + dv * math.sin(ang)
        v = -du * math.sin(ang) + dv * math.cos(ang)
        intensity, foot = PRIMITIVES[label](u, v, R, rng)
        if foot.any() and not (foot & ~inside).any():
            return intensity, foot
    raise RuntimeError(f"could not place a {label} primitive inside the frustum")


def tight_box(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(1))
    cols = np.flatnonzero(mask.any(0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def render_frame(label: str, style: SubjectStyle, rng, canvas: int = CANVAS, with_mask=False):
    shape = (canvas, canvas)
    inside = frustum_mask(style.params, shape)
    tissue = style.tissue * (1 + 0.25 * _smooth_noise(rng, shape, 14.0))
    image = tissue
    box, foot = None, None
    if label != "background":
        intensity, foot = render_primitive(label, style, shape, inside, rng)
        image = np.where(foot, intensity + 0.15 * tissue, tissue)
        box = tight_box(foot)
    speckle = np.clip(1 + 0.3 * _smooth_noise(rng, shape, style.grain), 0.0, None)
    pixels = np.clip(image * speckle * style.gain, 0.0, 1.0) * inside
    frame = ImageFrame(pixels, CARTESIAN, label=label, scan_params=style.params, gt_box=box)
    return (frame, foot) if with_mask else frame


def label_schedule(taxonomy: ClassTaxonomy, n: int, rng) -> list[str]:
    """Labels for ``n`` frames following the reference class proportions.

    Largest-remainder allocation with at least one frame per class whenever
    ``n`` allows it, then shuffled.
    """
    names = list(taxonomy.names)
    ref = np.array([REFERENCE_COUNTS.get(c, np.mean(list(REFERENCE_COUNTS.values()))) for c in names])
    share = ref / ref.sum()
    base = np.ones(len(names), dtype=int) if n >= len(names) else np.zeros(len(names), dtype=int)
    rest = n - base.sum()
    quota = share * rest
    alloc = base + np.floor(quota).astype(int)
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    for i in order[: n - alloc.sum()]:
        alloc[i] += 1
    labels = [c for c, k in zip(names, alloc) for _ in range(k)]
    return [labels[i] for i in rng.permutation(len(labels))]


def synth_generate(n_subjects: int, frames_per_subject: int, seed: int,
                   out_dir=None, taxonomy: ClassTaxonomy = ClassTaxonomy(),
                   canvas: int = CANVAS):
    """Render a synthetic data set.

    With ``out_dir`` the frames are written as PNG + sidecar and a
    ``manifest.csv`` is produced; the manifest is returned either way. Without
    ``out_dir`` the frames are returned in memory as ``(manifest, frames)``.
    """
    if n_subjects < 1 or frames_per_subject < 1:
        raise ValueError("subject and frame counts must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_subjects)
    entries, frames = [], []
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "frames").mkdir(parents=True, exist_ok=True)
    for s, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        subject = f"subject{s:03d}"
        style = draw_subject(rng, canvas)
        for f, label in enumerate(label_schedule(taxonomy, frames_per_subject, rng)):
            frame = render_frame(label, style, rng, canvas)
            frame.subject_id = subject
            rel = f"frames/{subject}_{f:04d}.png"
            if root is not None:
                save_frame(root / rel, frame)
            else:
                frames.append(frame)
            entries.append(ManifestEntry(rel, subject, label, frame.gt_box))
    manifest = Manifest(entries, taxonomy, root if root is not None else Path("."))
    if root is not None:
        write_manifest(manifest, root / "manifest.csv")
        return manifest
    return manifest, frames
