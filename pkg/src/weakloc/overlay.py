"""Proposal-map overlays: heatmap, predicted box in colour, truth in white."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

PRED_COLOUR = (255, 64, 32)
GT_COLOUR = (255, 255, 255)


def render_overlay(pixels, proposal, pred_box=None, gt_box=None, alpha: float = 0.45) -> Image.Image:
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0, 1)
    h, w = pixels.shape
    heat = np.asarray(proposal, dtype=np.float64)
    heat = heat / heat.max() if heat.max() > 0 else heat
    heat_img = Image.fromarray(np.uint8(np.round(heat * 255))).resize((w, h), Image.BILINEAR)
    heat_rgb = colormaps["jet"](np.asarray(heat_img) / 255.0)[..., :3]
    base = np.repeat(pixels[..., None], 3, axis=2)
    rgb = np.uint8(np.round(255 * ((1 - alpha) * base + alpha * heat_rgb)))
    img = Image.fromarray(rgb)
    draw = ImageDraw.Draw(img)
    if gt_box is not None:
        draw.rectangle([gt_box.x0, gt_box.y0, gt_box.x1 - 1, gt_box.y1 - 1], outline=GT_COLOUR, width=2)
    if pred_box is not None:
        draw.rectangle([pred_box.x0, pred_box.y0, pred_box.x1 - 1, pred_box.y1 - 1],
                       outline=PRED_COLOUR, width=2)
    return img


def contact_sheet(images, columns: int = 7) -> Image.Image:
    w, h = images[0].size
    rows = (len(images) + columns - 1) // columns
    sheet = Image.new("RGB", (columns * w, rows * h))
    for k, im in enumerate(images):
        sheet.paste(im, ((k % columns) * w, (k // columns) * h))
    return sheet


def write_overlays(out_dir, examples) -> list[Path]:
    """One PNG per example plus ``sheet.png``; examples are
    ``(frame, proposal, predicted_box, predicted_label)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, paths = [], []
    for k, (frame, M, box, pred) in enumerate(examples):
        im = render_overlay(frame.pixels, M, box, frame.gt_box)
        p = out / f"{k:03d}_{frame.label}_as_{pred}.png"
        im.save(p)
        images.append(im)
        paths.append(p)
    if images:
        contact_sheet(images).save(out / "sheet.png")
    return paths
