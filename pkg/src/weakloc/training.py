"""Optimisation loop: weighted sampling, flips, Nesterov SGD, step schedule."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from torch import nn

from .boxes import BoundingBox
from .config import TrainConfig
from .data import Manifest, class_weights, weighted_draws
from .errors import DataError, NumericError
from .frames import POLAR, ImageFrame
from .spn import multilabel_soft_margin_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "weakloc-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_FIELDS = ("epoch", "lr", "train_loss", "val_acc")


def num_workers(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("WEAKLOC_NUM_WORKERS", default)))
    except ValueError:
        return default


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """``lr0 * lr_factor ** floor(epoch / lr_step_epochs)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)


# -- in-memory frames ------------------------------------------------------------

def _read_u8(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr
    return np.round(arr.astype(np.float64) / 65535.0 * 255).astype(np.uint8)


@dataclass
class FrameSet:
    """Preprocessed frames held as a ``(N, H, W)`` uint8 stack."""

    images: np.ndarray
    labels: np.ndarray
    subjects: list
    boxes: list
    classes: tuple

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest: Manifest, workers: Optional[int] = None) -> "FrameSet":
        if len(manifest) == 0:
            raise DataError("empty frame set")
        paths = [manifest.resolve(e) for e in manifest.entries]
        missing = [p for p in paths if not p.exists()]
        if missing:
            raise DataError(f"missing frames, e.g. {missing[0]}")
        with ThreadPoolExecutor(workers or num_workers()) as pool:
            images = list(pool.map(_read_u8, paths))
        return cls(np.stack(images), manifest.labels(), [e.subject for e in manifest.entries],
                   [e.gt_box for e in manifest.entries], tuple(manifest.taxonomy.names))

    @classmethod
    def from_frames(cls, frames, classes) -> "FrameSet":
        idx = {c: i for i, c in enumerate(classes)}
        images = np.stack([np.round(f.pixels * 255).astype(np.uint8) for f in frames])
        return cls(images, np.array([idx[f.label] for f in frames]), [f.subject_id for f in frames],
                   [f.gt_box for f in frames], tuple(classes))

    def batch(self, idx, flips=None, dtype=torch.float32) -> torch.Tensor:
        x = torch.from_numpy(self.images[idx].astype(np.float32) / 255.0).to(dtype).unsqueeze(1)
        if flips is not None and flips.any():
            f = torch.from_numpy(np.asarray(flips))
            x[f] = x[f].flip(-1)
        return x

    def frame(self, i: int) -> ImageFrame:
        return ImageFrame(self.images[i].astype(np.float64) / 255.0, POLAR, self.subjects[i],
                          self.classes[self.labels[i]], None, self.boxes[i])

    def frames(self):
        return [self.frame(i) for i in range(len(self))]

    def weights(self) -> np.ndarray:
        counts = np.bincount(self.labels, minlength=len(self.classes))
        empty = [self.classes[c] for c in np.flatnonzero(counts == 0)]
        if empty:
            raise DataError(f"classes without samples: {empty}")
        return 1.0 / counts[self.labels]


# -- optimisation ------------------------------------------------------------------

def parameter_groups(network: nn.Module, weight_decay: float):
    """Conv and linear weights get decay; batch-norm parameters and biases do not.

    The L2 penalty ``wd * ||w||^2`` has gradient ``2 * wd * w``, which is
    what torch's ``weight_decay`` adds, hence the factor 2.
    """
    decay, rest = [], []
    for module in network.modules():
        for name, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            if name == "weight" and isinstance(module, (nn.Conv2d, nn.Linear)):
                decay.append(p)
            else:
                rest.append(p)
    return [{"params": decay, "weight_decay": 2.0 * weight_decay},
            {"params": rest, "weight_decay": 0.0}]


def make_optimizer(network: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(parameter_groups(network, cfg.weight_decay), lr=cfg.lr0,
                           momentum=cfg.momentum, nesterov=cfg.nesterov and cfg.momentum > 0)


def one_hot(labels, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(torch.as_tensor(labels), num_classes).to(dtype)


def train_step(network, optimizer, x, y, lr: float) -> float:
    network.train()
    try:
        logits, _ = network(x)
        loss = multilabel_soft_margin_loss(logits, y)
    except NumericError as exc:
        raise NumericError(f"{exc} (lr={lr:g}, batch mean={float(x.mean()):.4g}, "
                           f"batch std={float(x.std()):.4g})") from exc
    if not torch.isfinite(loss):
        raise NumericError(f"loss is {float(loss)} (lr={lr:g}, batch mean={float(x.mean()):.4g})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def predict(network, data: FrameSet, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Logits and proposal maps for every frame, in eval mode."""
    network.eval()
    dtype = next(network.parameters()).dtype
    logits, maps = [], []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        out, M = network(data.batch(idx, dtype=dtype))
        logits.append(out.numpy())
        maps.append(M.numpy())
    return np.concatenate(logits), np.concatenate(maps)


def accuracy(network, data: FrameSet, batch_size: int = 64) -> float:
    logits, _ = predict(network, data, batch_size)
    return float(np.mean(logits.argmax(1) == data.labels))


def epoch_draws(data: FrameSet, cfg: TrainConfig, epoch: int):
    """Sample indices and flip flags for one epoch, fixed by (seed, epoch)."""
    n = cfg.samples_per_epoch or len(data)
    idx = weighted_draws(data.weights(), n, seed=np.random.SeedSequence([cfg.seed, epoch, 0]))
    flips = np.random.default_rng([cfg.seed, epoch, 1]).random(n) < cfg.flip_p
    return idx, flips


def should_stop(val_history, patience: int, min_improvement: float) -> bool:
    """True when the last ``patience`` epochs improved held-out accuracy by
    less than ``min_improvement`` over the best earlier epoch."""
    if len(val_history) <= patience:
        return False
    before = max(val_history[:-patience])
    return max(val_history[-patience:]) - before < min_improvement


@dataclass
class TrainResult:
    history: list
    epochs: int
    checkpoint: Optional[Path]
    stopped_early: bool


def train(network, train_set: FrameSet, cfg: TrainConfig, val_set: Optional[FrameSet] = None,
          out_dir=None, checkpoint_meta: Optional[dict] = None, progress=None) -> TrainResult:
    """Run the optimisation protocol and log one metrics row per epoch.

    With ``out_dir`` the metrics CSV and a checkpoint are (re)written after
    every epoch.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise DataError("empty training split")
    torch.manual_seed(cfg.seed)
    dtype = next(network.parameters()).dtype
    optimizer = make_optimizer(network, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, val_accs = [], []
    ckpt = None
    stopped = False
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx, flips = epoch_draws(train_set, cfg, epoch)
        losses = []
        for s in range(0, len(idx), cfg.batch_size):
            sel = slice(s, s + cfg.batch_size)
            x = train_set.batch(idx[sel], flips[sel], dtype)
            y = one_hot(train_set.labels[idx[sel]], len(train_set.classes), dtype)
            losses.append(train_step(network, optimizer, x, y, lr))
        val_acc = accuracy(network, val_set) if val_set is not None and len(val_set) else float("nan")
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_acc": val_acc}
        history.append(row)
        log.info("epoch %d lr %.2g loss %.4f val_acc %.4f", epoch, lr, row["train_loss"], val_acc)
        if progress is not None:
            progress(row)
        if out is not None:
            write_metrics(out / "metrics.csv", history)
            meta = dict(checkpoint_meta or {})
            meta.update(epoch=epoch, seed=cfg.seed)
            ckpt = save_checkpoint(out / "checkpoint.pt", network, meta)
        if not math.isnan(val_acc):
            val_accs.append(val_acc)
            if should_stop(val_accs, cfg.patience, cfg.min_improvement):
                stopped = True
                break
    return TrainResult(history, len(history), ckpt, stopped)


def write_metrics(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])),
                        repr(float(row["val_acc"]))])


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, network, meta: Optional[dict] = None) -> Path:
    """Single-file archive: format tag, version, config echo, weights and
    batch-norm statistics, epoch and seed."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": dataclasses.asdict(network.cfg),
        "sp": dataclasses.asdict(network.sp.cfg),
        "num_classes": network.num_classes,
        "state_dict": {k: v.detach().clone() for k, v in network.state_dict().items()},
        "meta": dict(meta or {}),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; returns ``(network, meta)``."""
    from .model import BackboneConfig, build_network
    from .spn import SPConfig

    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a weakloc checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    mcfg = payload["model"]
    for k in ("stage_channels", "blocks"):
        mcfg[k] = tuple(mcfg[k])
    net = build_network(BackboneConfig(**mcfg), payload["num_classes"], SPConfig(**payload["sp"]))
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype if state else torch.float32
    if dtype.is_floating_point and dtype != torch.float32:
        net = net.to(dtype)
    net.load_state_dict(state)
    net.eval()
    return net, payload["meta"]
