"""Stage runners shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .config import ExperimentConfig
from .data import ClassTaxonomy, Manifest, ManifestEntry, read_manifest, subject_split, write_manifest
from .errors import DataError
from .evaluation import evaluate, write_report
from .frames import save_frame
from .geometry import preprocess
from .model import build_network
from .synth import synth_generate
from .training import FrameSet, load_checkpoint, num_workers, train

log = logging.getLogger(__name__)


def taxonomy_of(cfg: ExperimentConfig) -> ClassTaxonomy:
    return ClassTaxonomy(tuple(cfg.data.classes))


def run_synth(out_dir, cfg: ExperimentConfig) -> Manifest:
    out = Path(out_dir)
    manifest = synth_generate(cfg.data.subjects, cfg.data.frames, cfg.seed, out, taxonomy_of(cfg))
    cfg.write(out / "config.json")
    return manifest


def run_preprocess(in_dir, out_dir, cfg: ExperimentConfig, workers: Optional[int] = None) -> Manifest:
    """Project, crop and resize every frame of a manifest directory."""
    src = read_manifest(in_dir, taxonomy_of(cfg))
    out = Path(out_dir)
    g = cfg.geometry

    def one(entry: ManifestEntry) -> ManifestEntry:
        frame = src.load_frame(entry)
        result = preprocess(frame, g.crop, g.size, g.out_rows, g.out_cols)
        dest = out / entry.path
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_frame(dest, result)
        return ManifestEntry(entry.path, entry.subject, entry.label, result.gt_box)

    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(workers or num_workers()) as pool:
        entries = list(pool.map(one, src.entries))
    manifest = Manifest(entries, src.taxonomy, out)
    write_manifest(manifest, out / "manifest.csv")
    cfg.write(out / "config.json")
    return manifest


def split_sets(manifest: Manifest, cfg: ExperimentConfig):
    """Subject-level train/test split, then a validation subject set carved
    from the training subjects."""
    split = subject_split(manifest, cfg.data.split_ratio, cfg.seed)
    train_m = manifest.subset(split.train_subjects)
    val_subjects: tuple = ()
    if cfg.train.val_fraction > 0 and len(split.train_subjects) >= 2:
        inner = subject_split(train_m, 1 - cfg.train.val_fraction, cfg.seed + 1)
        val_subjects = inner.test_subjects
        train_m = manifest.subset(inner.train_subjects)
    return split, train_m, manifest.subset(val_subjects), manifest.subset(split.test_subjects)


def run_train(data_dir, out_dir, cfg: ExperimentConfig, progress=None):
    manifest = read_manifest(data_dir, taxonomy_of(cfg))
    split, train_m, val_m, _ = split_sets(manifest, cfg)
    if len(train_m) == 0:
        raise DataError("training split is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    split_doc = {
        "train": sorted({e.subject for e in train_m.entries}),
        "val": sorted({e.subject for e in val_m.entries}),
        "test": list(split.test_subjects),
        "ratio": split.ratio,
    }
    (out / "split.json").write_text(json.dumps(split_doc, indent=2) + "\n")
    train_set = FrameSet.from_manifest(train_m)
    val_set = FrameSet.from_manifest(val_m) if len(val_m) else None
    network = build_network(cfg.model, len(manifest.taxonomy), cfg.sp, seed=cfg.seed)
    meta = {"config": cfg.to_dict(), "split": split_doc}
    result = train(network, train_set, cfg.train, val_set, out, meta, progress)
    return network, result


def run_eval(checkpoint, data_dir, report_dir, split: str = "test",
             cfg: Optional[ExperimentConfig] = None, network=None):
    """Evaluate a checkpoint (or an in-memory network) on one split."""
    from .config import from_dict

    meta = {}
    if network is None:
        network, meta = load_checkpoint(checkpoint)
    if cfg is None:
        cfg = from_dict(meta.get("config")) if meta.get("config") else ExperimentConfig()
    manifest = read_manifest(data_dir, taxonomy_of(cfg))
    split_doc = meta.get("split")
    if split_doc is None:
        _, train_m, val_m, test_m = split_sets(manifest, cfg)
        subsets = {"train": train_m, "val": val_m, "test": test_m}
        subset = subsets[split] if split != "all" else manifest
    else:
        subset = manifest if split == "all" else manifest.subset(split_doc[split])
    if len(subset) == 0:
        raise DataError(f"split {split!r} is empty")
    frames = FrameSet.from_manifest(subset).frames()
    e = cfg.eval
    report, examples = evaluate(network, frames, list(manifest.taxonomy.names), e.batch_size,
                                e.threshold_rule, e.accuracy_mode, e.latency_frames, e.overlays)
    out = write_report(report, report_dir, examples)
    cfg.write(Path(out) / "config.json")
    return report
