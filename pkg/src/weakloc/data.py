"""Dataset schema: taxonomy, manifest CSV, subject-level split, sampling."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import BoundingBox
from .errors import DataError, SplitError
from .frames import ImageFrame

DEFAULT_CLASSES = ("head", "thorax", "abdomen", "spine", "limbs", "placenta", "background")
MANIFEST_FIELDS = ("path", "subject", "label", "x0", "y0", "x1", "y1")


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple = DEFAULT_CLASSES
    background: str = "background"

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate class names in {self.names}")
        if list(self.names).count(self.background) != 1:
            raise DataError("taxonomy must contain the background class exactly once")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown label {name!r}") from None


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: str
    label: str
    gt_box: Optional[BoundingBox] = None


@dataclass
class Manifest:
    entries: list
    taxonomy: ClassTaxonomy = field(default_factory=ClassTaxonomy)
    root: Path = Path(".")

    def __post_init__(self):
        for e in self.entries:
            # multi-label rows use ';' separated labels
            for lab in e.label.split(";"):
                self.taxonomy.index(lab)

    def __len__(self):
        return len(self.entries)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})

    def labels(self) -> np.ndarray:
        return np.array([self.taxonomy.index(e.label.split(";")[0]) for e in self.entries])

    def subset(self, subjects) -> "Manifest":
        keep = set(subjects)
        return Manifest([e for e in self.entries if e.subject in keep], self.taxonomy, self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_frame(self, entry: ManifestEntry) -> ImageFrame:
        from .frames import load_frame

        path = self.resolve(entry)
        if not path.exists():
            raise DataError(f"missing frame {path}")
        frame = load_frame(path, entry.gt_box)
        frame.label = entry.label
        frame.subject_id = entry.subject
        return frame


def _box_fields(box: Optional[BoundingBox]):
    return ["", "", "", ""] if box is None else list(box.as_tuple())


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            w.writerow([e.path, e.subject, e.label] + _box_fields(e.gt_box))


def read_manifest(path, taxonomy: ClassTaxonomy = ClassTaxonomy(), check_files: bool = True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for n, row in enumerate(reader, start=2):
            coords = [row[k].strip() for k in ("x0", "y0", "x1", "y1")]
            box = None
            if any(coords):
                try:
                    box = BoundingBox(*(int(c) for c in coords))
                except ValueError as exc:
                    raise DataError(f"{path}:{n}: bad box {coords}: {exc}") from exc
            entries.append(ManifestEntry(row["path"], row["subject"], row["label"], box))
    manifest = Manifest(entries, taxonomy, path.parent)
    if check_files:
        for e in entries:
            if not manifest.resolve(e).exists():
                raise DataError(f"{path}: frame not found: {e.path}")
    return manifest


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_subjects: tuple
    test_subjects: tuple
    ratio: float = 0.8

    def __post_init__(self):
        if set(self.train_subjects) & set(self.test_subjects):
            raise SplitError("train and test subjects overlap")


def _best_partition(sizes: Sequence[int], ratio: float) -> tuple[int, ...]:
    """Indices of the train group whose frame fraction is closest to ratio.

    Exhaustive for small subject counts, greedy beyond that. Both groups
    must be non-empty; ties go to the earliest subset in enumeration order.
    """
    n = len(sizes)
    total = float(sum(sizes))
    if n <= 16:
        best, best_err = None, np.inf
        for k in range(1, n):
            for combo in itertools.combinations(range(n), k):
                err = abs(sum(sizes[i] for i in combo) / total - ratio)
                if err < best_err - 1e-12:
                    best, best_err = combo, err
        return best
    chosen, acc = [], 0
    for i in range(n):
        if len(chosen) == n - 1:
            break
        if abs((acc + sizes[i]) / total - ratio) <= abs(acc / total - ratio) or not chosen:
            chosen.append(i)
            acc += sizes[i]
    return tuple(chosen)


def subject_split(manifest: Manifest, ratio: float = 0.8, seed: int = 0) -> SplitSpec:
    """Partition subjects so that the train frame fraction is near ``ratio``.

    Subjects are shuffled by ``seed`` first, which decides among equally good
    partitions.
    """
    if not 0 < ratio < 1:
        raise SplitError(f"ratio must lie in (0, 1), got {ratio}")
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise SplitError(f"need at least 2 subjects to split, got {len(subjects)}")
    order = list(np.random.default_rng(seed).permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    counts = {s: 0 for s in subjects}
    for e in manifest.entries:
        counts[e.subject] += 1
    train_idx = set(_best_partition([counts[s] for s in shuffled], ratio))
    train = tuple(sorted(s for i, s in enumerate(shuffled) if i in train_idx))
    test = tuple(sorted(s for i, s in enumerate(shuffled) if i not in train_idx))
    return SplitSpec(train, test, ratio)


# -- class balancing -----------------------------------------------------------

def class_weights(manifest: Manifest) -> np.ndarray:
    """Per-sample draw weights ``1 / count(class)``."""
    labels = manifest.labels()
    counts = np.bincount(labels, minlength=len(manifest.taxonomy))
    empty = [manifest.taxonomy.names[c] for c in np.flatnonzero(counts == 0)]
    if empty:
        raise DataError(f"classes without samples: {empty}")
    return 1.0 / counts[labels]


def weighted_draws(weights: np.ndarray, n: int, seed: int) -> np.ndarray:
    """``n`` indices drawn with replacement, probability proportional to weight."""
    p = np.asarray(weights, dtype=np.float64)
    return np.random.default_rng(seed).choice(len(p), size=n, replace=True, p=p / p.sum())


# -- augmentation --------------------------------------------------------------

def flip(frame: ImageFrame) -> ImageFrame:
    """Mirror the angular (column) axis."""
    box = frame.gt_box.flip_horizontal(frame.shape[1]) if frame.gt_box is not None else None
    return frame.with_pixels(frame.pixels[:, ::-1].copy(), gt_box=box)


def augment(frame: ImageFrame, seed: int, p: float = 0.5) -> ImageFrame:
    """Random horizontal flip with probability ``p``."""
    if np.random.default_rng(seed).random() < p:
        return flip(frame)
    return frame
