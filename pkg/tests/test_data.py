import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from weakloc.boxes import BoundingBox
from weakloc.data import (
    DEFAULT_CLASSES, ClassTaxonomy, Manifest, ManifestEntry, SplitSpec, augment, class_weights, flip,
    read_manifest, subject_split, weighted_draws, write_manifest,
)
from weakloc.errors import DataError, SplitError
from weakloc.frames import POLAR, ImageFrame, load_frame
from weakloc.synth import draw_subject, frustum_mask, label_schedule, render_frame, synth_generate


def manifest_from_sizes(sizes, labels=("head",)):
    entries = []
    for s, n in enumerate(sizes):
        for k in range(n):
            entries.append(ManifestEntry(f"f{s}_{k}.png", f"s{s:02d}", labels[k % len(labels)]))
    return Manifest(entries)


# -- taxonomy and manifest -----------------------------------------------------------

def test_taxonomy_default():
    tax = ClassTaxonomy()
    assert len(tax) == 7 and tax.names[-1] == "background"


@pytest.mark.parametrize("names", [("a", "a", "background"), ("a", "b"),
                                   ("background", "a", "background")])
def test_taxonomy_invalid(names):
    with pytest.raises(DataError):
        ClassTaxonomy(names)


def test_manifest_rejects_unknown_label():
    with pytest.raises(DataError):
        Manifest([ManifestEntry("x.png", "s", "kidney")])


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("a.png", "s1", "head", BoundingBox(1, 2, 30, 40)),
               ManifestEntry("b.png", "s2", "background"),
               ManifestEntry("c.png", "s2", "spine;limbs")]
    write_manifest(Manifest(entries), tmp_path / "manifest.csv")
    back = read_manifest(tmp_path, check_files=False)
    assert back.entries == entries


def test_manifest_missing_file(tmp_path):
    write_manifest(Manifest([ManifestEntry("nope.png", "s", "head")]), tmp_path / "manifest.csv")
    with pytest.raises(DataError):
        read_manifest(tmp_path)


# -- subject split ---------------------------------------------------------------------

def test_split_ten_equal_subjects():
    split = subject_split(manifest_from_sizes([20] * 10), 0.8, seed=3)
    assert len(split.train_subjects) == 8 and len(split.test_subjects) == 2


def test_split_two_subjects():
    split = subject_split(manifest_from_sizes([5, 7]), 0.8, seed=0)
    assert len(split.train_subjects) == 1 and len(split.test_subjects) == 1


def test_split_single_subject():
    with pytest.raises(SplitError):
        subject_split(manifest_from_sizes([10]), 0.8)


def test_split_matches_enumeration():
    sizes = [100, 100, 100, 700]
    # brute force over all 2^4 partitions with both sides non-empty
    best = min(
        (abs(sum(sizes[i] for i in combo) / sum(sizes) - 0.8), combo)
        for k in range(1, 4) for combo in itertools.combinations(range(4), k)
    )
    assert best[0] == pytest.approx(0.0)
    for seed in range(5):
        split = subject_split(manifest_from_sizes(sizes), 0.8, seed)
        assert "s03" in split.train_subjects and len(split.train_subjects) == 2
        frac = sum(sizes[int(s[1:])] for s in split.train_subjects) / sum(sizes)
        assert frac == pytest.approx(0.8)


def test_split_disjoint_for_many_seeds(rng):
    manifest = manifest_from_sizes(list(rng.integers(5, 40, 9)))
    for seed in range(100):
        split = subject_split(manifest, 0.8, seed)
        assert not set(split.train_subjects) & set(split.test_subjects)
        assert set(split.train_subjects) | set(split.test_subjects) == set(manifest.subjects)


def test_split_spec_rejects_overlap():
    with pytest.raises(SplitError):
        SplitSpec(("a", "b"), ("b",))


# -- class weights ------------------------------------------------------------------------

def test_inverse_frequency_weights():
    tax = ClassTaxonomy(("A", "B", "background"))
    entries = [ManifestEntry(f"{i}", "s", "A") for i in range(100)]
    entries += [ManifestEntry(f"b{i}", "s", "B") for i in range(300)]
    entries += [ManifestEntry("bg", "s", "background")]
    w = class_weights(Manifest(entries, tax))
    assert w[0] == pytest.approx(0.01) and w[150] == pytest.approx(1 / 300)
    labels = Manifest(entries, tax).labels()
    mass = np.array([w[labels == c].sum() for c in range(3)])
    np.testing.assert_allclose(mass / mass.sum(), 1 / 3)


def test_equal_counts_give_uniform_weights():
    tax = ClassTaxonomy(("A", "background"))
    entries = [ManifestEntry(f"{i}", "s", ("A", "background")[i % 2]) for i in range(10)]
    w = class_weights(Manifest(entries, tax))
    assert np.all(w == w[0])


def test_reference_counts_weight_ratio():
    counts = {"head": 25249, "spine": 5980}
    tax = ClassTaxonomy(("head", "spine", "background"))
    entries = [ManifestEntry("x", "s", c) for c, n in counts.items() for _ in range(n)]
    entries.append(ManifestEntry("bg", "s", "background"))
    w = class_weights(Manifest(entries, tax))
    assert w[-2] / w[0] == pytest.approx(25249 / 5980)
    assert round(w[-2] / w[0], 2) == 4.22


def test_empty_class_is_an_error():
    tax = ClassTaxonomy(("A", "B", "background"))
    with pytest.raises(DataError):
        class_weights(Manifest([ManifestEntry("x", "s", "A"), ManifestEntry("y", "s", "background")], tax))


def test_weighted_sampler_law():
    labels = np.repeat(np.arange(4), [10, 50, 300, 640])
    w = 1.0 / np.bincount(labels)[labels]
    n = 100_000
    draws = weighted_draws(w, n, seed=5)
    freq = np.bincount(labels[draws], minlength=4)
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(freq - n / 4) <= 3 * sigma)


def test_weighted_sampler_deterministic():
    w = np.random.default_rng(0).random(50)
    np.testing.assert_array_equal(weighted_draws(w, 100, 9), weighted_draws(w, 100, 9))


# -- augmentation ------------------------------------------------------------------------

def test_flip_is_involution(rng):
    f = ImageFrame(rng.random((224, 224)), POLAR, gt_box=BoundingBox(10, 5, 50, 60))
    back = flip(flip(f))
    np.testing.assert_array_equal(back.pixels, f.pixels)
    assert back.gt_box == f.gt_box


def test_flip_symmetric_image(rng):
    half = rng.random((224, 112))
    px = np.concatenate([half, half[:, ::-1]], axis=1)
    np.testing.assert_array_equal(flip(ImageFrame(px, POLAR)).pixels, px)


def test_flip_box_reflection():
    f = ImageFrame(np.zeros((224, 224)), POLAR, gt_box=BoundingBox(10, 0, 50, 20))
    b = flip(f).gt_box
    assert (b.x0, b.x1) == (174, 214)
    # reflection oracle on the pixel columns covered by the box
    cols = [224 - 1 - x for x in range(10, 50)]
    assert (min(cols), max(cols) + 1) == (b.x0, b.x1)


def test_augment_preserves_pixel_multiset(rng):
    f = ImageFrame(rng.random((224, 224)), POLAR)
    flipped = 0
    for seed in range(40):
        out = augment(f, seed)
        np.testing.assert_array_equal(np.sort(out.pixels, None), np.sort(f.pixels, None))
        flipped += not np.array_equal(out.pixels, f.pixels)
    assert 8 <= flipped <= 32


# -- synthetic generator ---------------------------------------------------------------------

def test_label_schedule_covers_every_class():
    tax = ClassTaxonomy()
    rng = np.random.default_rng(7)
    for _ in range(12):
        labels = label_schedule(tax, 250, rng)
        assert len(labels) == 250 and set(labels) == set(tax.names)
    # class imbalance follows the reference counts
    counts = {c: labels.count(c) for c in tax.names}
    assert counts["thorax"] > counts["head"] > counts["abdomen"] > counts["spine"]


def test_generator_counts():
    manifest, frames = synth_generate(3, 20, seed=7)
    assert len(manifest) == 60 == len(frames)
    for subject in manifest.subjects:
        labels = {e.label for e in manifest.entries if e.subject == subject}
        assert labels == set(ClassTaxonomy().names)


def test_generator_deterministic(tmp_path):
    synth_generate(2, 10, seed=3, out_dir=tmp_path / "a")
    synth_generate(2, 10, seed=3, out_dir=tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_generator_files_load(tmp_path):
    manifest = synth_generate(2, 8, seed=1, out_dir=tmp_path)
    back = read_manifest(tmp_path)
    assert back.entries == manifest.entries
    frame = back.load_frame(back.entries[0])
    assert frame.scan_params is not None and frame.pixels.shape == (256, 256)


def test_generator_boxes_cover_primitives():
    rng = np.random.default_rng(11)
    for _ in range(6):
        style = draw_subject(rng)
        inside = frustum_mask(style.params, (256, 256))
        for label in ("head", "thorax", "abdomen", "spine", "limbs", "placenta"):
            frame, foot = render_frame(label, style, rng, with_mask=True)
            b = frame.gt_box
            rows, cols = np.nonzero(foot)
            cy, cx = rows.mean(), cols.mean()
            assert b.x0 <= cx < b.x1 and b.y0 <= cy < b.y1
            assert foot[b.y0:b.y1, b.x0:b.x1].sum() / b.area >= 0.6, label
            assert not (foot & ~inside).any()


def test_background_frames_have_no_box():
    rng = np.random.default_rng(0)
    assert render_frame("background", draw_subject(rng), rng).gt_box is None


def histogram_descriptor(frame):
    inside = frustum_mask(frame.scan_params, frame.shape)
    x = ndimage.gaussian_filter(frame.pixels, 1.0)
    v = x[inside]
    med = np.median(v)
    h1 = np.histogram(np.clip(v / med, 0, 6), bins=24, range=(0, 6))[0] / v.size
    core = ndimage.binary_erosion(inside, np.ones((5, 5)))
    g = np.hypot(ndimage.sobel(x, 1), ndimage.sobel(x, 0))[core] / med
    h2 = np.histogram(np.clip(g, 0, 12), bins=24, range=(0, 12))[0] / g.size
    return np.log(np.r_[h1, h2] + 1e-4)


def test_generated_task_is_learnable():
    # shared-covariance discriminant on intensity/gradient histograms,
    # trained on 6 subjects and scored on 2 unseen ones
    _, frames = synth_generate(8, 150, seed=3)
    X = np.array([histogram_descriptor(f) for f in frames])
    y = np.array([DEFAULT_CLASSES.index(f.label) for f in frames])
    subjects = np.array([f.subject_id for f in frames])
    tr = np.isin(subjects, sorted(set(subjects))[:6])
    Z = (X - X[tr].mean(0)) / (X[tr].std(0) + 1e-12)
    mu = np.array([Z[tr & (y == c)].mean(0) for c in range(len(DEFAULT_CLASSES))])
    R = Z[tr] - mu[y[tr]]
    Wi = np.linalg.pinv(R.T @ R / len(R))
    d = Z[~tr][:, None] - mu[None]
    pred = np.einsum("nci,ij,ncj->nc", d, Wi, d).argmin(1)
    assert np.mean(pred == y[~tr]) > 0.95
