import hashlib
from collections import deque
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssar.data import (
    ManifestRow,
    SequenceSample,
    depth_to_mask,
    frame_set,
    load_sequences,
    pad_and_batch,
    prep_masks,
    read_manifest,
    render_sequence,
    split_counts,
    split_dataset,
    synth_generate,
    write_manifest,
)
from ssar.data.images import read_depth, read_mask


def components_oracle(mask):
    """Breadth-first 4-connected components; returns list of pixel sets."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                comp, queue = [], deque([(y, x)])
                seen[y, x] = True
                while queue:
                    cy, cx = queue.popleft()
                    comp.append((cy, cx))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
                comps.append(comp)
    return comps


def mask_oracle(depth, near, far, min_area):
    raw = (depth != 0) & (depth >= near) & (depth <= far)
    out = np.zeros(depth.shape, np.uint8)
    for comp in components_oracle(raw):
        if len(comp) >= min_area:
            for y, x in comp:
                out[y, x] = 1
    return out


def row(sid, label=0, n=3, scenario="stationary"):
    return ManifestRow(sid, "s", scenario, label, "", f"frames/{sid}", "", "", n)


# -- depth_to_mask ----------------------------------------------------------------


def test_mask_window_rule():
    depth = np.array([[300, 700, 0]], dtype=np.uint16)
    np.testing.assert_array_equal(depth_to_mask(depth, 100, 500, 1), [[1, 0, 0]])


def test_mask_uniform_in_window():
    assert depth_to_mask(np.full((8, 8), 200, np.uint16), 100, 700, 64).all()


def test_mask_small_component_removed():
    depth = np.full((30, 40), 2000, np.uint16)
    depth[0, 0:3] = 300  # 3 px
    depth[10:25, 10:30] = 300  # 300 px
    out = depth_to_mask(depth, 100, 700, 50)
    assert out.sum() == 300
    assert out[0, :3].sum() == 0
    np.testing.assert_array_equal(out, mask_oracle(depth, 100, 700, 50))


def test_mask_all_invalid_is_empty():
    assert depth_to_mask(np.zeros((5, 5), np.uint16)).sum() == 0


def test_mask_bad_window():
    with pytest.raises(ValueError):
        depth_to_mask(np.zeros((2, 2), np.uint16), 500, 100)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_mask_matches_oracle_and_is_idempotent(seed, min_area):
    rng = np.random.default_rng(seed)
    depth = rng.choice([0, 150, 400, 650, 900], size=(12, 14)).astype(np.uint16)
    out = depth_to_mask(depth, 100, 700, min_area)
    np.testing.assert_array_equal(out, mask_oracle(depth, 100, 700, min_area))
    np.testing.assert_array_equal(depth_to_mask(depth, 100, 700, min_area), out)
    # re-thresholding a mask-as-depth gives the same mask
    as_depth = (out.astype(np.uint16) * 400)
    np.testing.assert_array_equal(depth_to_mask(as_depth, 100, 700, min_area), out)


# -- splits -------------------------------------------------------------------------


def test_split_ten_sequences():
    rows = [row(f"q{i}") for i in range(10)]
    out = split_dataset(rows, (0.6, 0.2, 0.2), seed=3)
    counts = [sum(r.split == s for r in out) for s in ("train", "val", "test")]
    assert counts == [6, 2, 2]


def test_split_counts_sequence_scale():
    # EgoGesture's 24157 videos at 0.6/0.2/0.2
    assert split_counts(24157, (0.6, 0.2, 0.2)) == (14495, 4831, 4831)


def test_split_counts_frame_scale_close_to_reported():
    got = split_counts(894895, (0.6, 0.2, 0.2))
    reported = (536938, 178979, 178978)
    assert sum(got) == sum(reported)
    assert all(abs(a - b) <= 1 for a, b in zip(got, reported))


def test_split_same_seed_same_assignment():
    rows = [row(f"q{i}") for i in range(25)]
    a = split_dataset(rows, seed=7)
    b = split_dataset(rows, seed=7)
    assert [r.split for r in a] == [r.split for r in b]
    assert [r.split for r in split_dataset(rows, seed=8)] != [r.split for r in a]


def test_split_empty_manifest():
    with pytest.raises(ValueError):
        split_dataset([], seed=0)


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ValueError):
        split_dataset([row("a")], (0.5, 0.2, 0.2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=15), st.integers(0, 1000), st.sampled_from(["frame", "sequence"]))
def test_split_disjoint_and_exhaustive(lengths, seed, gran):
    rows = [row(f"q{i}", label=i % 3, n=n) for i, n in enumerate(lengths)]
    out = split_dataset(rows, seed=seed, granularity=gran)
    if gran == "sequence":
        keys = [r.sequence_id for r in out]
        expected = len(rows)
    else:
        keys = [(r.sequence_id, r.frame_index) for r in out]
        expected = sum(lengths)
    assert len(keys) == len(set(keys)) == expected
    assert all(r.split in ("train", "val", "test") for r in out)
    n_train, n_val, n_test = split_counts(expected, (0.6, 0.2, 0.2))
    assert [sum(r.split == s for r in out) for s in ("train", "val", "test")] == [n_train, n_val, n_test]


def test_frame_split_ignores_video_order():
    rows = [row(f"q{i}", n=20) for i in range(5)]
    out = split_dataset(rows, seed=0, granularity="frame")
    per_video = {sid: {r.split for r in out if r.sequence_id == sid} for sid in (f"q{i}" for i in range(5))}
    assert any(len(s) > 1 for s in per_video.values())


# -- batching ---------------------------------------------------------------------------


def sample(sid, length, label, seed=0):
    frames = np.random.default_rng(seed).integers(1, 256, (length, 2, 3, 3), dtype=np.uint8)
    return SequenceSample(sid, frames, label)


def test_batch_lengths_and_padding():
    batch = next(pad_and_batch([sample("a", 3, 0), sample("b", 5, 1)], 2))
    assert batch.data.shape[:2] == (5, 2)
    np.testing.assert_array_equal(batch.lengths, [3, 5])
    assert not batch.data[3:, 0].any()


def test_batch_last_partial():
    batches = list(pad_and_batch([sample(str(i), 2, 0) for i in range(5)], 2))
    assert [b.data.shape[1] for b in batches] == [2, 2, 1]


def test_batch_bad_size():
    with pytest.raises(ValueError):
        list(pad_and_batch([sample("a", 1, 0)], 0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=9), st.integers(1, 4), st.randoms(use_true_random=False))
def test_batch_round_trip_and_alignment(lengths, bs, rnd):
    seqs = [sample(f"s{i}", n, i % 4, seed=i) for i, n in enumerate(lengths)]
    order = list(range(len(seqs)))
    rnd.shuffle(order)
    seen = []
    for batch in pad_and_batch(seqs, bs, order):
        assert (batch.lengths <= batch.data.shape[0]).all()
        for i, sid in enumerate(batch.sequence_ids):
            src = seqs[int(sid[1:])]
            np.testing.assert_array_equal(batch.item(i), src.frames)
            assert not batch.data[batch.lengths[i] :, i].any()
            assert batch.labels[i] == src.label and batch.lengths[i] == len(src)
            seen.append(sid)
    assert seen == [f"s{i}" for i in order]


# -- synthetic generator -------------------------------------------------------------------


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_generate(out, num_classes=3, seqs_per_class=2, len_range=(4, 6), seed=5)
    return out


def test_synth_bit_identical(synth_dir, tmp_path):
    synth_generate(tmp_path, num_classes=3, seqs_per_class=2, len_range=(4, 6), seed=5)
    assert tree_digest(tmp_path) == tree_digest(synth_dir)


def test_synth_manifest_and_masks(synth_dir):
    rows = read_manifest(synth_dir / "manifest.csv")
    assert len(rows) == 6
    assert {r.label for r in rows} == {0, 1, 2}
    for r in rows:
        assert 4 <= r.num_frames <= 6
        mfiles = sorted((synth_dir / r.mask_dir).glob("*.png"))
        assert len(mfiles) == r.num_frames
        for p in mfiles:
            assert read_mask(p).sum() >= 1


def test_synth_depth_threshold_recovers_mask(synth_dir):
    r = read_manifest(synth_dir / "manifest.csv")[0]
    for dp, mp in zip(sorted((synth_dir / r.depth_dir).glob("*.png")), sorted((synth_dir / r.mask_dir).glob("*.png"))):
        np.testing.assert_array_equal(depth_to_mask(read_depth(dp)), read_mask(mp))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("walking", [False, True])
def test_class0_centroid_moves_right(seed, walking):
    _, masks, _ = render_sequence(0, 20, (64, 112), np.random.default_rng(seed), walking=walking, distractors=True)
    xs = [np.nonzero(m)[1].mean() for m in masks]
    assert np.all(np.diff(xs) > 0)


def test_synth_bad_args(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(tmp_path, num_classes=0)
    with pytest.raises(ValueError):
        synth_generate(tmp_path, len_range=(5, 2))
    with pytest.raises(ValueError):
        synth_generate(tmp_path, preset="huge")


# -- loading ------------------------------------------------------------------------------------


def test_load_order_independent_of_workers(synth_dir):
    rows = read_manifest(synth_dir / "manifest.csv")
    a = load_sequences(rows, synth_dir, (64, 112), with_masks=True, workers=1)
    b = load_sequences(rows, synth_dir, (64, 112), with_masks=True, workers=3)
    assert [s.sequence_id for s in a] == [r.sequence_id for r in rows]
    for x, y in zip(a, b):
        assert x.sequence_id == y.sequence_id
        np.testing.assert_array_equal(x.frames, y.frames)
        np.testing.assert_array_equal(x.masks, y.masks)


def test_frame_set_drops_empty_masks():
    s = SequenceSample("a", np.ones((3, 2, 2, 3), np.uint8), 1, masks=np.array([[[1, 0], [0, 0]], [[0, 0], [0, 0]], [[1, 1], [0, 0]]], np.uint8))
    images, masks, labels = frame_set([s])
    assert len(images) == 2 and labels.tolist() == [1, 1]


def test_prep_masks_matches_shipped(synth_dir, tmp_path):
    rows = read_manifest(synth_dir / "manifest.csv")
    bare = [ManifestRow(**{**r.__dict__, "mask_dir": ""}) for r in rows]
    write_manifest(tmp_path / "m.csv", bare)
    new = prep_masks(bare, synth_dir, tmp_path / "masks", manifest_out=tmp_path / "m.csv")
    assert read_manifest(tmp_path / "m.csv") == new
    for r_old, r_new in zip(rows, new):
        for a, b in zip(sorted((synth_dir / r_old.mask_dir).glob("*.png")), sorted((tmp_path / r_new.mask_dir).glob("*.png"))):
            assert a.read_bytes() == b.read_bytes()
