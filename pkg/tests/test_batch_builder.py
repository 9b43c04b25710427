import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rec
from privfer.batch_builder import (
    TripletBatch,
    batch_stream,
    bce_labels,
    build_batch,
    load_batches,
    n_triplets,
    save_batches,
    triplet_views,
    valid_batch_shape,
)
from privfer.data_model import DatasetManifest
from privfer.errors import CapacityError, DomainError
from privfer.knowledge_priors import TrackIndex


@pytest.mark.parametrize(
    "k, expected",
    [(1, (2, 1, 4)), (2, (4, 5, 16)), (3, (6, 21, 64)), (4, (8, 85, 256)), (5, (10, 341, 1024))],
)
def test_valid_batch_shape_table(k, expected):
    assert valid_batch_shape(k) == expected


def test_batch_shape_arithmetic_exhaustive():
    for k in range(1, 11):
        m, n, size = valid_batch_shape(k)
        assert 3 * n + 1 == 4**k == size == 2**m
        assert size & (size - 1) == 0


@pytest.mark.parametrize("k", [0, -1, 1.5, True])
def test_valid_batch_shape_domain(k):
    with pytest.raises(DomainError):
        valid_batch_shape(k)


def test_bce_labels_examples():
    assert bce_labels(1).tolist() == [0, 1, 0]
    assert bce_labels(2).tolist() == [0, 1, 0, 1, 1, 1]
    with pytest.raises(DomainError):
        bce_labels(0)


def test_triplet_views_examples():
    assert triplet_views(4) == ([1], [2], [3])
    assert triplet_views(7) == ([1, 4], [2, 5], [3, 6])
    with pytest.raises(DomainError):
        triplet_views(6)
    with pytest.raises(DomainError):
        n_triplets(1)


# ---- toy indices


def _track(video, track, n, label, prefix=""):
    return [rec(video, f, track, label, ref=f"{prefix}{video}/{track}/{f}.png") for f in range(n)]


def toy_index(n_videos=6, label="happy", extra_labels=()):
    records = _track("A", 0, 3, label)
    for i in range(1, n_videos):
        records += _track(f"V{i}", 0, 2, label)
    for j, lab in enumerate(extra_labels):
        records += _track(f"X{j}", 0, 3, lab)
    return TrackIndex.from_manifest(DatasetManifest(records))


def check_batch(batch: TripletBatch, index: TrackIndex, label: str):
    """Layout oracle: every TripletBatch invariant, checked independently."""
    faces = batch.face_refs
    n = batch.n
    assert len(faces) == 3 * n + 1
    known = {r.crop_ref for recs in index.tracks.values() for r in recs}
    assert all(f.crop_ref in known for f in faces)
    extra, a0, _, n0 = faces[:4]
    assert extra.track_key == a0.track_key and extra.crop_ref not in (a0.crop_ref, n0.crop_ref)
    videos = []
    for t in range(n):
        a, p, neg = faces[3 * t + 1 : 3 * t + 4]
        assert a.track_key == neg.track_key and a.crop_ref != neg.crop_ref
        assert p.video_id != a.video_id
        videos.append(a.video_id)
        if batch.expression_mode == "matched" or t == 0:
            assert a.expression == label and p.expression == label
    assert len(set(videos)) == n
    if batch.expression_mode == "matched":
        assert {f.expression for f in faces if f.expression is not None} == {label}


def test_build_batch_k1_layout():
    idx = toy_index()
    b = build_batch(idx, "happy", 1, rng_seed=42)
    check_batch(b, idx, "happy")
    assert b.face_refs[0].video_id == "A" or len(idx.tracks) > 1


def test_build_batch_k2_layout_and_determinism():
    idx = toy_index(8)
    a = build_batch(idx, "happy", 2, rng_seed=7)
    b = build_batch(idx, "happy", 2, rng_seed=7)
    check_batch(a, idx, "happy")
    assert a.crop_refs == b.crop_refs


def test_capacity_errors():
    small = TrackIndex.from_manifest(DatasetManifest(_track("A", 0, 2, "happy") + _track("B", 0, 2, "happy")))
    with pytest.raises(CapacityError, match="first-slot"):
        build_batch(small, "happy", 1)
    with pytest.raises(CapacityError, match="videos"):
        build_batch(toy_index(3), "happy", 2)
    with pytest.raises(CapacityError):
        build_batch(toy_index(), "sad", 1)


def test_agnostic_mode_ignores_label_after_first_triplet():
    # only one other happy video, but plenty of sad ones
    records = _track("A", 0, 3, "happy") + _track("B", 0, 2, "happy")
    for i in range(6):
        records += _track(f"S{i}", 0, 2, "sad")
    idx = TrackIndex.from_manifest(DatasetManifest(records))
    with pytest.raises(CapacityError):
        build_batch(idx, "happy", 2, mode="matched")
    b = build_batch(idx, "happy", 2, mode="agnostic", rng_seed=1)
    check_batch(b, idx, "happy")


def test_batch_file_round_trip(tmp_path):
    idx = toy_index(8, extra_labels=["sad"] * 8)
    batches = list(batch_stream(idx, 1, 5, seed=3))
    p = tmp_path / "b.jsonl"
    save_batches(batches, p)
    back = load_batches(p, idx)
    assert [b.crop_refs for b in back] == [b.crop_refs for b in batches]
    assert [b.expression for b in back] == [b.expression for b in batches]


def test_batch_stream_is_seeded():
    idx = toy_index(8, extra_labels=["sad"] * 8)
    a = [b.crop_refs for b in batch_stream(idx, 1, 4, seed=5)]
    b = [b.crop_refs for b in batch_stream(idx, 1, 4, seed=5)]
    c = [b.crop_refs for b in batch_stream(idx, 1, 4, seed=6)]
    assert a == b and a != c


# ---- property: random toy indices always yield valid batches


@st.composite
def indices(draw):
    labels = ["happy", "sad"]
    records = []
    n_videos = draw(st.integers(2, 12))
    for v in range(n_videos):
        n_tracks = draw(st.integers(1, 2))
        for t in range(n_tracks):
            size = draw(st.integers(1, 5))
            lab = draw(st.sampled_from(labels))
            records += _track(f"v{v}", t, size, lab)
    return TrackIndex.from_manifest(DatasetManifest(records))


@settings(max_examples=200, deadline=None)
@given(indices(), st.sampled_from(["happy", "sad"]), st.integers(1, 2),
       st.sampled_from(["matched", "agnostic"]), st.integers(0, 2**31 - 1))
def test_every_emitted_batch_is_valid(idx, label, k, mode, seed):
    try:
        b = build_batch(idx, label, k, mode, seed)
    except CapacityError:
        return
    check_batch(b, idx, label)
