"""Training batches laid out as ``[extra, (anchor, positive, negative) * n]``.

Anchor and negative are two crops of one tracked face; the positive is a face
from another video sharing the batch expression label; the extra face is a
third crop of the first anchor's track and is the reference for the BCE
targets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data_model import FaceRecord
from .errors import CapacityError, DomainError
from .knowledge_priors import TrackIndex

MODES = ("matched", "agnostic")


def valid_batch_shape(k: int) -> tuple[int, int, int]:
    """``(m, n, size)`` with ``size = 2**m = 3n + 1`` and ``m = 2k``.

    Only even powers of two are 1 mod 3, hence the parametrisation by ``k``.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise DomainError(f"k must be a positive integer, got {k!r}")
    k = int(k)
    size = 4**k
    return 2 * k, (size - 1) // 3, size


def bce_labels(n: int) -> np.ndarray:
    """Targets for ``cos(features[1:], features[0])``: 0 at the first anchor and negative."""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"n must be a positive integer, got {n!r}")
    labels = np.ones(3 * int(n), dtype=np.int64)
    labels[[0, 2]] = 0
    return labels


def n_triplets(size: int) -> int:
    if isinstance(size, bool) or not isinstance(size, (int, np.integer)) or size < 4 or (size - 1) % 3:
        raise DomainError(f"batch size must be 3n+1 with n >= 1, got {size!r}")
    return (int(size) - 1) // 3


def triplet_views(size: int) -> tuple[list[int], list[int], list[int]]:
    """Index lists of anchors, positives and negatives (stride-3 from 1, 2, 3)."""
    n = n_triplets(size)
    return (
        list(range(1, 3 * n + 1, 3)),
        list(range(2, 3 * n + 1, 3)),
        list(range(3, 3 * n + 1, 3)),
    )


@dataclass
class TripletBatch:
    face_refs: list[FaceRecord]
    n: int
    expression_mode: str
    expression: str | None = None

    def __len__(self) -> int:
        return len(self.face_refs)

    @property
    def crop_refs(self) -> list[str]:
        return [r.crop_ref for r in self.face_refs]

    def triplet(self, t: int) -> tuple[FaceRecord, FaceRecord, FaceRecord]:
        return tuple(self.face_refs[3 * t + 1 : 3 * t + 4])


def _unique_crops(records: list[FaceRecord]) -> list[FaceRecord]:
    seen: set[str] = set()
    out = []
    for r in records:
        if r.crop_ref not in seen:
            seen.add(r.crop_ref)
            out.append(r)
    return out


class _Pools:
    """Lookup tables over a TrackIndex, optionally restricted to one expression."""

    def __init__(self, index: TrackIndex, label: str | None):
        self.by_track: dict[tuple[str, int], list[FaceRecord]] = {}
        for key in sorted(index.tracks):
            recs = index.tracks[key]
            if label is not None:
                recs = [r for r in recs if r.expression == label]
            recs = _unique_crops(recs)
            if len(recs) >= 2:
                self.by_track[key] = recs
        self.first = [k for k, recs in self.by_track.items() if len(recs) >= 3]
        self.videos: dict[str, list[tuple[str, int]]] = {}
        for key in self.by_track:
            self.videos.setdefault(key[0], []).append(key)


def _positive_pool(index: TrackIndex, label: str | None) -> list[FaceRecord]:
    faces = [r for key in sorted(index.tracks) for r in index.tracks[key]]
    if label is not None:
        faces = [r for r in faces if r.expression == label]
    return _unique_crops(faces)


def _pick(rng: np.random.Generator, seq: list):
    return seq[int(rng.integers(len(seq)))]


def _pick_positive(rng, pool: list[FaceRecord], video_id: str, what: str) -> FaceRecord:
    cands = [r for r in pool if r.video_id != video_id]
    if not cands:
        raise CapacityError(f"no positive for {what}: no qualifying face outside video {video_id}")
    return _pick(rng, cands)


def build_batch(
    index: TrackIndex,
    expression: str,
    k: int,
    mode: str = "matched",
    rng_seed: int = 42,
) -> TripletBatch:
    """Sample one batch of ``3n+1`` faces for label ``expression``.

    In ``agnostic`` mode only the first triplet (and the extra face) is
    conditioned on ``expression``; later triplets ignore labels entirely.
    """
    if mode not in MODES:
        raise DomainError(f"unknown expression mode {mode!r}")
    _, n, _ = valid_batch_shape(k)
    rng = np.random.default_rng(rng_seed)
    matched = _Pools(index, expression)
    if not matched.first:
        raise CapacityError(
            f"no first-slot track (>= 3 distinct crops) with expression {expression!r}"
        )
    rest = matched if mode == "matched" else _Pools(index, None)

    first_key = _pick(rng, matched.first)
    first_recs = matched.by_track[first_key]
    picks = rng.choice(len(first_recs), size=3, replace=False)
    extra, anchor, negative = (first_recs[int(i)] for i in picks)

    other_videos = sorted(v for v in rest.videos if v != first_key[0])
    if len(other_videos) < n - 1:
        what = f"expression {expression!r}" if mode == "matched" else "any expression"
        raise CapacityError(
            f"need {n} distinct videos with >= 2-crop tracks ({what}), found {len(other_videos) + 1}"
        )
    chosen = [other_videos[int(i)] for i in rng.choice(len(other_videos), size=n - 1, replace=False)]

    pos_matched = _positive_pool(index, expression)
    pos_any = pos_matched if mode == "matched" else _positive_pool(index, None)

    faces = [extra, anchor, _pick_positive(rng, pos_matched, anchor.video_id, "triplet 0"), negative]
    for t, vid in enumerate(chosen, start=1):
        key = _pick(rng, rest.videos[vid])
        recs = rest.by_track[key]
        a, neg = (recs[int(i)] for i in rng.choice(len(recs), size=2, replace=False))
        faces += [a, _pick_positive(rng, pos_any, vid, f"triplet {t}"), neg]
    return TripletBatch(faces, n, mode, expression)


def sample_expression(index: TrackIndex, rng: np.random.Generator) -> str:
    """Batch label drawn proportionally to label frequency among usable labels."""
    counts: dict[str, int] = {}
    for recs in index.tracks.values():
        for r in recs:
            if r.expression is not None:
                counts[r.expression] = counts.get(r.expression, 0) + 1
    usable = sorted(lab for lab in counts if _Pools(index, lab).first)
    if not usable:
        raise CapacityError("no expression label has a first-slot track")
    w = np.array([counts[lab] for lab in usable], dtype=np.float64)
    return usable[int(rng.choice(len(usable), p=w / w.sum()))]


def batch_stream(
    index: TrackIndex, k: int, n_batches: int, mode: str = "matched", seed: int = 42
) -> Iterator[TripletBatch]:
    """``n_batches`` independent batches; batch ``i`` depends only on (index, seed, i)."""
    for child in np.random.SeedSequence(seed).spawn(n_batches):
        rng = np.random.default_rng(child)
        label = sample_expression(index, rng)
        yield build_batch(index, label, k, mode, int(rng.integers(2**31)))


def save_batches(batches: list[TripletBatch], path: str | Path) -> None:
    """Batch manifest: one JSON line per batch listing its crop refs in layout order."""
    lines = [
        json.dumps({"batch": i, "expression": b.expression, "mode": b.expression_mode,
                    "crop_refs": b.crop_refs})
        for i, b in enumerate(batches)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_batches(path: str | Path, index: TrackIndex) -> list[TripletBatch]:
    by_ref = {r.crop_ref: r for recs in index.tracks.values() for r in recs}
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        refs = [by_ref[c] for c in d["crop_refs"]]
        out.append(TripletBatch(refs, n_triplets(len(refs)), d["mode"], d["expression"]))
    return out
