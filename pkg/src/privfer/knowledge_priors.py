"""Per-video pseudo-labels from embedding-similarity tracking.

Tracks never compare across videos: each video gets its own track-id space
starting at 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Iterable

import numpy as np

from .data_model import DatasetManifest, FaceRecord
from .errors import DomainError, ManifestParseError, ValidationError

DEFAULT_SIM_THRESHOLD = 0.7
# running-mean representatives drift by a few ulps; identical faces must still join at threshold 1
SIM_TOL = 1e-12


@dataclass
class Detection:
    """One detected, aligned face before tracking."""

    video_id: str
    frame_index: int
    bbox: tuple[float, float, float, float]
    embedding: np.ndarray
    crop_ref: str
    expression: str | None = None


@dataclass
class _Track:
    track_id: int
    total: np.ndarray
    members: list[int] = field(default_factory=list)

    @property
    def representative(self) -> np.ndarray:
        return self.total / np.linalg.norm(self.total)


def _check(det: Detection) -> np.ndarray:
    if det.frame_index < 0:
        raise ValidationError(f"{det.video_id}: negative frame index {det.frame_index}")
    e = np.asarray(det.embedding, dtype=np.float64)
    if e.ndim != 1 or not np.all(np.isfinite(e)) or abs(np.linalg.norm(e) - 1.0) > 1e-6:
        raise ValidationError(
            f"{det.video_id}/{det.frame_index}: embedding is not a finite unit vector"
        )
    return e


def _track_video(dets: list[Detection], threshold: float) -> tuple[list[int], list[_Track]]:
    embs = [_check(d) for d in dets]
    assigned = [-1] * len(dets)
    tracks: list[_Track] = []
    prev_frame = -1
    for frame, group in groupby(range(len(dets)), key=lambda i: dets[i].frame_index):
        if frame < prev_frame:
            raise ValidationError(f"{dets[0].video_id}: detections not ordered by frame")
        prev_frame = frame
        idx = list(group)
        if tracks:
            reps = np.stack([t.representative for t in tracks])
            sims = np.stack([embs[i] for i in idx]) @ reps.T
            # best match first; ties go to the lower track id, then earlier detection
            order = sorted(
                ((sims[a, b], b, a) for a in range(len(idx)) for b in range(len(tracks))),
                key=lambda t: (-t[0], t[1], t[2]),
            )
            used_dets: set[int] = set()
            used_tracks: set[int] = set()
            for s, b, a in order:
                if s < threshold - SIM_TOL:
                    break
                if a in used_dets or b in used_tracks:
                    continue
                used_dets.add(a)
                used_tracks.add(b)
                assigned[idx[a]] = b
        for i in idx:
            if assigned[i] < 0:
                tracks.append(_Track(len(tracks), np.zeros_like(embs[i])))
                assigned[i] = len(tracks) - 1
            t = tracks[assigned[i]]
            t.total = t.total + embs[i]
            t.members.append(i)
    return assigned, tracks


def assign_tracks(
    detections: Iterable[Detection], threshold: float = DEFAULT_SIM_THRESHOLD
) -> DatasetManifest:
    """Give every detection a per-video tracking id.

    A detection joins the most similar track of its own video (cosine to the
    track's renormalised running-mean embedding) provided the similarity is at
    least ``threshold`` and the track has not already claimed a face in the
    same frame; otherwise it opens a new track. Video order follows first
    appearance in ``detections``.
    """
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"threshold must lie in (0, 1], got {threshold}")
    by_video: dict[str, list[Detection]] = {}
    for d in detections:
        by_video.setdefault(d.video_id, []).append(d)
    records: list[FaceRecord] = []
    for vid, dets in by_video.items():
        assigned, _ = _track_video(dets, threshold)
        for d, tid in zip(dets, assigned):
            records.append(
                FaceRecord(vid, d.frame_index, tid, tuple(d.bbox), d.expression, d.crop_ref, "original")
            )
    m = DatasetManifest(records, "original")
    m.validate()
    return m


@dataclass
class TrackIndex:
    """Tracks of an original-variant manifest, keyed by (video_id, track_id)."""

    tracks: dict[tuple[str, int], list[FaceRecord]]
    representatives: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_manifest(
        cls, manifest: DatasetManifest, embeddings: dict[str, np.ndarray] | None = None
    ) -> "TrackIndex":
        """Group records; ``embeddings`` (crop_ref -> unit vector) fills the representatives."""
        tracks = manifest.tracks()
        for key, recs in tracks.items():
            frames = [r.frame_index for r in recs]
            if len(set(frames)) != len(frames):
                raise ValidationError(f"track {key} has two faces in one frame")
        reps = {}
        if embeddings is not None:
            for key, recs in tracks.items():
                tot = np.sum([embeddings[r.crop_ref] for r in recs], axis=0)
                reps[key] = tot / np.linalg.norm(tot)
        return cls(tracks, reps)

    def videos(self) -> dict[str, list[tuple[str, int]]]:
        out: dict[str, list[tuple[str, int]]] = {}
        for key in self.tracks:
            out.setdefault(key[0], []).append(key)
        return out

    def expression_of(self, key: tuple[str, int]) -> str | None:
        """Most frequent non-null label in the track (ties -> alphabetical)."""
        labels = [r.expression for r in self.tracks[key] if r.expression is not None]
        if not labels:
            return None
        counts: dict[str, int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        return min(counts, key=lambda lab: (-counts[lab], lab))


def distinct_crops(records: list[FaceRecord]) -> int:
    return len({r.crop_ref for r in records})


def eligible_tracks(manifest: DatasetManifest) -> tuple[set, set]:
    """Return ``(first_slot_tracks, general_tracks)`` as sets of (video_id, track_id).

    General tracks can supply an anchor and a distinct negative (>= 2 crops);
    first-slot tracks can additionally supply the extra face (>= 3 crops).
    """
    if manifest.variant != "original":
        raise DomainError(f"eligible_tracks needs the original variant, got {manifest.variant!r}")
    general, first = set(), set()
    for key, recs in manifest.tracks().items():
        n = distinct_crops(recs)
        if n >= 2:
            general.add(key)
        if n >= 3:
            first.add(key)
    return first, general


def save_detections(detections: Iterable[Detection], path: str | Path) -> None:
    lines = []
    for d in detections:
        lines.append(json.dumps({
            "video_id": d.video_id,
            "frame_index": d.frame_index,
            "track_id": None,
            "bbox": list(d.bbox),
            "expression": d.expression,
            "crop_ref": d.crop_ref,
            "variant": "original",
            "embedding": [float(v) for v in d.embedding],
        }))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Detection(
                    d["video_id"], int(d["frame_index"]), tuple(float(c) for c in d["bbox"]),
                    np.asarray(d["embedding"], dtype=np.float64), d["crop_ref"], d.get("expression"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestParseError(f"bad detection: {exc}", line_no) from None
    return out
