"""Face manifests: records, dataset variants, JSONL (de)serialisation and crop storage."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import ManifestParseError, ValidationError

VARIANTS = ("original", "pp", "dpp", "pp_recovered", "dpp_recovered")
SCHEMA_VERSION = 1
DEFAULT_CROP_SIZE = 112
RECORD_FIELDS = ("video_id", "frame_index", "track_id", "bbox", "expression", "crop_ref", "variant")


@dataclass(frozen=True)
class FaceRecord:
    video_id: str
    frame_index: int
    track_id: int
    bbox: tuple[float, float, float, float]
    expression: str | None
    crop_ref: str
    variant: str = "original"

    @property
    def key(self) -> tuple[str, int, int, str]:
        return (self.video_id, self.frame_index, self.track_id, self.variant)

    @property
    def face_key(self) -> tuple[str, int, int]:
        """Variant-free key that aligns one face across dataset variants."""
        return (self.video_id, self.frame_index, self.track_id)

    @property
    def track_key(self) -> tuple[str, int]:
        return (self.video_id, self.track_id)

    def derive(self, variant: str, crop_ref: str) -> "FaceRecord":
        return replace(self, variant=variant, crop_ref=crop_ref)

    def validate(self, frame_size: tuple[int, int] | None = None) -> None:
        name = f"record {self.video_id}/{self.frame_index}/{self.track_id}/{self.variant}"
        if not isinstance(self.video_id, str) or not self.video_id:
            raise ValidationError(f"{name}: video_id must be a non-empty string")
        for attr in ("frame_index", "track_id"):
            v = getattr(self, attr)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ValidationError(f"{name}: {attr} must be a non-negative integer, got {v!r}")
        if len(self.bbox) != 4 or not all(math.isfinite(c) for c in self.bbox):
            raise ValidationError(f"{name}: bbox must be 4 finite reals")
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(f"{name}: bbox must satisfy x1<x2 and y1<y2, got {self.bbox}")
        if x1 < 0 or y1 < 0:
            raise ValidationError(f"{name}: bbox outside frame: {self.bbox}")
        if frame_size is not None and (x2 > frame_size[0] or y2 > frame_size[1]):
            raise ValidationError(f"{name}: bbox {self.bbox} exceeds frame {frame_size}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"{name}: unknown variant {self.variant!r}")
        if self.expression is not None and not isinstance(self.expression, str):
            raise ValidationError(f"{name}: expression must be a label or null")
        if not self.crop_ref:
            raise ValidationError(f"{name}: empty crop_ref")

    def to_json(self) -> str:
        d = {
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "track_id": self.track_id,
            "bbox": list(self.bbox),
            "expression": self.expression,
            "crop_ref": self.crop_ref,
            "variant": self.variant,
        }
        return json.dumps(d)

    @classmethod
    def from_dict(cls, d: dict) -> "FaceRecord":
        if set(d) != set(RECORD_FIELDS):
            raise ValueError(f"expected fields {RECORD_FIELDS}, got {sorted(d)}")
        return cls(
            video_id=d["video_id"],
            frame_index=d["frame_index"],
            track_id=d["track_id"],
            bbox=tuple(float(c) for c in d["bbox"]),
            expression=d["expression"],
            crop_ref=d["crop_ref"],
            variant=d["variant"],
        )


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("embedding must be a finite 1-D vector")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValidationError(f"embedding flagged normalized has norm {np.linalg.norm(v):.8f}")
        object.__setattr__(self, "values", v)

    @classmethod
    def of(cls, values) -> "EmbeddingVector":
        """Normalise ``values`` and wrap them."""
        v = np.asarray(values, dtype=np.float64)
        return cls(v / np.linalg.norm(v), True)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class DatasetManifest:
    records: list[FaceRecord] = field(default_factory=list)
    variant: str = "original"
    schema_version: int = SCHEMA_VERSION
    frame_size: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[FaceRecord]:
        return iter(self.records)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown manifest variant {self.variant!r}")
        seen: set = set()
        for r in self.records:
            r.validate(self.frame_size)
            if r.variant != self.variant:
                raise ValidationError(
                    f"record {r.video_id}/{r.frame_index}/{r.track_id} has variant "
                    f"{r.variant!r} in a {self.variant!r} manifest"
                )
            if r.key in seen:
                raise ValidationError(f"duplicate record key {r.key}")
            seen.add(r.key)

    def by_face(self) -> dict[tuple[str, int, int], FaceRecord]:
        return {r.face_key: r for r in self.records}

    def tracks(self) -> dict[tuple[str, int], list[FaceRecord]]:
        """Records grouped by (video_id, track_id), ordered by frame."""
        out: dict[tuple[str, int], list[FaceRecord]] = {}
        for r in self.records:
            out.setdefault(r.track_key, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.frame_index)
        return out


def merge_records(manifests: Iterable[DatasetManifest]) -> list[FaceRecord]:
    """Concatenate several manifests, re-checking the uniqueness key across them."""
    out: list[FaceRecord] = []
    seen: set = set()
    for m in manifests:
        for r in m.records:
            if r.key in seen:
                raise ValidationError(f"duplicate record key {r.key} across manifests")
            seen.add(r.key)
            out.append(r)
    return out


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    manifest.validate()
    header = {"schema_version": manifest.schema_version, "variant": manifest.variant}
    if manifest.frame_size is not None:
        header["frame_size"] = list(manifest.frame_size)
    lines = [json.dumps({"manifest": header})]
    lines.extend(r.to_json() for r in manifest.records)
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSONL manifest written by :func:`save_manifest`.

    A missing header line is tolerated (the variant is then taken from the
    records, or defaults to ``original`` for an empty file).
    """
    header: dict | None = None
    records: list[FaceRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_no) from None
            if not isinstance(d, dict):
                raise ManifestParseError("expected a JSON object", line_no)
            if "manifest" in d:
                if header is not None or records:
                    raise ManifestParseError("header must be the first line", line_no)
                header = d["manifest"]
                continue
            try:
                records.append(FaceRecord.from_dict(d))
            except (ValueError, TypeError, KeyError) as exc:
                raise ManifestParseError(str(exc), line_no) from None

    if header is None:
        header = {"variant": records[0].variant if records else "original"}
    fs = header.get("frame_size")
    m = DatasetManifest(
        records=records,
        variant=header.get("variant", "original"),
        schema_version=header.get("schema_version", SCHEMA_VERSION),
        frame_size=tuple(fs) if fs is not None else None,
    )
    m.validate()
    return m


class CropStore:
    """Face crops stored as 8-bit RGB PNG files under ``root``, keyed by relative path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, ref: str) -> Path:
        return self.root / ref

    def exists(self, ref: str) -> bool:
        return self.path(ref).is_file()

    def save(self, ref: str, img: np.ndarray) -> None:
        img = np.asarray(img)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"crop must be uint8 HxWx3, got {img.dtype} {img.shape}")
        p = self.path(ref)
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img, "RGB").save(p, format="PNG")

    def load(self, ref: str) -> np.ndarray:
        with Image.open(self.path(ref)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def load_many(self, refs: Iterable[str]) -> np.ndarray:
        imgs = [self.load(r) for r in refs]
        if not imgs:
            return np.zeros((0, 0, 0, 3), dtype=np.uint8)
        return np.stack(imgs)
