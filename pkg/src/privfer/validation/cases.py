"""Rule-based identity-comparison cases, the cosine matcher, and the
privacy-preservation ratio.

Rules 1-3 calibrate the matcher on original faces. Rules 4-7 pair an
original face with a derived version of the *same* tracked face, whose
ground truth is inverted to 0: a successful anonymiser makes the matcher say
"different".
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch.nn as nn

from ..data_model import CropStore, DatasetManifest, FaceRecord
from ..errors import CapacityError, DomainError
from ..models import embed_images

RULE_GT = {1: 0, 2: 0, 3: 1, 4: 0, 5: 0, 6: 0, 7: 0}
RULE_VARIANT = {4: "pp", 5: "dpp", 6: "pp_recovered", 7: "dpp_recovered"}
CALIBRATION_RULES = (1, 2, 3)
PRIVACY_RULES = (4, 5, 6, 7)
DEFAULT_MATCH_THRESHOLD = 0.5
# cosine of a vector with itself can land a few ulps below 1
MATCH_TOL = 1e-12


@dataclass(frozen=True)
class ValidationCase:
    rule_id: int
    left: FaceRecord
    right: FaceRecord
    ground_truth: int

    def to_json(self) -> str:
        return json.dumps({
            "rule_id": self.rule_id,
            "left": self.left.crop_ref,
            "right": self.right.crop_ref,
            "ground_truth": self.ground_truth,
        })


def _counterpart(
    rec: FaceRecord, derived: dict[tuple, FaceRecord], by_track: dict[tuple, list[FaceRecord]], variant: str
) -> FaceRecord:
    hit = derived.get(rec.face_key)
    if hit is not None:
        return hit
    same_track = by_track.get(rec.track_key)
    if not same_track:
        raise CapacityError(
            f"variant {variant!r} has no face for track {rec.video_id}/{rec.track_id}"
        )
    return same_track[0]


def generate_cases(
    manifests: Mapping[str, DatasetManifest],
    seed: int = 42,
    rule12_quota: int | None = None,
) -> list[ValidationCase]:
    """Build rule 1-7 cases from the five aligned dataset variants.

    Rules 4-7 get exactly one case per original face. Rule 3 pairs each
    face with another crop of its own track when one exists. Rules 1-2 share
    a quota (default: number of original faces); each draw picks rule 1 with
    probability 1/2 when the face's video has another track, else rule 2.
    """
    if "original" not in manifests:
        raise CapacityError("missing variant 'original'")
    originals = list(manifests["original"].records)
    derived: dict[str, tuple[dict, dict]] = {}
    for rule, variant in RULE_VARIANT.items():
        m = manifests.get(variant)
        if m is None:
            raise CapacityError(f"missing derived variant {variant!r} (needed by rule {rule})")
        derived[variant] = (m.by_face(), m.tracks())

    rng = np.random.default_rng(seed)
    cases: list[ValidationCase] = []

    by_video: dict[str, list[FaceRecord]] = {}
    by_track: dict[tuple, list[FaceRecord]] = {}
    for r in originals:
        by_video.setdefault(r.video_id, []).append(r)
        by_track.setdefault(r.track_key, []).append(r)
    videos = sorted(by_video)

    quota = len(originals) if rule12_quota is None else rule12_quota
    for i in range(quota if originals else 0):
        r = originals[i % len(originals)]
        same_video_other = [o for o in by_video[r.video_id] if o.track_id != r.track_id]
        other_videos = [v for v in videos if v != r.video_id]
        use_rule1 = bool(same_video_other) and (not other_videos or rng.random() < 0.5)
        if use_rule1:
            cases.append(ValidationCase(1, r, same_video_other[int(rng.integers(len(same_video_other)))], 0))
        elif other_videos:
            pool = by_video[other_videos[int(rng.integers(len(other_videos)))]]
            cases.append(ValidationCase(2, r, pool[int(rng.integers(len(pool)))], 0))

    for r in originals:
        others = [o for o in by_track[r.track_key] if o.crop_ref != r.crop_ref]
        if others:
            cases.append(ValidationCase(3, r, others[int(rng.integers(len(others)))], 1))

    for rule, variant in RULE_VARIANT.items():
        faces, tracks = derived[variant]
        for r in originals:
            cases.append(ValidationCase(rule, r, _counterpart(r, faces, tracks, variant), 0))
    cases.sort(key=lambda c: c.rule_id)
    return cases


def save_cases(cases: Iterable[ValidationCase], path: str | Path) -> None:
    Path(path).write_text("".join(c.to_json() + "\n" for c in cases))


def load_case_rows(path: str | Path) -> list[dict]:
    """Rows of a cases file (crop refs only; records are not reconstructed)."""
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def match_embeddings(z_left, z_right, threshold: float = DEFAULT_MATCH_THRESHOLD) -> np.ndarray:
    """1 where cosine(z_left, z_right) >= threshold, row-wise."""
    zl = np.atleast_2d(np.asarray(z_left, dtype=np.float64))
    zr = np.atleast_2d(np.asarray(z_right, dtype=np.float64))
    cos = np.sum(zl * zr, axis=1) / (np.linalg.norm(zl, axis=1) * np.linalg.norm(zr, axis=1))
    return (cos >= threshold - MATCH_TOL).astype(np.int64)


def match(left: np.ndarray, right: np.ndarray, embedder: nn.Module,
          threshold: float = DEFAULT_MATCH_THRESHOLD) -> int:
    """Same-identity decision for one pair of uint8 crops."""
    z = embed_images(embedder, np.stack([left, right]))
    return int(match_embeddings(z[:1], z[1:], threshold)[0])


def match_cases(
    cases: Sequence[ValidationCase], store: CropStore, embedder: nn.Module,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> np.ndarray:
    """Predictions for every case, embedding each distinct crop once."""
    refs = sorted({c.left.crop_ref for c in cases} | {c.right.crop_ref for c in cases})
    if not refs:
        return np.zeros(0, dtype=np.int64)
    z = embed_images(embedder, store.load_many(refs))
    row = {ref: i for i, ref in enumerate(refs)}
    zl = z[[row[c.left.crop_ref] for c in cases]]
    zr = z[[row[c.right.crop_ref] for c in cases]]
    return match_embeddings(zl, zr, threshold)


def _aligned(cases: Sequence[ValidationCase], predictions) -> np.ndarray:
    pred = np.asarray(predictions)
    if pred.shape != (len(cases),):
        raise DomainError(f"{len(cases)} cases but {pred.shape} predictions")
    return pred


def matcher_accuracy(cases: Sequence[ValidationCase], predictions) -> float:
    """Fraction of rule 1-3 cases whose prediction equals the ground truth."""
    pred = _aligned(cases, predictions)
    if any(c.rule_id not in CALIBRATION_RULES for c in cases):
        raise DomainError("matcher_accuracy only accepts rule 1-3 cases")
    if not cases:
        return math.nan
    gt = np.array([c.ground_truth for c in cases])
    return float(np.mean(gt == pred))


@dataclass
class PrivacyFragment:
    cases: dict[int, int]
    correct: dict[int, int]
    p_pre: float


def p_pre_from_counts(correct: Mapping[int, int], cases: Mapping[int, int]) -> float:
    total = sum(cases.values())
    if total == 0:
        return math.nan
    return sum(correct.values()) / total


def p_pre(cases: Sequence[ValidationCase], predictions) -> PrivacyFragment:
    """Share of rule 4-7 cases judged "different identity" (prediction 0)."""
    pred = _aligned(cases, predictions)
    if any(c.rule_id not in PRIVACY_RULES for c in cases):
        raise DomainError("p_pre only accepts rule 4-7 cases")
    n = {r: 0 for r in PRIVACY_RULES}
    ok = {r: 0 for r in PRIVACY_RULES}
    for c, p in zip(cases, pred):
        n[c.rule_id] += 1
        ok[c.rule_id] += int(p == c.ground_truth)
    return PrivacyFragment(n, ok, p_pre_from_counts(ok, n))


def _num(x: float):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


@dataclass
class PrivacyReport:
    rule_cases: dict[int, int]
    rule_correct: dict[int, int]
    matcher_accuracy_r13: float
    p_pre: float
    ssim: dict[str, float] = field(default_factory=dict)
    psnr: dict[str, float] = field(default_factory=dict)
    ied: dict[str, dict[str, float]] = field(default_factory=dict)

    def validate(self) -> None:
        for r in self.rule_cases:
            if not 0 <= self.rule_correct.get(r, 0) <= self.rule_cases[r]:
                raise DomainError(f"rule {r}: correct count outside [0, cases]")
        expect = p_pre_from_counts(
            {r: self.rule_correct[r] for r in PRIVACY_RULES if r in self.rule_correct},
            {r: self.rule_cases[r] for r in PRIVACY_RULES if r in self.rule_cases},
        )
        if not (math.isnan(expect) and math.isnan(self.p_pre)) and abs(expect - self.p_pre) > 1e-12:
            raise DomainError("p_pre does not match the rule 4-7 counts")

    def rule_table(self) -> list[dict]:
        """Rows shaped like a per-rule statistics table (cases / correct / ratio)."""
        return [
            {"rule": r, "ground_truth": RULE_GT[r], "cases": self.rule_cases.get(r, 0),
             "correct": self.rule_correct.get(r, 0)}
            for r in sorted(RULE_GT)
        ]

    def to_dict(self) -> dict:
        return {
            "rules": self.rule_table(),
            "matcher_accuracy_r13": _num(self.matcher_accuracy_r13),
            "p_pre": _num(self.p_pre),
            "ssim": {k: _num(v) for k, v in self.ssim.items()},
            "psnr": {k: _num(v) for k, v in self.psnr.items()},
            "ied": {k: {s: _num(v) for s, v in d.items()} for k, d in self.ied.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyReport":
        def num(v):
            if v is None:
                return math.nan
            if isinstance(v, str):
                return float(v)
            return v

        return cls(
            rule_cases={row["rule"]: row["cases"] for row in d["rules"]},
            rule_correct={row["rule"]: row["correct"] for row in d["rules"]},
            matcher_accuracy_r13=num(d["matcher_accuracy_r13"]),
            p_pre=num(d["p_pre"]),
            ssim={k: num(v) for k, v in d["ssim"].items()},
            psnr={k: num(v) for k, v in d["psnr"].items()},
            ied={k: {s: num(v) for s, v in x.items()} for k, x in d["ied"].items()},
        )


def build_report(cases: Sequence[ValidationCase], predictions) -> PrivacyReport:
    """Counts, matcher accuracy (rules 1-3) and P_pre (rules 4-7) from matched cases."""
    pred = _aligned(cases, predictions)
    n = {r: 0 for r in RULE_GT}
    ok = {r: 0 for r in RULE_GT}
    for c, p in zip(cases, pred):
        n[c.rule_id] += 1
        ok[c.rule_id] += int(p == c.ground_truth)
    cal = [i for i, c in enumerate(cases) if c.rule_id in CALIBRATION_RULES]
    priv = [i for i, c in enumerate(cases) if c.rule_id in PRIVACY_RULES]
    acc = matcher_accuracy([cases[i] for i in cal], pred[cal])
    frag = p_pre([cases[i] for i in priv], pred[priv])
    return PrivacyReport(n, ok, acc, frag.p_pre)
