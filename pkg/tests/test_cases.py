import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import manifest_from_tracks
from privfer.data_model import CropStore, DatasetManifest
from privfer.errors import CapacityError, DomainError
from privfer.validation.cases import (
    PRIVACY_RULES,
    RULE_GT,
    RULE_VARIANT,
    PrivacyReport,
    ValidationCase,
    build_report,
    generate_cases,
    load_case_rows,
    match,
    match_cases,
    match_embeddings,
    matcher_accuracy,
    p_pre,
    p_pre_from_counts,
    save_cases,
)

# Table of rule -> ground truth, written out independently of the module
TABLE_GT = {1: 0, 2: 0, 3: 1, 4: 0, 5: 0, 6: 0, 7: 0}


def all_variants(original: DatasetManifest) -> dict:
    out = {"original": original}
    for v in ("pp", "dpp", "pp_recovered", "dpp_recovered"):
        out[v] = DatasetManifest([r.derive(v, f"{v}/{r.crop_ref}") for r in original.records], v)
    return out


def test_ten_faces_give_ten_cases_per_privacy_rule():
    m = manifest_from_tracks({"a": [3, 2], "b": [4], "c": [1]})
    assert len(m) == 10
    cases = generate_cases(all_variants(m))
    counts = {r: sum(c.rule_id == r for c in cases) for r in RULE_GT}
    assert all(counts[r] == 10 for r in PRIVACY_RULES)
    assert counts[3] == 9  # the single-crop track in video c has no partner
    assert counts[1] + counts[2] == 10


def test_single_crop_tracks_give_no_rule3():
    m = manifest_from_tracks({"a": [1], "b": [1], "c": [1]})
    cases = generate_cases(all_variants(m))
    assert not any(c.rule_id == 3 for c in cases)


def test_missing_variant_names_it():
    m = all_variants(manifest_from_tracks({"a": [2]}))
    del m["dpp_recovered"]
    with pytest.raises(CapacityError, match="dpp_recovered"):
        generate_cases(m)


def test_counterpart_falls_back_to_same_track():
    m = manifest_from_tracks({"a": [3]})
    variants = all_variants(m)
    variants["pp"] = DatasetManifest([r for r in variants["pp"].records if r.frame_index == 1], "pp")
    cases = [c for c in generate_cases(variants) if c.rule_id == 4]
    assert len(cases) == 3 and all(c.right.track_key == c.left.track_key for c in cases)
    variants["pp"] = DatasetManifest([], "pp")
    with pytest.raises(CapacityError, match="pp"):
        generate_cases(variants)


def test_cases_file(tmp_path):
    cases = generate_cases(all_variants(manifest_from_tracks({"a": [2, 2], "b": [2]})))
    p = tmp_path / "cases.jsonl"
    save_cases(cases, p)
    rows = load_case_rows(p)
    assert len(rows) == len(cases)
    assert set(rows[0]) == {"rule_id", "left", "right", "ground_truth"}
    assert [r["rule_id"] for r in rows] == [c.rule_id for c in cases]


def test_seeded_generation():
    m = all_variants(manifest_from_tracks({"a": [3, 2], "b": [4], "c": [2, 2]}))
    assert generate_cases(m, seed=1) == generate_cases(m, seed=1)


# ---- property over random toy manifests


@st.composite
def toy_manifests(draw):
    n_videos = draw(st.integers(1, 6))
    return manifest_from_tracks({
        f"v{i}": draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)) for i in range(n_videos)
    })


@settings(max_examples=200, deadline=None)
@given(toy_manifests(), st.integers(0, 1000))
def test_case_generator_properties(m, seed):
    cases = generate_cases(all_variants(m), seed=seed)
    counts = {r: sum(c.rule_id == r for c in cases) for r in PRIVACY_RULES}
    assert len(set(counts.values())) == 1 and counts[4] == len(m)
    rule3_lefts = {c.left.crop_ref for c in cases if c.rule_id == 3}
    for c in cases:
        assert c.ground_truth == TABLE_GT[c.rule_id]
        assert c.left.variant == "original"
        if c.rule_id == 1:
            assert c.left.video_id == c.right.video_id and c.left.track_id != c.right.track_id
            assert c.right.variant == "original"
        elif c.rule_id == 2:
            assert c.left.video_id != c.right.video_id and c.right.variant == "original"
        elif c.rule_id == 3:
            assert c.left.track_key == c.right.track_key and c.left.crop_ref != c.right.crop_ref
            assert c.right.variant == "original"
        else:
            assert c.left.track_key == c.right.track_key
            assert c.right.variant == RULE_VARIANT[c.rule_id]
            # falsification inversion: the same face's all-original analog is a GT-1 case
            if len(m.tracks()[c.left.track_key]) > 1:
                assert c.left.crop_ref in rule3_lefts


# ---- matcher


class ChannelMean(nn.Module):
    """Embeds a crop as its mean colour, so pure-colour crops are orthogonal."""

    dim = 3

    def forward(self, x):
        return nn.functional.normalize(x.mean(dim=(2, 3)), dim=1)


def solid(rgb):
    return np.tile(np.array(rgb, np.uint8), (8, 8, 1))


def test_match_examples():
    emb = ChannelMean()
    red, green = solid([200, 0, 0]), solid([0, 180, 0])
    for t in (0.1, 0.5, 0.99, 1.0):
        assert match(red, red, emb, t) == 1
    assert match(red, green, emb, 0.5) == 0


def test_match_threshold_boundary_is_inclusive():
    a, b = np.array([1.0, 0.0]), np.array([3.0, 4.0])  # cosine exactly 0.6
    assert match_embeddings(a, b, 0.6).tolist() == [1]
    assert match_embeddings(a, b, 0.6000001).tolist() == [0]


def test_match_cases_uses_store(tmp_path):
    store = CropStore(tmp_path)
    m = manifest_from_tracks({"a": [2], "b": [1]})
    colours = {0: [200, 0, 0], 1: [190, 5, 0]}
    for r in m.records:
        store.save(r.crop_ref, solid(colours[r.frame_index] if r.video_id == "a" else [0, 0, 210]))
    cases = [
        ValidationCase(3, m.records[0], m.records[1], 1),
        ValidationCase(2, m.records[0], m.records[2], 0),
    ]
    assert match_cases(cases, store, ChannelMean()).tolist() == [1, 0]


def test_matcher_accuracy():
    m = manifest_from_tracks({"a": [2]})
    r0, r1 = m.records
    cases = [ValidationCase(3, r0, r1, 1)] * 10
    assert matcher_accuracy(cases, [1] * 10) == 1.0
    assert matcher_accuracy(cases, [1] * 9 + [0]) == 0.9
    with pytest.raises(DomainError):
        matcher_accuracy(cases, [1] * 9)
    with pytest.raises(DomainError):
        matcher_accuracy([ValidationCase(4, r0, r1, 0)], [0])


# ---- P_pre


@pytest.mark.parametrize(
    "correct, total, expected",
    [
        ((24897, 25297, 24681, 25052), 25969, 0.9620),  # DFEW
        ((4108, 4127, 3952, 4010), 4464, 0.9071),  # CREMA-D
        ((2201, 2299, 2101, 2174), 2343, 0.9363),  # RAVDESS
    ],
)
def test_p_pre_golden(correct, total, expected):
    got = p_pre_from_counts(dict(zip(PRIVACY_RULES, correct)), {r: total for r in PRIVACY_RULES})
    assert abs(got - expected) < 1e-4


def test_p_pre_total_leakage_and_errors():
    m = manifest_from_tracks({"a": [2]})
    r0, r1 = m.records
    cases = [ValidationCase(rule, r0, r1.derive(RULE_VARIANT[rule], "x"), 0) for rule in PRIVACY_RULES]
    frag = p_pre(cases, [1, 1, 1, 1])
    assert frag.p_pre == 0.0 and frag.cases == {4: 1, 5: 1, 6: 1, 7: 1}
    assert p_pre(cases, [0, 0, 1, 0]).p_pre == 0.75
    with pytest.raises(DomainError):
        p_pre([ValidationCase(3, r0, r1, 1)], [1])
    assert math.isnan(p_pre([], []).p_pre)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(PRIVACY_RULES), st.integers(0, 1)), min_size=1, max_size=40))
def test_p_pre_equals_brute_force(rows):
    m = manifest_from_tracks({"a": [2]})
    r0, r1 = m.records
    cases = [ValidationCase(rule, r0, r1, 0) for rule, _ in rows]
    preds = [p for _, p in rows]
    brute = sum(1 for p in preds if p == 0) / len(preds)
    assert p_pre(cases, preds).p_pre == brute


# ---- report


def test_report_round_trip_and_infinity():
    m = manifest_from_tracks({"a": [3, 2], "b": [2]})
    cases = generate_cases(all_variants(m))
    preds = np.array([c.ground_truth for c in cases])
    preds[-1] = 1
    rep = build_report(cases, preds)
    rep.psnr["pp"] = math.inf
    rep.ssim["pp"] = 0.5
    rep.ied["original->pp"] = {"mean": 0.3}
    d = rep.to_dict()
    assert d["psnr"]["pp"] == "inf"
    assert [row["rule"] for row in d["rules"]] == list(range(1, 8))
    back = PrivacyReport.from_dict(d)
    assert back == rep
    assert rep.matcher_accuracy_r13 == 1.0
    assert 0.0 <= rep.p_pre < 1.0
    rep.validate()
    rep.p_pre = 0.1
    with pytest.raises(DomainError):
        rep.validate()
