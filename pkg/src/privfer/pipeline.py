"""Stage-by-stage pipeline on the synthetic toy-video dataset.

Stage graph (each stage only reads artifacts of earlier stages)::

    synth -> track -> priors -> train-pp -> anonymize -> train-denoise -> denoise
          -> train-fer -> train-recovery -> validate -> report

Every stage writes into ``<out_dir>/<stage>/`` plus a ``provenance.json``
holding the config text, its hash, the seed and SHA-256 hashes of the files
it read and wrote.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from . import synth
from .anonymizer import TrainConfig, anonymize, pretrain_reconstruction, train_fpp
from .batch_builder import MODES, batch_stream, load_batches, save_batches
from .data_model import VARIANTS, CropStore, DatasetManifest, load_manifest, save_manifest
from .denoise_fer import FerReport, clips_from_manifest, denoise, evaluate_fer, train_denoiser, train_fer
from .errors import DependencyError, DomainError, UsageError
from .knowledge_priors import Detection, TrackIndex, assign_tracks, load_detections, save_detections
from .models import (
    FisherEmbedder,
    FrameExpressionNet,
    UNet,
    VideoExpressionNet,
    checksum,
    embed_images,
    freeze,
    load_checkpoint,
    save_checkpoint,
    seed_everything,
    to_tensor,
)
from .training import FitConfig, fit_classifier
from .validation import (
    PrivacyReport,
    build_report,
    generate_cases,
    gaussian_blur,
    ied,
    match_cases,
    psnr,
    recover,
    save_cases,
    ssim,
    train_recovery,
)

log = logging.getLogger(__name__)

STAGES = (
    "synth", "track", "priors", "train-pp", "anonymize", "train-denoise", "denoise",
    "train-fer", "train-recovery", "validate", "report",
)


RUN_ONLY = ("out_dir", "torch_threads")


@dataclass
class PipelineConfig:
    """Every knob of a toy run. Written and read as ``key = value`` lines."""

    seed: int = 42
    out_dir: str = "runs/toy"
    torch_threads: int = 1
    # toy dataset
    expressions: str = "happy,sad,surprise"
    n_videos: int = 48
    frames_per_video: int = 8
    two_person_prob: float = 0.3
    crop_size: int = 32
    pool_identities: int = 150
    pool_per_identity: int = 10
    embed_dim: int = 32
    fexp_epochs: int = 8
    test_fraction: float = 0.3
    # tracking and batches
    sim_threshold: float = 0.7
    expression_mode: str = "matched"
    batch_k: int = 2
    batches_per_epoch: int = 300
    # f_pp (TrainConfig fields)
    alpha: float = 0.01
    epochs: int = 1
    triplet_margin: float = 0.2
    learning_rate: float = 1e-3
    pretrain_epochs: int = 15
    pretrain_batch_size: int = 32
    unet_width: int = 16
    # denoiser and FER
    denoise_enabled: bool = True
    denoise_epochs: int = 6
    fer_epochs: int = 60
    fer_batch_size: int = 8
    fer_learning_rate: float = 1e-3
    clip_len: int = 8
    # validation
    matcher_threshold: float = 0.5
    blur_sigma: float = 0.4
    baseline_blur: bool = True
    recovery_epochs: int = 5
    recovery_learning_rate: float = 2e-3

    def __post_init__(self):
        self.train_config()
        if self.expression_mode not in MODES:
            raise DomainError(f"expression_mode must be one of {MODES}")
        if not 0.0 < self.sim_threshold <= 1.0:
            raise DomainError("sim_threshold must lie in (0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise DomainError("test_fraction must lie in (0, 1)")
        if self.blur_sigma <= 0:
            raise DomainError("blur_sigma must be positive")
        unknown = [e for e in self.classes if e not in synth.EXPRESSION_SHAPES]
        if unknown or len(self.classes) < 2:
            raise DomainError(f"need >= 2 known expressions, got {self.classes}")

    @property
    def classes(self) -> list[str]:
        return [e.strip() for e in self.expressions.split(",") if e.strip()]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, epochs=self.epochs, triplet_margin=self.triplet_margin,
            learning_rate=self.learning_rate, seed=self.seed, batch_k=self.batch_k,
            pretrain_epochs=self.pretrain_epochs, pretrain_batch_size=self.pretrain_batch_size,
        )

    def fit_config(self, epochs: int) -> FitConfig:
        return FitConfig(epochs=epochs, learning_rate=self.learning_rate, seed=self.seed)

    def fer_config(self) -> FitConfig:
        return FitConfig(self.fer_epochs, self.fer_learning_rate, self.fer_batch_size, self.seed)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Digest of the experiment knobs; where and with how many threads it runs is left out."""
        text = "".join(line + "\n" for line in self.to_text().splitlines() if line.split(" = ")[0] not in RUN_ONLY)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        """Parse ``key = value`` lines (``#`` comments, blank lines allowed)."""
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        values: dict = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config line {line_no}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in defaults:
                raise UsageError(f"config line {line_no}: unknown key {key!r}")
            values[key] = _parse_value(key, val, defaults[key])
        for key, val in overrides.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = val
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(key: str, val: str, default):
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {val!r} as {type(default).__name__}") from None
    return val


# artifact name -> path relative to out_dir; the producing stage is the first component
ARTIFACTS = {
    "crops_original": "synth/crops",
    "detections": "synth/detections.jsonl",
    "f_e": "synth/f_e.pt",
    "f_exp": "synth/f_exp.pt",
    "split": "synth/split.json",
    "original": "track/manifest_original.jsonl",
    "batches": "priors/batches.jsonl",
    "f_pp": "train-pp/f_pp.pt",
    "pp": "anonymize/manifest_pp.jsonl",
    "blur_pp": "anonymize/manifest_blur_pp.jsonl",
    "f_denoise": "train-denoise/f_denoise.pt",
    "dpp": "denoise/manifest_dpp.jsonl",
    "blur_dpp": "denoise/manifest_blur_dpp.jsonl",
    "fer": "train-fer/fer.json",
    "pp_recovered": "train-recovery/manifest_pp_recovered.jsonl",
    "dpp_recovered": "train-recovery/manifest_dpp_recovered.jsonl",
    "blur_pp_recovered": "train-recovery/manifest_blur_pp_recovered.jsonl",
    "blur_dpp_recovered": "train-recovery/manifest_blur_dpp_recovered.jsonl",
    "cases": "validate/cases.jsonl",
    "privacy": "validate/privacy.json",
    "privacy_blur": "validate/privacy_blur.json",
    "report": "report/report.json",
}


def _blur(cfg: PipelineConfig, names: list[str]) -> list[str]:
    return names if cfg.baseline_blur else []


def _needs(stage: str, cfg: PipelineConfig) -> list[str]:
    """Artifacts a stage reads, given the config."""
    derived = ["pp", "dpp", "pp_recovered", "dpp_recovered"]
    return {
        "synth": [],
        "track": ["detections"],
        "priors": ["original"],
        "train-pp": ["original", "batches", "f_e"],
        "anonymize": ["original", "f_pp"],
        "train-denoise": ["pp", "f_exp", "split"] if cfg.denoise_enabled else [],
        "denoise": ["pp"] + (["f_denoise"] if cfg.denoise_enabled else []) + _blur(cfg, ["blur_pp"]),
        "train-fer": ["original", "pp", "dpp", "split"],
        "train-recovery": ["original", "pp", "dpp"] + _blur(cfg, ["blur_pp", "blur_dpp"]),
        "validate": ["original", "f_e", *derived]
        + _blur(cfg, ["blur_pp", "blur_dpp", "blur_pp_recovered", "blur_dpp_recovered"]),
        "report": ["privacy"] + _blur(cfg, ["privacy_blur"]),
    }[stage]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in rows))


class Context:
    """Paths and shared helpers for one pipeline invocation."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.out_dir)
        self.store = CropStore(self.root)

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name]

    def manifest(self, name: str) -> DatasetManifest:
        return load_manifest(self.path(name))

    def crops(self, manifest: DatasetManifest) -> np.ndarray:
        return self.store.load_many(r.crop_ref for r in manifest.records)

    def model(self, name: str):
        return load_checkpoint(self.path(name))[0]

    def split(self) -> dict:
        return json.loads(self.path("split").read_text())

    def write_variant(
        self, stage: str, tag: str, variant: str, source: DatasetManifest, images: np.ndarray, name: str
    ) -> DatasetManifest:
        """Store ``images`` as crops of ``variant`` aligned with ``source`` records."""
        records = []
        for rec, img in zip(source.records, images):
            ref = f"{stage}/crops/{tag}/{rec.video_id}/{rec.frame_index:05d}_{rec.track_id}.png"
            self.store.save(ref, img)
            records.append(rec.derive(variant, ref))
        m = DatasetManifest(records, variant, frame_size=source.frame_size)
        save_manifest(m, self.path(name))
        return m


# ---------------------------------------------------------------- stages


def stage_synth(ctx: Context) -> None:
    cfg = ctx.config
    pool_seq, video_seq, split_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    size = cfg.crop_size
    classes = cfg.classes

    # disjoint labelled population: "pretraining" data for f_e and f_exp
    imgs, ids, expr = synth.make_labelled_pool(
        cfg.pool_identities, cfg.pool_per_identity, classes, size, np.random.default_rng(pool_seq)
    )
    f_e = freeze(FisherEmbedder(cfg.embed_dim).fit(imgs, ids))
    save_checkpoint(f_e, ctx.path("f_e"))
    f_exp = FrameExpressionNet(len(classes))
    fit_classifier(f_exp, to_tensor(imgs), expr, cfg.fit_config(cfg.fexp_epochs), augmented=True)
    save_checkpoint(freeze(f_exp), ctx.path("f_exp"), classes=classes)

    videos = synth.make_videos(
        cfg.n_videos, classes, cfg.frames_per_video, size, np.random.default_rng(video_seq),
        two_person_prob=cfg.two_person_prob,
    )
    dets = []
    for v in videos:
        for f, people in enumerate(v.frames):
            for p, crop in enumerate(people):
                ref = f"synth/crops/{v.video_id}/{f:05d}_{p}.png"
                ctx.store.save(ref, crop)
                bbox = (float(p * size), 0.0, float((p + 1) * size), float(size))
                dets.append(Detection(v.video_id, f, bbox, None, ref, v.expression))
    z = embed_images(f_e, ctx.store.load_many(d.crop_ref for d in dets))
    dets = [dataclasses.replace(d, embedding=e) for d, e in zip(dets, z)]
    save_detections(dets, ctx.path("detections"))

    # stratified video split for the FER stages
    rng = np.random.default_rng(split_seq)
    test = []
    for c in classes:
        vids = sorted(v.video_id for v in videos if v.expression == c)
        n_test = max(1, int(round(cfg.test_fraction * len(vids))))
        test += [vids[i] for i in sorted(rng.choice(len(vids), size=n_test, replace=False))]
    train = sorted(v.video_id for v in videos if v.video_id not in set(test))
    _write_json(ctx.path("split"), {"classes": classes, "train": train, "test": sorted(test)})


def stage_track(ctx: Context) -> None:
    cfg = ctx.config
    m = assign_tracks(load_detections(ctx.path("detections")), cfg.sim_threshold)
    m.frame_size = (2 * cfg.crop_size, cfg.crop_size)
    save_manifest(m, ctx.path("original"))
    log.info("track: %d faces in %d tracks", len(m), len(m.tracks()))


def stage_priors(ctx: Context) -> None:
    cfg = ctx.config
    index = TrackIndex.from_manifest(ctx.manifest("original"))
    batches = list(batch_stream(index, cfg.batch_k, cfg.batches_per_epoch, cfg.expression_mode, cfg.seed))
    save_batches(batches, ctx.path("batches"))


def stage_train_pp(ctx: Context) -> None:
    cfg = ctx.config
    original = ctx.manifest("original")
    index = TrackIndex.from_manifest(original)
    batches = load_batches(ctx.path("batches"), index)
    f_e = freeze(ctx.model("f_e"))
    tc = cfg.train_config()
    f_pp = UNet(cfg.crop_size, cfg.unet_width)
    pre, train = [], []
    before = checksum(f_e)
    pretrain_reconstruction(f_pp, ctx.crops(original), tc, pre)
    loader = [ctx.store.load_many(b.crop_refs) for b in batches]
    train_fpp(loader, f_pp, f_e, tc, train)
    save_checkpoint(f_pp, ctx.path("f_pp"))
    _write_jsonl(ctx.path("f_pp").with_name("history.jsonl"),
                 [{"phase": "pretrain", **h} for h in pre] + [{"phase": "train", **h} for h in train])
    _write_json(ctx.path("f_pp").with_name("freeze_audit.json"), {"f_e": {"before": before, "after": checksum(f_e)}})


def stage_anonymize(ctx: Context) -> None:
    cfg = ctx.config
    original = ctx.manifest("original")
    crops = ctx.crops(original)
    ctx.write_variant("anonymize", "pp", "pp", original, anonymize(ctx.model("f_pp"), crops), "pp")
    if cfg.baseline_blur:
        ctx.write_variant("anonymize", "blur_pp", "pp", original, gaussian_blur(crops, cfg.blur_sigma), "blur_pp")


def stage_train_denoise(ctx: Context) -> None:
    cfg = ctx.config
    if not cfg.denoise_enabled:
        return
    split = ctx.split()
    train_vids = set(split["train"])
    pp = DatasetManifest([r for r in ctx.manifest("pp").records if r.video_id in train_vids], "pp")
    labels = np.array([split["classes"].index(r.expression) for r in pp.records])
    f_exp = freeze(ctx.model("f_exp"))
    f_denoise = UNet(cfg.crop_size, cfg.unet_width, residual=True)
    history: list = []
    before = checksum(f_exp)
    train_denoiser(ctx.crops(pp), labels, f_denoise, f_exp, cfg.fit_config(cfg.denoise_epochs), history)
    save_checkpoint(f_denoise, ctx.path("f_denoise"))
    _write_jsonl(ctx.path("f_denoise").with_name("history.jsonl"), history)
    _write_json(ctx.path("f_denoise").with_name("freeze_audit.json"), {"f_exp": {"before": before, "after": checksum(f_exp)}})


def stage_denoise(ctx: Context) -> None:
    """Produce the dpp variant; with the denoiser disabled dpp is a relabelled copy of pp."""
    cfg = ctx.config
    f_denoise = ctx.model("f_denoise") if cfg.denoise_enabled else None
    for src, dst in [("pp", "dpp")] + ([("blur_pp", "blur_dpp")] if cfg.baseline_blur else []):
        m = ctx.manifest(src)
        crops = ctx.crops(m)
        out = denoise(f_denoise, crops) if f_denoise is not None else crops
        ctx.write_variant("denoise", dst, "dpp", m, out, dst)


def stage_train_fer(ctx: Context) -> None:
    cfg = ctx.config
    split = ctx.split()
    classes = split["classes"]
    modes = {"original": "original", "without_denoise": "pp"}
    if cfg.denoise_enabled:
        modes["with_denoise"] = "dpp"
    out: dict[str, dict | None] = {"original": None, "without_denoise": None, "with_denoise": None}
    test_vids = set(split["test"])
    for mode, name in modes.items():
        clips, labels, keys = clips_from_manifest(ctx.manifest(name), ctx.store, classes, cfg.clip_len)
        is_test = np.array([k[0] in test_vids for k in keys], dtype=bool)
        f_fer = VideoExpressionNet(len(classes))
        train_fer(clips[~is_test], labels[~is_test], f_fer, cfg.fer_config())
        save_checkpoint(f_fer, ctx.root / "train-fer" / f"f_fer_{mode}.pt", classes=classes)
        out[mode] = evaluate_fer(f_fer, clips[is_test], labels[is_test], classes).to_dict()
        log.info("fer[%s] overall=%.3f", mode, out[mode]["overall"])
    _write_json(ctx.path("fer"), out)


def stage_train_recovery(ctx: Context) -> None:
    cfg = ctx.config
    original = ctx.manifest("original")
    targets = ctx.crops(original)
    jobs = [("pp", "pp"), ("dpp", "dpp")]
    if cfg.baseline_blur:
        jobs += [("blur_pp", "pp"), ("blur_dpp", "dpp")]
    for name, variant in jobs:
        src = ctx.manifest(name)
        if [r.face_key for r in src.records] != [r.face_key for r in original.records]:
            raise DomainError(f"{name} manifest is not aligned with the original faces")
        sources = ctx.crops(src)
        net = UNet(cfg.crop_size, cfg.unet_width, residual=True)
        model = train_recovery(targets, sources, net, variant,
                               FitConfig(cfg.recovery_epochs, cfg.recovery_learning_rate, seed=cfg.seed))
        rec, out_variant = recover(model, sources, variant)
        save_checkpoint(net, ctx.root / "train-recovery" / f"f_reco_{name}.pt", source_variant=variant)
        ctx.write_variant("train-recovery", f"{name}_recovered", out_variant, src, rec, f"{name}_recovered")


def _privacy(ctx: Context, manifests: dict[str, DatasetManifest], f_e, cases_path: Path | None) -> PrivacyReport:
    cfg = ctx.config
    cases = generate_cases(manifests, seed=cfg.seed)
    if cases_path is not None:
        save_cases(cases, cases_path)
    report = build_report(cases, match_cases(cases, ctx.store, f_e, cfg.matcher_threshold))

    original = manifests["original"]
    org = ctx.crops(original)
    z = {"original": embed_images(f_e, org)}
    for variant in VARIANTS[1:]:
        faces = manifests[variant].by_face()
        imgs = ctx.store.load_many(faces[r.face_key].crop_ref for r in original.records)
        report.ssim[variant] = float(np.mean([ssim(a, b) for a, b in zip(org, imgs)]))
        report.psnr[variant] = float(np.mean([psnr(a, b) for a, b in zip(org, imgs)]))
        z[variant] = embed_images(f_e, imgs)
    pairs = [("original", v) for v in VARIANTS[1:]] + [("pp", "dpp"), ("pp", "pp_recovered"), ("dpp", "dpp_recovered")]
    for a, b in pairs:
        d = np.array([ied(x, y) for x, y in zip(z[a], z[b])])
        report.ied[f"{a}->{b}"] = {"mean": float(d.mean()), "median": float(np.median(d)), "max": float(d.max())}
    report.validate()
    return report


def stage_validate(ctx: Context) -> None:
    cfg = ctx.config
    f_e = freeze(ctx.model("f_e"))
    original = ctx.manifest("original")
    ours = {"original": original, **{v: ctx.manifest(v) for v in VARIANTS[1:]}}
    _write_json(ctx.path("privacy"), _privacy(ctx, ours, f_e, ctx.path("cases")).to_dict())
    if cfg.baseline_blur:
        blur = {"original": original, **{v: ctx.manifest("blur_" + v) for v in VARIANTS[1:]}}
        _write_json(ctx.path("privacy_blur"), _privacy(ctx, blur, f_e, None).to_dict())


def _load_fer(path: Path) -> dict[str, FerReport | None] | None:
    if not path.exists():
        return None
    return {k: (FerReport.from_dict(v) if v is not None else None) for k, v in json.loads(path.read_text()).items()}


def stage_report(ctx: Context) -> None:
    cfg = ctx.config
    privacy = PrivacyReport.from_dict(json.loads(ctx.path("privacy").read_text()))
    baseline = None
    if cfg.baseline_blur:
        baseline = PrivacyReport.from_dict(json.loads(ctx.path("privacy_blur").read_text()))
    meta = {"seed": cfg.seed, "alpha": cfg.alpha, "config_hash": cfg.hash(), "blur_sigma": cfg.blur_sigma}
    emit_report(privacy, _load_fer(ctx.path("fer")), ctx.path("report"), baseline=baseline, meta=meta)


STAGE_FUNCS: dict[str, Callable[[Context], None]] = {
    "synth": stage_synth,
    "track": stage_track,
    "priors": stage_priors,
    "train-pp": stage_train_pp,
    "anonymize": stage_anonymize,
    "train-denoise": stage_train_denoise,
    "denoise": stage_denoise,
    "train-fer": stage_train_fer,
    "train-recovery": stage_train_recovery,
    "validate": stage_validate,
    "report": stage_report,
}


# ---------------------------------------------------------------- reports


def emit_report(
    privacy: PrivacyReport,
    fer: FerReport | Mapping[str, FerReport | None] | None,
    path: str | Path,
    baseline: PrivacyReport | None = None,
    meta: dict | None = None,
) -> None:
    """Write one JSON file pairing the privacy results with FER accuracy.

    ``fer`` may be a single report, a mapping of mode name (e.g.
    ``with_denoise`` / ``without_denoise``) to report, or ``None`` (the FER
    section is then written as an explicit ``null``).
    """
    privacy.validate()
    if isinstance(fer, FerReport):
        fer_section = {"default": fer.to_dict()}
    elif fer is None:
        fer_section = None
    else:
        fer_section = {k: (v.to_dict() if v is not None else None) for k, v in fer.items()}
    doc = {
        "meta": meta or {},
        "privacy": privacy.to_dict(),
        "baseline_blur": baseline.to_dict() if baseline is not None else None,
        "fer": fer_section,
    }
    if fer_section is not None:
        doc["tradeoff"] = {
            mode: {"fer_accuracy": sec["overall"] if sec else None, "p_pre": privacy.to_dict()["p_pre"]}
            for mode, sec in fer_section.items()
        }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_json(Path(path), doc)


def load_report(path: str | Path) -> dict:
    """Inverse of :func:`emit_report`: report objects rebuilt from the file."""
    doc = json.loads(Path(path).read_text())
    fer = doc["fer"]
    return {
        "meta": doc["meta"],
        "privacy": PrivacyReport.from_dict(doc["privacy"]),
        "baseline_blur": PrivacyReport.from_dict(doc["baseline_blur"]) if doc["baseline_blur"] else None,
        "fer": None if fer is None else {k: (FerReport.from_dict(v) if v else None) for k, v in fer.items()},
    }


# ---------------------------------------------------------------- driver


def _files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    return [path] if path.exists() else []


def check_dependencies(stage: str, ctx: Context) -> list[Path]:
    paths = []
    for name in _needs(stage, ctx.config):
        p = ctx.path(name)
        if not p.exists():
            raise DependencyError(stage, f"{name} ({ARTIFACTS[name]})", ARTIFACTS[name].split("/")[0])
        paths.append(p)
    return paths


def parse_stages(spec: str | list[str] | None) -> list[str]:
    """Stage names in graph order; ``None``/``"all"`` selects every stage."""
    if spec is None or spec == "all":
        return list(STAGES)
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise UsageError(f"unknown stage(s) {bad}; valid stages: {', '.join(STAGES)}")
    return [s for s in STAGES if s in names]


def run_stage(stage: str, ctx: Context) -> dict:
    inputs = check_dependencies(stage, ctx)
    out = ctx.root / stage
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    seed_everything(ctx.config.seed)
    STAGE_FUNCS[stage](ctx)
    seconds = time.perf_counter() - t0
    log.info("stage %s done in %.1fs", stage, seconds)
    cfg = ctx.config
    prov = {
        "stage": stage,
        "seconds": round(seconds, 3),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_text(),
        "inputs": {str(p.relative_to(ctx.root)): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {
            str(p.relative_to(ctx.root)): _sha256(p)
            for p in _files(out) if p.name != "provenance.json" and "crops" not in p.parts
        },
    }
    _write_json(out / "provenance.json", prov)
    return prov


def run_pipeline(config: PipelineConfig, stages=None) -> dict[str, dict]:
    """Run the selected stages in graph order; returns the provenance of each."""
    names = parse_stages(stages)
    torch.set_num_threads(max(1, config.torch_threads))
    ctx = Context(config)
    ctx.root.mkdir(parents=True, exist_ok=True)
    return {s: run_stage(s, ctx) for s in names}
