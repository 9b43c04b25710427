"""Denoising anonymised faces against a frozen expression classifier, and
video FER training / evaluation on the resulting clips."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data_model import CropStore, DatasetManifest
from .errors import ContractError, DomainError
from .models import apply_image_model, is_frozen, to_tensor
from .training import FitConfig, check_labels, fit, fit_classifier, predict

DEFAULT_CLIP_LEN = 16


def train_denoiser(
    images: np.ndarray,
    labels,
    f_denoise: nn.Module,
    f_exp: nn.Module,
    config: FitConfig,
    history: list | None = None,
) -> nn.Module:
    """Update ``f_denoise`` so the frozen ``f_exp`` classifies its outputs correctly."""
    if not is_frozen(f_exp):
        raise ContractError("f_exp must be frozen before training the denoiser")
    y = torch.from_numpy(check_labels(labels, f_exp.n_classes))
    if len(y) != len(images) or len(y) == 0:
        raise DomainError("need one label per image and at least one image")
    x = to_tensor(images)
    f_exp.eval()
    f_denoise.train()
    ce = nn.CrossEntropyLoss()
    fit(f_denoise.parameters(), len(y), lambda idx: ce(f_exp(f_denoise(x[idx])), y[idx]),
        config, history, "ce")
    f_denoise.eval()
    return f_denoise


def denoise(f_denoise: nn.Module, images: np.ndarray) -> np.ndarray:
    return apply_image_model(f_denoise, images)


def frame_accuracy(f_exp: nn.Module, images: np.ndarray, labels) -> float:
    pred = predict(f_exp, to_tensor(images))
    return float(np.mean(pred == np.asarray(labels)))


def clip_indices(length: int, clip_len: int = DEFAULT_CLIP_LEN) -> np.ndarray:
    """Uniform temporal sampling of ``clip_len`` frame positions from ``length`` frames."""
    if length < 1 or clip_len < 1:
        raise DomainError("clip and track lengths must be positive")
    return np.round(np.linspace(0, length - 1, clip_len)).astype(int)


def clips_from_manifest(
    manifest: DatasetManifest, store: CropStore, classes: list[str], clip_len: int = DEFAULT_CLIP_LEN
) -> tuple[np.ndarray, np.ndarray, list[tuple[str, int]]]:
    """One clip per labelled track: ``(clips (N,T,H,W,3), labels, track keys)``."""
    clips, labels, keys = [], [], []
    for key, recs in sorted(manifest.tracks().items()):
        lab = recs[0].expression
        if lab is None:
            continue
        if lab not in classes:
            raise DomainError(f"track {key} has label {lab!r} outside {classes}")
        frames = store.load_many(recs[i].crop_ref for i in clip_indices(len(recs), clip_len))
        clips.append(frames)
        labels.append(classes.index(lab))
        keys.append(key)
    if not clips:
        return np.zeros((0, clip_len, 0, 0, 3), np.uint8), np.zeros(0, np.int64), keys
    return np.stack(clips), np.asarray(labels), keys


def clips_to_tensor(clips: np.ndarray) -> torch.Tensor:
    """uint8 (N,T,H,W,3) -> float (N,3,T,H,W)."""
    x = torch.from_numpy(np.asarray(clips).astype(np.float32) / 255.0)
    return x.permute(0, 4, 1, 2, 3).contiguous()


def train_fer(
    clips: np.ndarray,
    labels,
    f_fer: nn.Module,
    config: FitConfig,
    history: list | None = None,
    augmented: bool = True,
) -> nn.Module:
    if len(clips) == 0:
        raise DomainError("train_fer needs at least one clip")
    return fit_classifier(f_fer, clips_to_tensor(clips), labels, config, history, augmented)


@dataclass
class FerReport:
    classes: list[str]
    confusion: list[list[int]]
    per_class_accuracy: dict[str, float | None] = field(default_factory=dict)
    support: dict[str, int] = field(default_factory=dict)
    overall: float = 0.0

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: list[str]) -> "FerReport":
        """Confusion rows are true classes; classes without test samples get ``None`` (N/A)."""
        y_true = check_labels(y_true, len(classes))
        y_pred = check_labels(y_pred, len(classes))
        if len(y_true) != len(y_pred):
            raise DomainError("predictions and labels differ in length")
        if len(y_true) == 0:
            raise DomainError("cannot evaluate on an empty test set")
        cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
        np.add.at(cm, (y_true, y_pred), 1)
        support = cm.sum(1)
        per_class = {
            c: (float(cm[i, i] / support[i]) if support[i] else None) for i, c in enumerate(classes)
        }
        return cls(
            classes=list(classes),
            confusion=cm.tolist(),
            per_class_accuracy=per_class,
            support={c: int(s) for c, s in zip(classes, support)},
            overall=float(np.trace(cm) / cm.sum()),
        )

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "confusion": self.confusion,
            "per_class_accuracy": self.per_class_accuracy,
            "support": self.support,
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FerReport":
        return cls(d["classes"], d["confusion"], d["per_class_accuracy"], d["support"], d["overall"])

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.classes])
        for c, row in zip(self.classes, self.confusion):
            w.writerow([c, *row])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_fer(f_fer: nn.Module, clips: np.ndarray, labels, classes: list[str]) -> FerReport:
    if len(classes) != f_fer.n_classes:
        raise DomainError(f"model has {f_fer.n_classes} classes, label set has {len(classes)}")
    if len(clips) == 0:
        raise DomainError("evaluate_fer needs a non-empty test set")
    pred = predict(f_fer, clips_to_tensor(clips))
    return FerReport.from_predictions(labels, pred, classes)
