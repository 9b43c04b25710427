"""Networks used by the pipeline and helpers for freezing and checksumming them.

All image tensors are float NCHW in [0, 1]; public numpy APIs use uint8 NHWC.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N,H,W,3) -> float32 (N,3,H,W) in [0, 1]."""
    arr = np.asarray(images)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """float (N,3,H,W) in [0, 1] -> uint8 (N,H,W,3)."""
    arr = x.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).contiguous().numpy()


def checksum(module: nn.Module) -> str:
    """SHA-256 over every tensor in the state dict, in sorted key order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
    )


class UNet(nn.Module):
    """Small encoder-decoder with skip connections, image in -> image out.

    With ``residual=True`` the output is ``clamp(x + head(...))`` and the
    head starts at zero, so a fresh model is the identity map.
    """

    def __init__(self, resolution: int, width: int = 16, depth: int = 2, residual: bool = False):
        super().__init__()
        if resolution % (2**depth):
            raise ValueError(f"resolution {resolution} not divisible by 2**{depth}")
        self.resolution = resolution
        self.residual = residual
        self.config = {"resolution": resolution, "width": width, "depth": depth, "residual": residual}
        chans = [width * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = 3
        for c in chans[:-1]:
            self.down.append(_block(cin, c))
            cin = c
        self.bottom = _block(chans[-2], chans[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1))
            self.dec.append(_block(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(width, 3, 1)
        if residual:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for blk in self.down:
            h = blk(h)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.bottom(h)
        for up, dec in zip(self.up, self.dec):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = dec(torch.cat([h, skips.pop()], dim=1))
        out = self.head(h)
        if self.residual:
            return (x + out).clamp(0.0, 1.0)
        return torch.sigmoid(out)


class FisherEmbedder(nn.Module):
    """Toy identity embedder: pooled colour layout projected onto whitened
    Fisher-discriminant directions, then L2-normalised.

    Stands in for a pretrained face-recognition network; :meth:`fit` is its
    "pretraining" on identity-labelled faces from a disjoint population.
    """

    def __init__(self, dim: int = 32, grid: int = 8):
        super().__init__()
        self.dim = dim
        self.grid = grid
        n_feat = 3 * grid * grid
        self.config = {"dim": dim, "grid": grid}
        self.projection = nn.Parameter(torch.zeros(n_feat, dim))
        self.register_buffer("mean", torch.zeros(n_feat))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(x, self.grid).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = (self.features(x) - self.mean) @ self.projection
        return F.normalize(z, dim=1, eps=1e-12)

    @torch.no_grad()
    def fit(self, images: np.ndarray, identities: np.ndarray, reg: float = 1e-4) -> "FisherEmbedder":
        X = self.features(to_tensor(images)).double().numpy()
        ids = np.asarray(identities)
        mu = X.mean(0)
        d = X.shape[1]
        sw = np.zeros((d, d))
        sb = np.zeros((d, d))
        for k in np.unique(ids):
            xk = X[ids == k]
            mk = xk.mean(0)
            r = xk - mk
            sw += r.T @ r
            sb += len(xk) * np.outer(mk - mu, mk - mu)
        sw /= len(X)
        sb /= len(X)
        sw += reg * np.trace(sw) / d * np.eye(d)
        evals, evecs = scipy.linalg.eigh(sb, sw)
        order = np.argsort(evals)[::-1][: self.dim]
        # equalise between-identity spread so cosine is not dominated by a few axes
        w = evecs[:, order] / np.sqrt(evals[order] + 1.0)[None, :]
        self.projection.copy_(torch.from_numpy(w).float())
        self.mean.copy_(torch.from_numpy(mu).float())
        return self


class FrameExpressionNet(nn.Module):
    """Per-image expression classifier (the frozen scorer behind the denoiser)."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.n_classes = n_classes
        self.config = {"n_classes": n_classes, "width": width}
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.fc = nn.Linear(2 * width * 16, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(x).flatten(1))


class VideoExpressionNet(nn.Module):
    """Small (2+1)-D convolutional clip classifier; input (N, 3, T, H, W).

    Each stage is a spatial 1x3x3 conv followed by a temporal 3x1x1 conv,
    both batch-normalised (training on a few dozen clips is unstable without).
    """

    def __init__(self, n_classes: int, width: int = 12):
        super().__init__()
        self.n_classes = n_classes
        self.config = {"n_classes": n_classes, "width": width}

        def stage(cin, cout):
            return nn.Sequential(
                nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1)), nn.BatchNorm3d(cout), nn.ReLU(),
                nn.Conv3d(cout, cout, (3, 1, 1), padding=(1, 0, 0)), nn.BatchNorm3d(cout), nn.ReLU(),
            )

        self.body = nn.Sequential(
            stage(3, width), nn.MaxPool3d((1, 2, 2)),
            stage(width, 2 * width), nn.MaxPool3d((1, 2, 2)),
            stage(2 * width, 2 * width),
            nn.AdaptiveAvgPool3d((1, 4, 4)),
        )
        self.fc = nn.Linear(2 * width * 16, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(x).flatten(1))


MODEL_TYPES = {
    "UNet": UNet,
    "FisherEmbedder": FisherEmbedder,
    "FrameExpressionNet": FrameExpressionNet,
    "VideoExpressionNet": VideoExpressionNet,
}


def save_checkpoint(module: nn.Module, path: str | Path, **extra) -> None:
    """Write ``{type, config, state, extra}`` with ``torch.save``."""
    payload = {
        "type": type(module).__name__,
        "config": dict(module.config),
        "state": {k: v.detach().cpu() for k, v in module.state_dict().items()},
        "extra": extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cls = MODEL_TYPES[payload["type"]]
    module = cls(**payload["config"])
    module.load_state_dict(payload["state"])
    return module, payload["extra"]


@torch.no_grad()
def embed_images(embedder: nn.Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Identity embeddings (N, D) as float64 for uint8 NHWC images."""
    if len(images) == 0:
        return np.zeros((0, embedder.dim))
    out = [embedder(to_tensor(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    z = torch.cat(out).double().numpy()
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@torch.no_grad()
def apply_image_model(model: nn.Module, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Run an image-to-image network over uint8 NHWC images at its native resolution."""
    from .errors import DomainError

    images = np.asarray(images)
    res = getattr(model, "resolution", None)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DomainError(f"expected (N,H,W,3) images, got shape {images.shape}")
    if len(images) == 0:
        return images.astype(np.uint8).copy()
    if res is not None and images.shape[1:3] != (res, res):
        raise DomainError(f"model resolution is {res}x{res}, got {images.shape[1]}x{images.shape[2]}")
    was_training = model.training
    model.eval()
    out = [to_uint8(model(to_tensor(images[i : i + batch_size]))) for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return np.concatenate(out)
