import numpy as np
import pytest

from helpers import manifest_from_tracks
from privfer.data_model import DatasetManifest
from privfer.errors import ContractError, DomainError
from privfer.models import UNet, seed_everything
from privfer.training import FitConfig
from privfer.validation.metrics import ssim
from privfer.validation.recovery import (
    RecoveryModel,
    aligned_pairs,
    check_alignment,
    recover,
    train_recovery,
)

SIZE = 16


def faces(n, seed=0):
    """Smooth random colour fields, so SSIM has structure to recover."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    out = []
    for _ in range(n):
        f = rng.uniform(1, 3, (3, 2))
        ph = rng.uniform(0, 6.3, (3, 2))
        img = np.stack([np.sin(f[c, 0] * 6 * xx + ph[c, 0]) * np.cos(f[c, 1] * 6 * yy + ph[c, 1])
                        for c in range(3)], -1)
        out.append(((img + 1) * 127.5).astype(np.uint8))
    return np.stack(out)


def test_identity_pairs_have_zero_loss():
    x = faces(6)
    seed_everything(0)
    hist = []
    train_recovery(x, x, UNet(SIZE, 8, residual=True), "pp", FitConfig(epochs=1, batch_size=6), hist)
    assert hist[0]["ssim_loss"] < 1e-9


def test_learns_colour_inversion():
    x = faces(64)
    seed_everything(0)
    model = train_recovery(x, 255 - x, UNet(SIZE, 8), "pp", FitConfig(epochs=150, learning_rate=3e-3, batch_size=16))
    test = faces(8, seed=1)
    out, tag = recover(model, 255 - test, "pp")
    assert tag == "pp_recovered"
    assert np.mean([ssim(o, t) for o, t in zip(out, test)]) > 0.9


def test_input_errors():
    net = UNet(SIZE, 8)
    with pytest.raises(DomainError):
        train_recovery(np.zeros((0, SIZE, SIZE, 3), np.uint8), np.zeros((0, SIZE, SIZE, 3), np.uint8),
                       net, "pp", FitConfig())
    with pytest.raises(DomainError):
        train_recovery(faces(2), faces(3), net, "pp", FitConfig())
    with pytest.raises(DomainError):
        RecoveryModel(net, "original")


def test_variant_tagging_and_contract():
    net = UNet(SIZE, 8, residual=True)
    pp_model, dpp_model = RecoveryModel(net, "pp"), RecoveryModel(net, "dpp")
    assert (pp_model.output_variant, dpp_model.output_variant) == ("pp_recovered", "dpp_recovered")
    x = faces(2)
    out, tag = recover(dpp_model, x, "dpp")
    assert tag == "dpp_recovered" and np.array_equal(out, x)
    with pytest.raises(ContractError):
        recover(pp_model, x, "dpp")


def test_aligned_pairs():
    org = manifest_from_tracks({"a": [3], "b": [2]})
    pp = DatasetManifest([r.derive("pp", "pp/" + r.crop_ref) for r in reversed(org.records)], "pp")
    pairs = aligned_pairs(org, pp)
    assert len(pairs) == 5
    check_alignment(pairs)
    assert all(t.face_key == s.face_key and s.variant == "pp" for t, s in pairs)
    with pytest.raises(DomainError):
        check_alignment([(pairs[0][0], pairs[1][1])])
    short = DatasetManifest(pp.records[1:], "pp")
    with pytest.raises(DomainError):
        aligned_pairs(org, short)
