import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from privfer.errors import DomainError
from privfer.validation.metrics import (
    PSNR_IDENTICAL,
    SSIM_K1,
    gaussian_blur,
    gaussian_kernel,
    ied,
    psnr,
    ssim,
    ssim_torch,
)


def reference_ssim(a, b):
    return structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        data_range=255, channel_axis=-1,
    )


def random_pair(rng, shape=(32, 32, 3)):
    a = rng.integers(0, 256, shape, dtype=np.uint8)
    noise = rng.normal(0, rng.uniform(5, 80), shape)
    b = np.clip(a + noise, 0, 255).astype(np.uint8)
    return a, b


def test_ssim_identical_is_one():
    a = np.random.default_rng(0).integers(0, 256, (24, 24, 3), dtype=np.uint8)
    assert ssim(a, a) == 1.0


def test_ssim_matches_reference_on_50_pairs():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        a, b = random_pair(rng)
        worst = max(worst, abs(ssim(a, b) - reference_ssim(a, b)))
    assert worst < 1e-4


def test_ssim_constant_images_closed_form():
    # variances vanish, so SSIM reduces to the luminance term
    for mu_a, mu_b in [(10, 200), (100, 101), (0, 255)]:
        a = np.full((16, 16, 3), mu_a, np.uint8)
        b = np.full((16, 16, 3), mu_b, np.uint8)
        c1 = (SSIM_K1 * 255) ** 2
        expect = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
        assert abs(ssim(a, b) - expect) < 1e-9


def test_ssim_errors():
    with pytest.raises(DomainError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))
    with pytest.raises(DomainError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_torch_agrees_with_numpy():
    rng = np.random.default_rng(2)
    a, b = random_pair(rng)
    x = torch.from_numpy(a).permute(2, 0, 1)[None].double() / 255
    y = torch.from_numpy(b).permute(2, 0, 1)[None].double() / 255
    assert abs(ssim_torch(x, y).item() - ssim(a, b)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_symmetric_and_bounded(seed):
    a, b = random_pair(np.random.default_rng(seed), (16, 16, 3))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12 and s <= 1.0
    assert psnr(a, b) == psnr(b, a)


def test_psnr_examples():
    a = np.random.default_rng(3).integers(0, 200, (16, 16, 3), dtype=np.uint8)
    assert psnr(a, a) == PSNR_IDENTICAL == math.inf
    assert abs(psnr(a, a + np.uint8(16)) - 24.0483) < 1e-3
    assert abs(psnr(a, a + np.uint8(16)) - 10 * math.log10(255**2 / 256)) < 1e-12
    # MSE equal to peak^2 gives 0 dB
    assert psnr(np.zeros(4), np.full(4, 255.0)) == 0.0
    with pytest.raises(DomainError):
        psnr(np.zeros(3), np.zeros(4))


def test_ied_examples():
    assert ied([0.2, 0.3], [0.2, 0.3]) == 0.0
    assert ied(np.zeros(4), np.ones(4)) == 2.0
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = rng.normal(size=16), rng.normal(size=16)
        brute = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        assert abs(ied(a, b) - brute) < 1e-9 and ied(a, b) == ied(b, a)
    with pytest.raises(DomainError):
        ied(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("sigma", [0.4, 0.5, 0.6])
def test_kernel_normalised(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1.0) < 1e-9
    assert np.allclose(k, k.T) and k.argmax() == k.size // 2


def test_kernel_shape_follows_formula():
    sigma = 0.5
    k = gaussian_kernel(sigma, radius=2)
    x, y = 1, 2
    raw = math.exp(-(x * x + y * y) / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    centre = 1 / (2 * math.pi * sigma**2)
    assert abs(k[2 + y, 2 + x] / k[2, 2] - raw / centre) < 1e-12


def test_blur_examples():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    assert np.abs(gaussian_blur(img, 0.01).astype(int) - img).max() <= 1
    const = np.full((20, 20, 3), 77, np.uint8)
    assert np.array_equal(gaussian_blur(const, 0.5), const)
    batch = np.stack([img, const])
    out = gaussian_blur(batch, 0.6)
    assert out.shape == batch.shape and np.array_equal(out[0], gaussian_blur(img, 0.6))
    for bad in (0.0, -1.0):
        with pytest.raises(DomainError):
            gaussian_blur(img, bad)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, (12, 12, 3)), st.floats(0.2, 2.0))
def test_blur_shape_preserving(img, sigma):
    out = gaussian_blur(img, sigma)
    assert out.shape == img.shape and out.dtype == np.uint8
    assert out.min() >= img.min() and out.max() <= img.max()
