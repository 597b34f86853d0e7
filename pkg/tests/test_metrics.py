import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.color import deltaE_ciede2000, rgb2lab
from skimage.metrics import structural_similarity

from advtransfer.errors import ConfigError, EmptyDatasetError, UnknownTapError
from advtransfer.metrics import (
    MetricReport,
    average_drop,
    average_increase,
    ciede2000,
    delta_e2000,
    fid_from_features,
    gradcam,
    kl_divergence,
    lpips,
    model_kl,
    psnr,
    spearman,
    srgb_to_lab,
    ssim,
    success_rate,
)
from advtransfer.models import ModelHandle
from conftest import toy_conv_net

# Published CIEDE2000 verification pairs: (L1, a1, b1), (L2, a2, b2), dE00
SHARMA = [
    ((50.0000, 2.6772, -79.7751), (50.0000, 0.0000, -82.7485), 2.0425),
    ((50.0000, 3.1571, -77.2803), (50.0000, 0.0000, -82.7485), 2.8615),
    ((50.0000, 2.8361, -74.0200), (50.0000, 0.0000, -82.7485), 3.4412),
    ((50.0000, -1.3802, -84.2814), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, -1.1848, -84.8006), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, -0.9009, -85.5211), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, 0.0000, 0.0000), (50.0000, -1.0000, 2.0000), 2.3669),
    ((50.0000, -1.0000, 2.0000), (50.0000, 0.0000, 0.0000), 2.3669),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0009), 7.1792),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0010), 7.1792),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0011), 7.2195),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0012), 7.2195),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0009, -2.4900), 4.8045),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0010, -2.4900), 4.8045),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0011, -2.4900), 4.7461),
    ((50.0000, 2.5000, 0.0000), (50.0000, 0.0000, -2.5000), 4.3065),
    ((50.0000, 2.5000, 0.0000), (73.0000, 25.0000, -18.0000), 27.1492),
    ((50.0000, 2.5000, 0.0000), (61.0000, -5.0000, 29.0000), 22.8977),
    ((50.0000, 2.5000, 0.0000), (56.0000, -27.0000, -3.0000), 31.9030),
    ((50.0000, 2.5000, 0.0000), (58.0000, 24.0000, 15.0000), 19.4535),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.1736, 0.5854), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.2972, 0.0000), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 1.8634, 0.5757), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.2592, 0.3350), 1.0000),
    ((60.2574, -34.0099, 36.2677), (60.4626, -34.1751, 39.4387), 1.2644),
    ((63.0109, -31.0961, -5.8663), (62.8187, -29.7946, -4.0864), 1.2630),
    ((61.2901, 3.7196, -5.3901), (61.4292, 2.2480, -4.9620), 1.8731),
    ((35.0831, -44.1164, 3.7933), (35.0232, -40.0716, 1.5901), 1.8645),
    ((22.7233, 20.0904, -46.6940), (23.0331, 14.9730, -42.5619), 2.0373),
    ((36.4612, 47.8580, 18.3852), (36.2715, 50.5065, 21.2231), 1.4146),
    ((90.8027, -2.0831, 1.4410), (91.1528, -1.6435, 0.0447), 1.4441),
    ((90.9257, -0.5406, -0.9208), (88.6381, -0.8985, -0.7239), 1.5381),
    ((6.7747, -0.2908, -2.4247), (5.8714, -0.0985, -2.2286), 0.6377),
    ((2.0776, 0.0795, -1.1350), (0.9033, -0.0636, -0.5514), 0.9082),
]


# -- success rate ---------------------------------------------------------------

def test_success_rate_counts_mismatches():
    y = torch.tensor([0, 1, 2, 3, 4])
    assert success_rate(y, y) == 0.0
    assert success_rate(y + 1, y) == 1.0
    assert success_rate(torch.tensor([1, 2, 3, 3, 4]), y) == pytest.approx(0.6)


def test_success_rate_rejects_empty():
    with pytest.raises(EmptyDatasetError):
        success_rate(torch.tensor([]), torch.tensor([]))


# -- PSNR / SSIM -----------------------------------------------------------------

def test_psnr_uniform_offset_is_20db():
    x = torch.full((2, 3, 8, 8), 0.25, dtype=torch.float64)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-6)


def test_psnr_identical_is_infinite_and_serialized_as_null():
    x = torch.rand(2, 3, 8, 8)
    assert math.isinf(psnr(x, x))
    row = MetricReport("PGD", psnr=psnr(x, x)).to_row()
    assert row["psnr"] is None and row["psnr_infinite"] is True


def test_ssim_identity_and_skimage_agreement(images):
    assert ssim(images, images) == pytest.approx(1.0, abs=1e-12)
    other = (images + 0.05 * torch.randn(images.shape, generator=torch.Generator().manual_seed(1))).clamp(0, 1)
    ours = ssim(images[:1], other[:1])
    ref = structural_similarity(images[0].permute(1, 2, 0).double().numpy(), other[0].permute(1, 2, 0).double().numpy(),
                                channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_psnr_ssim_delta_e_symmetric(images):
    other = images.flip(0)
    assert psnr(images, other) == pytest.approx(psnr(other, images), abs=1e-12)
    assert ssim(images, other) == pytest.approx(ssim(other, images), abs=1e-12)
    assert delta_e2000(images, other) == pytest.approx(delta_e2000(other, images), abs=1e-9)


# -- colour ------------------------------------------------------------------------

@pytest.mark.parametrize("lab1,lab2,expected", SHARMA)
def test_ciede2000_published_pairs(lab1, lab2, expected):
    ours = float(ciede2000(np.array(lab1), np.array(lab2)))
    oracle = float(deltaE_ciede2000(np.array(lab1), np.array(lab2)))
    assert ours == pytest.approx(oracle, abs=1e-4)
    assert ours == pytest.approx(expected, abs=1e-4)


def test_srgb_to_lab_close_to_skimage():
    rgb = np.random.default_rng(0).random((16, 16, 3))
    assert np.abs(srgb_to_lab(rgb) - rgb2lab(rgb)).max() < 1e-3


def test_delta_e_zero_and_channel_check(images):
    assert delta_e2000(images, images) == 0.0
    with pytest.raises(ConfigError):
        delta_e2000(images[:, :1], images[:, :1])


def test_delta_e_image_level_is_rms_of_pixel_differences():
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    y = (x + 0.05).clamp(0, 1)
    lab1 = rgb2lab(x[0].permute(1, 2, 0).numpy())
    lab2 = rgb2lab(y[0].permute(1, 2, 0).numpy())
    per_pixel = deltaE_ciede2000(lab1, lab2)
    assert delta_e2000(x, y) == pytest.approx(np.sqrt((per_pixel**2).mean()), rel=1e-3)


# -- LPIPS -----------------------------------------------------------------------------

def test_lpips_hand_computation_on_toy_net():
    w = torch.tensor([[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]])
    model = toy_conv_net(w, torch.eye(2))
    g = torch.Generator().manual_seed(3)
    x, y = torch.rand(1, 3, 4, 4, generator=g), torch.rand(1, 3, 4, 4, generator=g)
    fx = torch.einsum("kc,bchw->bkhw", w, x).double()
    fy = torch.einsum("kc,bchw->bkhw", w, y).double()
    expected = 0.0
    for i in range(4):
        for j in range(4):
            a, b = fx[0, :, i, j], fy[0, :, i, j]
            expected += 1 - float(a @ b / (a.norm() * b.norm()))
    assert lpips(x, y, model, ["conv1_x"]) == pytest.approx(expected / 16, abs=1e-6)
    assert lpips(x, x, model, ["conv1_x"]) == pytest.approx(0.0, abs=1e-12)


def test_lpips_unknown_layer(tiny_resnet, images):
    with pytest.raises(UnknownTapError):
        lpips(images, images, tiny_resnet, ["pool9"])


def test_lpips_monotone_in_perturbation_scale(tiny_resnet):
    g = torch.Generator().manual_seed(0)
    hits = 0
    for _ in range(20):
        x = torch.rand(1, 3, 32, 32, generator=g) * 0.6 + 0.2
        d = (torch.rand(1, 3, 32, 32, generator=g) * 2 - 1) * 0.05
        hits += lpips(x, x + 2 * d, tiny_resnet) >= lpips(x, x + d, tiny_resnet)
    assert hits >= 18


# -- FID -------------------------------------------------------------------------------

def test_fid_identical_sets_is_zero():
    f = np.random.default_rng(0).normal(size=(200, 8))
    value, _ = fid_from_features(f, f)
    assert value <= 1e-6


def test_fid_gaussian_closed_form():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, (10000, 1)), rng.normal(1, 1, (10000, 1))
    value, reg = fid_from_features(a, b)
    assert value == pytest.approx(1.0, abs=0.1) and not reg


def test_fid_permutation_invariant_and_flags_singular():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 4)), rng.normal(size=(60, 4)) + 0.5
    v1, _ = fid_from_features(a, b)
    v2, _ = fid_from_features(a[::-1], b[rng.permutation(60)])
    assert v1 == pytest.approx(v2, abs=1e-9)
    _, reg = fid_from_features(rng.normal(size=(3, 10)), rng.normal(size=(3, 10)))
    assert reg
    with pytest.raises(ConfigError):
        fid_from_features(a[:1], b)


# -- KL ---------------------------------------------------------------------------------

def test_kl_hand_value():
    p, q = torch.tensor([0.7, 0.2, 0.1]), torch.tensor([0.1, 0.2, 0.7])
    assert kl_divergence(p, q).item() == pytest.approx(0.7 * math.log(7) + 0.1 * math.log(1 / 7), abs=1e-6)


def test_model_kl_self_zero_and_nonnegative(images):
    models = [ModelHandle.build("resnet", seed=s, width=4) for s in range(3)]
    assert model_kl(models[0], models[0], images) == 0.0
    for a in models:
        for b in models:
            assert model_kl(a, b, images) >= 0
            assert model_kl(a, b, images, single_class=True, labels=torch.zeros(4, dtype=torch.long)) >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=3, max_size=3), st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
def test_kl_nonnegative_property(p, q):
    p, q = torch.tensor(p) / sum(p), torch.tensor(q) / sum(q)
    assert kl_divergence(p, q).item() >= -1e-12


# -- GradCAM / AI / AD --------------------------------------------------------------------

def test_gradcam_hand_computation_two_channels():
    w = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    head = torch.tensor([[2.0, -1.0], [0.5, 0.5]])
    model = toy_conv_net(w, head)
    x = torch.rand(1, 3, 6, 6, generator=torch.Generator().manual_seed(2))
    cam = gradcam(model, x, 0)
    weights = head[0] / 36
    raw = torch.relu(weights[0] * x[0, 0] + weights[1] * x[0, 1])
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    assert torch.allclose(cam[0], expected, atol=1e-5)


def test_gradcam_range_and_uniform_maps(images):
    model = ModelHandle.build("resnet", seed=0, width=4)
    cam = gradcam(model, images, torch.zeros(4, dtype=torch.long))
    assert cam.shape == (4, 32, 32) and cam.min() >= 0 and cam.max() <= 1
    toy = toy_conv_net(torch.tensor([[1.0, 1.0, 1.0], [0.5, 0.5, 0.5]]), torch.tensor([[1.0, 1.0]]))
    flat = torch.full((1, 3, 8, 8), 0.4)
    assert torch.equal(gradcam(toy, flat, 0), torch.ones(1, 8, 8))


def test_ai_ad_formulas():
    p = torch.tensor([0.8, 0.6, 0.5])
    assert average_increase(p, p) == 0.0 and average_drop(p, p) == 0.0
    assert average_drop(p, p / 2) == pytest.approx(50.0)
    assert average_increase(p, p / 2) == 0.0
    assert average_increase(p, torch.tensor([0.9, 0.1, 0.6])) == pytest.approx(200 / 3)
    with pytest.raises(EmptyDatasetError):
        average_increase(torch.tensor([]), torch.tensor([]))


def test_spearman_range():
    r = spearman([0.1, 0.5, 0.3, 0.9], [30.0, 20.0, 25.0, 10.0])
    assert -1 <= r <= 1 and r == pytest.approx(-1.0)
