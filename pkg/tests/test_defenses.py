import pytest
import torch

from advtransfer.engine import AdversarialBatch
from advtransfer.errors import CheckpointError, ConfigError
from advtransfer.defenses import (
    DefenseSpec,
    PurifierRecipe,
    apply_defense,
    bdr,
    defend_then_classify,
    deflect,
    haar_soft_denoise,
    linear_schedule,
    load_purifier,
    pixel_deflection,
    resize_pad,
    save_purifier,
    train_purifier,
)


def test_bdr_levels_and_idempotence(images):
    for d in (1, 2, 3, 5):
        once = bdr(images, d)
        assert torch.equal(bdr(once, d), once)
        assert len(torch.unique(once)) <= 2**d
    assert torch.allclose(bdr(images, 8), images, atol=1e-7)
    with pytest.raises(ConfigError):
        bdr(images, 0)


def test_haar_round_trip_without_threshold(images):
    assert torch.equal(haar_soft_denoise(images, 0.0), images)
    assert torch.allclose(haar_soft_denoise(images, 1e-9), images, atol=1e-6)
    odd = images[:, :, :31, :31]
    assert haar_soft_denoise(odd, 0.05).shape == odd.shape


def test_haar_removes_checkerboard():
    x = torch.full((1, 1, 8, 8), 0.5)
    x[..., ::2, ::2] += 0.01
    smooth = haar_soft_denoise(x, 0.05)
    assert smooth.std() < x.std() / 10


def test_deflection_edits_at_most_count_pixels(images):
    for count in (0, 1, 10, 64):
        out = deflect(images[0], count, 5, torch.Generator().manual_seed(count))
        changed = (out != images[0]).any(0).sum().item()
        assert changed <= count
    with pytest.raises(ConfigError):
        deflect(images[0], 3, 4, torch.Generator())
    with pytest.raises(ConfigError):
        deflect(images[0], -1, 5, torch.Generator())


def test_deflection_respects_saliency(images):
    sal = torch.zeros(32, 32)
    sal[:, :16] = 1.0
    out = deflect(images[0], 200, 3, torch.Generator().manual_seed(0), sal)
    changed = (out != images[0]).any(0)
    assert changed[:, 16:].sum() > 5 * changed[:, :16].sum()


def test_pixel_deflection_seeded(images):
    a = pixel_deflection(images, 64, seed=1)
    b = pixel_deflection(images, 64, seed=1)
    assert torch.equal(a, b) and a.shape == images.shape
    assert pixel_deflection(images[0], 8).shape == images[0].shape


def test_resize_pad_degenerate_range_is_identity(images):
    out = resize_pad(images, (1.0, 1.0), centered=True)
    assert (out - images).abs().max() <= 1e-6
    rnd = resize_pad(images, (1.0, 1.0), seed=3)
    assert (rnd - images).abs().max() <= 1e-6


def test_resize_pad_shapes(images):
    assert resize_pad(images, (1.0, 1.1), seed=0).shape == images.shape
    assert resize_pad(images, (1.0, 1.1), out_size=40).shape == (4, 3, 40, 40)


def test_passthrough_and_spec_validation(tiny_resnet, images):
    none = DefenseSpec("none")
    assert torch.equal(apply_defense(none, images), images)
    batch = AdversarialBatch(images, images, torch.arange(4), "PGD", 0.0)
    assert torch.equal(defend_then_classify(none, batch, tiny_resnet), tiny_resnet.predict(images))
    with pytest.raises(ConfigError):
        DefenseSpec("PD")
    with pytest.raises(ConfigError):
        DefenseSpec("purifier")
    with pytest.raises(ConfigError):
        DefenseSpec("robust_model")
    with pytest.raises(ConfigError):
        DefenseSpec("JPEG")


def test_robust_model_defense_uses_that_model(tiny_resnet, images):
    other = type(tiny_resnet).build("plain", seed=3, width=4)
    spec = DefenseSpec("robust_model", robust_model=other)
    assert torch.equal(defend_then_classify(spec, images, tiny_resnet), other.predict(images))


def test_saliency_pd_through_contract(tiny_resnet, images):
    spec = DefenseSpec("PD", pd_count=16)
    out = apply_defense(spec, images, tiny_resnet)
    assert out.shape == images.shape and out.min() >= 0 and out.max() <= 1


def test_linear_schedule_monotone():
    ab = linear_schedule(200)
    assert len(ab) == 200 and (ab[1:] < ab[:-1]).all() and 0 < ab[-1] < ab[0] < 1


@pytest.mark.parametrize("style", ["HGD", "NRP", "DiffPure"])
def test_purifier_train_save_load(style, tmp_path, tiny_resnet, images):
    adv = (images + 0.03).clamp(0, 1)
    recipe = PurifierRecipe(style, epochs=1, width=4, depth=2, batch_size=2)
    p = train_purifier(recipe, images, None if style == "DiffPure" else adv, tiny_resnet)
    back = load_purifier(save_purifier(p, tmp_path / style))
    assert torch.equal(back(adv, seed=1), p(adv, seed=1))
    assert p(adv).shape == images.shape
    assert torch.equal(p(adv, seed=2), p(adv, seed=2))


def test_purifier_errors(tmp_path, tiny_resnet, images):
    with pytest.raises(ConfigError):
        PurifierRecipe("BM3D")
    with pytest.raises(ConfigError):
        train_purifier(PurifierRecipe("NRP", epochs=1), images, None, tiny_resnet)
    with pytest.raises(ConfigError):
        train_purifier(PurifierRecipe("HGD", epochs=1), images, images)
    with pytest.raises(CheckpointError):
        load_purifier(tmp_path / "nothing")


@pytest.mark.slow
@pytest.mark.parametrize("style", ["HGD", "NRP"])
def test_purifier_pool_is_perturbed(ref, style):
    from dataclasses import replace

    from advtransfer.reference import ReferenceSetup

    small = ReferenceSetup(ref.cache_dir, replace(ref.cfg, purifier_pool=32))
    clean, adv = small._purifier_pool(style)
    linf = (adv - clean).abs().flatten(1).amax(1)
    assert (linf > 0).all() and linf.max() <= 16 / 255 + 1 / 510
