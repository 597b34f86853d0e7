import pytest
import torch

from advtransfer.augment import (
    KINDS,
    DonorPool,
    TransformSpec,
    TransformedLoss,
    apply,
    augment,
    averaged_gradient,
    input_diversity,
    sample,
)
from advtransfer.data import ImageSet
from advtransfer.errors import ConfigError, EmptyDatasetError
from advtransfer.models import CrossEntropy, input_gradient


@pytest.fixture
def donors():
    g = torch.Generator().manual_seed(9)
    return DonorPool(torch.rand(20, 3, 32, 32, generator=g), torch.arange(20) % 10)


@pytest.mark.parametrize("kind", KINDS)
def test_shape_and_range(kind, images, donors):
    out = augment(TransformSpec(kind), images, torch.Generator().manual_seed(0), torch.arange(4), donors)
    assert out.shape == images.shape
    assert out.min() >= 0 and out.max() <= 1
    single = augment(TransformSpec(kind), images[0], torch.Generator().manual_seed(0), 0, donors)
    assert single.shape == images[0].shape


def test_di_with_zero_probability_is_identity(images):
    out = augment(TransformSpec("DI", di_prob=0.0), images, torch.Generator())
    assert torch.equal(out, images)


def test_di_params_within_range(images):
    params = sample(TransformSpec("DI", di_prob=1.0), images, torch.Generator().manual_seed(1))
    for p in params:
        assert 32 <= p["size"] <= 35 and p["canvas"] == 36
        assert 0 <= p["top"] <= 36 - p["size"] and 0 <= p["left"] <= 36 - p["size"]


def test_ti_shift_oracle():
    x = torch.arange(2 * 3 * 5 * 5, dtype=torch.float32).view(2, 3, 5, 5) / 150
    spec = TransformSpec("TI", ti_range=2)
    out = apply(spec, x, [{"dx": 1, "dy": -2}, {"dx": 0, "dy": 0}])
    expected = torch.zeros_like(x[0])
    expected[:, :3, 1:] = x[0, :, 2:, :4]
    assert torch.equal(out[0], expected)
    assert torch.equal(out[1], x[1])


def test_si_ladder_scales():
    x = torch.full((1, 3, 4, 4), 0.8)
    spec = TransformSpec("SI", si_ladder=True)
    for i in range(4):
        out = augment(spec, x, torch.Generator(), copy_index=i)
        assert torch.allclose(out, x / 2**i)


def test_vt_zero_range_has_zero_diversity(tiny_resnet, images):
    ds = ImageSet(images, torch.arange(4))
    assert input_diversity(TransformSpec("VT", vt_factor=0.0), tiny_resnet, ds) == 0.0
    assert input_diversity(TransformSpec("identity"), tiny_resnet, ds, repeats=3) == 0.0


def test_vt_noise_amplitude(images):
    spec = TransformSpec("VT", epsilon=8 / 255)
    p = sample(spec, images, torch.Generator().manual_seed(0))
    assert max(q["noise"].abs().max().item() for q in p) <= 1.5 * 8 / 255


def test_admix_contract(images, donors):
    spec = TransformSpec("Admix")
    with pytest.raises(ConfigError):
        augment(spec, images, torch.Generator(), torch.arange(4))
    with pytest.raises(ConfigError):
        augment(spec, images, torch.Generator(), None, donors)
    y = torch.arange(4)
    params = sample(spec, images, torch.Generator().manual_seed(0), y, donors)
    for i, p in enumerate(params):
        match = [(d == p["donor"]).all() for d in donors.images]
        assert int(donors.labels[match.index(True)]) != i
        assert torch.equal(apply(spec, images[i:i + 1], [p])[0], (images[i] + 0.2 * p["donor"]).clamp(0, 1))
    lonely = DonorPool(images[:2], torch.zeros(2, dtype=torch.long))
    with pytest.raises(ConfigError):
        lonely.draw(0, torch.Generator())


def test_two_copy_average_is_mean(tiny_resnet, images):
    spec = TransformSpec("TI", copies=2)
    y = torch.arange(4)
    avg = averaged_gradient(spec, tiny_resnet, images, y, torch.Generator().manual_seed(4))
    g = torch.Generator().manual_seed(4)
    draws = [sample(spec, images, g, y, None, j) for j in range(2)]
    grads = [input_gradient(tiny_resnet, images, TransformedLoss(spec, d, CrossEntropy(y))) for d in draws]
    assert torch.allclose(avg, (grads[0] + grads[1]) / 2, atol=1e-7)


def test_more_copies_reduce_gradient_variance(tiny_resnet, images):
    y = torch.arange(4)

    def spread(m):
        gs = torch.stack([averaged_gradient(TransformSpec("VT", copies=m), tiny_resnet, images, y,
                                            torch.Generator().manual_seed(s)) for s in range(8)])
        return gs.var(0).mean().item()

    assert spread(4) < spread(1)


def test_errors(tiny_resnet):
    with pytest.raises(ConfigError):
        TransformSpec("cutout")
    with pytest.raises(ConfigError):
        TransformSpec("DI", copies=0)
    empty = ImageSet(torch.zeros(0, 3, 32, 32), torch.zeros(0, dtype=torch.long))
    with pytest.raises(EmptyDatasetError):
        input_diversity(TransformSpec("DI"), tiny_resnet, empty)
    with pytest.raises(ConfigError):
        sample(TransformSpec("DI"), torch.zeros(2, 3, 8, 8), [torch.Generator()])


def test_transforms_are_differentiable(tiny_resnet, images):
    y = torch.arange(4)
    for kind in ("DI", "TI", "SI"):
        spec = TransformSpec(kind, di_prob=1.0)
        params = sample(spec, images, torch.Generator().manual_seed(0))
        g = input_gradient(tiny_resnet, images, TransformedLoss(spec, params, CrossEntropy(y)))
        assert g.abs().sum() > 0
