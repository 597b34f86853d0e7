import pytest
import torch
from PIL import Image

from advtransfer.data import ImageSet, ingest_dataset, make_shapes, quantize, save_image_dir
from advtransfer.errors import ConfigError, EmptyDatasetError, MissingLabelError
from advtransfer.models import ModelHandle


def test_shapes_are_balanced_quantized_and_seeded():
    a = make_shapes(50, seed=3)
    assert torch.bincount(a.labels).tolist() == [5] * 10
    assert torch.equal(quantize(a.images), a.images)
    assert a.digest() == make_shapes(50, seed=3).digest() != make_shapes(50, seed=4).digest()
    with pytest.raises(ConfigError):
        make_shapes(5, num_classes=11)


def test_imageset_validation_and_subsets():
    with pytest.raises(ConfigError):
        ImageSet(torch.zeros(3, 32, 32), torch.zeros(3))
    with pytest.raises(ConfigError):
        ImageSet(torch.zeros(2, 3, 4, 4), torch.zeros(3))
    ds = make_shapes(40, seed=1)
    sub = ds.per_class(2, seed=0)
    assert len(sub) == 20 and torch.bincount(sub.labels).tolist() == [2] * 10
    assert sub.names == ds.per_class(2, seed=0).names


def test_ingest_round_trip(tmp_path):
    ds = make_shapes(20, seed=2)
    save_image_dir(ds, tmp_path)
    back, report = ingest_dataset(tmp_path)
    assert torch.equal(back.images, ds.images) and torch.equal(back.labels, ds.labels)
    assert report == {"loaded": 20, "correct_by_all": 20, "selected": 20}


def test_ingest_resizes_and_filters(tmp_path):
    Image.new("RGB", (64, 48), (255, 0, 0)).save(tmp_path / "a.png")
    Image.new("RGB", (40, 40), (0, 0, 255)).save(tmp_path / "b.png")
    (tmp_path / "labels.csv").write_text("name,label\na.png,1\nb.png,2\n")
    ds, _ = ingest_dataset(tmp_path, size=32)
    assert ds.images.shape == (2, 3, 32, 32)
    model = ModelHandle.build("resnet", width=4)
    filtered, report = ingest_dataset(tmp_path, models=[model])
    assert report["correct_by_all"] == len(filtered) <= 2


def test_ingest_errors(tmp_path):
    with pytest.raises(EmptyDatasetError):
        ingest_dataset(tmp_path)
    Image.new("RGB", (32, 32)).save(tmp_path / "x.png")
    with pytest.raises(MissingLabelError):
        ingest_dataset(tmp_path)
