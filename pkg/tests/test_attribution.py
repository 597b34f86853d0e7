import numpy as np
import pytest
import torch

from advtransfer.attribution import (
    build_traceback_dataset,
    class_frequency_distribution,
    top_n_features,
    train_image_classifier,
    train_misclass_svm,
)
from advtransfer.engine import AdversarialBatch
from advtransfer.errors import AdvTransferError, ConfigError


def _batch(name, n=10, shift=0.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, 32, 32, generator=g)
    return AdversarialBatch(x, (x + shift).clamp(0, 1), torch.arange(n) % 10, name, 16 / 255)


def test_split_is_disjoint_and_seeded():
    src = {"PGD": _batch("PGD"), "MI": _batch("MI", seed=1)}
    a = build_traceback_dataset(src, seed=3)
    b = build_traceback_dataset(src, seed=3)
    c = build_traceback_dataset(src, seed=4)
    assert torch.equal(a.train_idx, b.train_idx)
    assert not torch.equal(a.train_idx, c.train_idx)
    assert set(a.train_idx.tolist()).isdisjoint(a.test_idx.tolist())
    assert len(a.train_idx) == 16 and len(a.test_idx) == 4
    assert a.categories == ["baseline", "stabilization"]


def test_dataset_errors():
    with pytest.raises(ConfigError):
        build_traceback_dataset({})
    with pytest.raises(ConfigError):
        build_traceback_dataset({"PGD": _batch("PGD", 10), "MI": _batch("MI", 8)})
    with pytest.raises(ConfigError):
        build_traceback_dataset({"PGD": _batch("PGD")}, train_per_attack=10)

    def boom():
        raise RuntimeError("no generator")

    with pytest.raises(AdvTransferError, match="GAP"):
        build_traceback_dataset({"PGD": _batch("PGD"), "GAP": boom})


def test_single_attack_is_perfect():
    ds = build_traceback_dataset({"PGD": _batch("PGD")})
    model, rep = train_image_classifier(ds)
    assert model is None and rep.accuracy == 1.0 and rep.category_accuracy == 1.0


def test_separable_attacks_are_learned():
    src = {"PGD": _batch("PGD", 40, 0.0), "DI": _batch("DI", 40, 0.5, seed=1)}
    ds = build_traceback_dataset(src, seed=0)
    _, rep = train_image_classifier(ds, epochs=8, width=4, batch_size=16)
    assert rep.accuracy >= 0.9
    assert rep.confusion.sum() == len(ds.test_idx)
    rows = rep.confusion_rows()
    assert [r["attack"] for r in rows] == ["PGD", "DI"]
    _, prep = train_image_classifier(ds, mode="perturbation", epochs=2, width=4)
    assert prep.mode == "perturbation"
    with pytest.raises(ConfigError):
        train_image_classifier(ds, mode="histogram", epochs=1)


def test_top_n_encoding():
    logits = torch.tensor([[0.1, 3.0, 2.0, -1.0]])
    assert top_n_features(logits, 1, 4).tolist() == [[0, 1, 0, 0]]
    assert top_n_features(logits, 2, 4).tolist() == [[0, 1, 1, 0]]
    assert top_n_features(logits, 9, 4).tolist() == [[1, 1, 1, 1]]
    with pytest.raises(ConfigError):
        top_n_features(logits, 0, 4)


def test_svm_rows_and_degenerate_case(tiny_resnet):
    src = {"PGD": _batch("PGD", 20), "MI": _batch("MI", 20, 0.4, seed=1)}
    ds = build_traceback_dataset(src)
    with pytest.warns(RuntimeWarning):
        rows = train_misclass_svm(ds, tiny_resnet, (1, 10))
    assert [r["N"] for r in rows] == [1, 10]
    assert rows[1]["degenerate"] and rows[1]["accuracy"] == 0.5
    assert 0 <= rows[0]["accuracy"] <= 1


def test_class_frequency():
    out = class_frequency_distribution({"PGD": [3, 3, 1, 2, 3], "MI": []}, top=2)
    assert out["PGD"]["top"] == [{"class": 3, "frequency": 0.6}, {"class": 1, "frequency": 0.2}]
    assert out["PGD"]["top1_share"] == 0.6
    assert out["MI"]["top1_share"] == 0.0
    assert np.isclose(sum(e["frequency"] for e in class_frequency_distribution({"a": [1, 2]})["a"]["top"]), 1)
