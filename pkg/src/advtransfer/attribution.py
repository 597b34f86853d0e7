"""Attack traceback: which attack produced this adversarial image?

Two attributors: a small CNN over the adversarial image (or the bare
perturbation), and an RBF SVM over the target model's top-N predicted
classes. Plus per-attack predicted-class frequency tables.
"""

from __future__ import annotations

import hashlib
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.multiclass import OneVsRestClassifier
from sklearn.svm import SVC

from .attacks import CATEGORY_OF
from .engine import AdversarialBatch
from .errors import AdvTransferError, ConfigError
from .models import ARCHITECTURES, ModelHandle


@dataclass
class TracebackDataset:
    adversarial: torch.Tensor
    clean: torch.Tensor
    attack: torch.Tensor  # attack index per sample
    attack_names: list[str]
    train_idx: torch.Tensor
    test_idx: torch.Tensor
    seed: int = 0

    def __len__(self):
        return len(self.attack)

    @property
    def categories(self) -> list[str]:
        return sorted({CATEGORY_OF.get(a, a) for a in self.attack_names})

    def category_ids(self) -> torch.Tensor:
        cats = self.categories
        lookup = [cats.index(CATEGORY_OF.get(a, a)) for a in self.attack_names]
        return torch.tensor(lookup)[self.attack]


def _split_order(seed, attack, n):
    keys = [hashlib.sha256(f"{seed}:{attack}:{i}".encode()).hexdigest() for i in range(n)]
    return sorted(range(n), key=keys.__getitem__)


def build_traceback_dataset(sources: dict, seed: int = 0, train_per_attack: int | None = None,
                            train_fraction: float = 0.8) -> TracebackDataset:
    """``sources`` maps attack name to an :class:`AdversarialBatch` or a zero-argument callable producing one.

    Each attack's samples are split by sorting on a seeded hash of the
    sample index, so the split is reproducible and disjoint.
    """
    if not sources:
        raise ConfigError("traceback needs at least one attack")
    adv, clean, lab, tr, te = [], [], [], [], []
    counts = set()
    offset = 0
    names = list(sources)
    for a, (name, src) in enumerate(sources.items()):
        if callable(src):
            try:
                src = src()
            except Exception as e:
                raise AdvTransferError(f"traceback dataset build aborted: attack {name} failed: {e}") from e
        if not isinstance(src, AdversarialBatch):
            raise ConfigError(f"source for {name} is not an AdversarialBatch")
        n = len(src.labels)
        counts.add(n)
        k = train_per_attack if train_per_attack is not None else int(round(train_fraction * n))
        if not 0 < k < n:
            raise ConfigError(f"{name}: need both train and test samples (n={n}, train={k})")
        order = _split_order(seed, name, n)
        tr += [offset + i for i in order[:k]]
        te += [offset + i for i in order[k:]]
        adv.append(src.adversarials)
        clean.append(src.originals)
        lab.append(torch.full((n,), a, dtype=torch.long))
        offset += n
    if len(counts) != 1:
        raise ConfigError(f"attacks contribute unequal sample counts {sorted(counts)}")
    return TracebackDataset(torch.cat(adv), torch.cat(clean), torch.cat(lab), names,
                            torch.tensor(sorted(tr)), torch.tensor(sorted(te)), seed)


# ----------------------------------------------------------------------------
# image-feature attributor


@dataclass
class TracebackReport:
    attack_names: list[str]
    confusion: np.ndarray
    accuracy: float
    category_accuracy: float
    per_attack_recall: dict = field(default_factory=dict)
    per_category_recall: dict = field(default_factory=dict)
    mode: str = "image"

    def confusion_rows(self) -> list[dict]:
        return [{"attack": a, **{b: int(v) for b, v in zip(self.attack_names, row)}}
                for a, row in zip(self.attack_names, self.confusion)]


def _inputs(ds: TracebackDataset, mode: str, idx, scale: float):
    if mode == "image":
        return ds.adversarial[idx]
    if mode == "perturbation":
        return (0.5 + (ds.adversarial[idx] - ds.clean[idx]) * scale).clamp(0, 1)
    raise ConfigError(f"unknown traceback input mode {mode!r}")


def _report(ds, pred, mode):
    y = ds.attack[ds.test_idx].numpy()
    n = len(ds.attack_names)
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    cat = ds.category_ids().numpy()
    lookup = np.array([cat[ds.attack.numpy() == a][0] for a in range(n)])
    cy, cp = lookup[y], lookup[pred]
    recall = {a: float(conf[i, i] / max(conf[i].sum(), 1)) for i, a in enumerate(ds.attack_names)}
    cats = ds.categories
    cat_recall = {c: float((cp[cy == j] == j).mean()) for j, c in enumerate(cats) if (cy == j).any()}
    return TracebackReport(list(ds.attack_names), conf, float((pred == y).mean()), float((cp == cy).mean()),
                           recall, cat_recall, mode)


def train_image_classifier(ds: TracebackDataset, mode: str = "image", epochs: int = 30, width: int = 16,
                           lr: float = 2e-3, batch_size: int = 64, seed: int = 0,
                           perturbation_scale: float = 4.0) -> tuple[ModelHandle | None, TracebackReport]:
    """Train a small residual CNN to name the attack behind each sample.

    Returns ``(classifier, report)``; category accuracy maps each predicted
    attack to its category.
    """
    n = len(ds.attack_names)
    if n == 1:
        pred = np.zeros(len(ds.test_idx), dtype=np.int64)
        return None, _report(ds, pred, mode)
    x = _inputs(ds, mode, ds.train_idx, perturbation_scale)
    y = ds.attack[ds.train_idx]
    torch.manual_seed(seed)
    net = ARCHITECTURES["resnet"](num_classes=n, width=width)
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=1e-4)
    steps = epochs * -(-len(x) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=steps)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        net.train()
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = order[i:i + batch_size]
            xb = x[idx]
            flip = torch.rand(len(idx), generator=gen) < 0.5
            xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(-1), xb)
            loss = F.cross_entropy(net(xb), y[idx])
            if not torch.isfinite(loss):
                raise AdvTransferError("traceback classifier training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    handle = ModelHandle(net, "resnet", {"num_classes": n, "width": width}, tag=f"traceback-{mode}")
    pred = handle.predict(_inputs(ds, mode, ds.test_idx, perturbation_scale)).numpy()
    return handle, _report(ds, pred, mode)


# ----------------------------------------------------------------------------
# misclassification-feature attributor


def top_n_features(logits: torch.Tensor, n: int, num_classes: int) -> np.ndarray:
    """Bag-of-classes encoding: sum of one-hot vectors of the top-``n`` predicted classes."""
    if n < 1:
        raise ConfigError("N must be >= 1")
    top = logits.topk(min(n, num_classes), dim=1).indices
    out = np.zeros((len(logits), num_classes))
    np.put_along_axis(out, top.numpy(), 1.0, axis=1)
    return out


def train_misclass_svm(ds: TracebackDataset, target: ModelHandle, n_values=(1, 3, 5, 10), C: float = 1.0,
                       gamma: float | None = None, class_weight: str | None = "balanced") -> list[dict]:
    """One-vs-rest RBF SVM on top-N class-ID features of ``target``; one row per N.

    Each binary problem is one attack against the other 23, so classes are
    reweighted by default.

    When the encoding carries no information (every sample identical) the
    row reports chance accuracy and a ``degenerate`` flag.
    """
    logits = target.logits(ds.adversarial)
    y = ds.attack.numpy()
    tr, te = ds.train_idx.numpy(), ds.test_idx.numpy()
    chance = 1.0 / len(ds.attack_names)
    rows = []
    for n in n_values:
        feats = top_n_features(logits, n, target.num_classes)
        degenerate = bool((feats == feats[0]).all())
        if degenerate or len(set(y[tr])) < 2:
            warnings.warn(f"top-{n} features are degenerate; reporting chance accuracy", RuntimeWarning)
            rows.append({"N": n, "accuracy": chance, "degenerate": True})
            continue
        svc = SVC(kernel="rbf", C=C, gamma=gamma if gamma is not None else 1.0 / feats.shape[1],
                  class_weight=class_weight)
        clf = OneVsRestClassifier(svc)
        clf.fit(feats[tr], y[tr])
        rows.append({"N": n, "accuracy": float((clf.predict(feats[te]) == y[te]).mean()), "degenerate": False})
    return rows


def class_frequency_distribution(predictions: dict, top: int = 5) -> dict:
    """Per attack: the ``top`` most predicted classes with frequencies, and the top-1 share."""
    out = {}
    for name, preds in predictions.items():
        preds = [int(p) for p in torch.as_tensor(preds).tolist()]
        if not preds:
            out[name] = {"top": [], "top1_share": 0.0}
            continue
        counts = sorted(Counter(preds).items(), key=lambda kv: (-kv[1], kv[0]))
        total = len(preds)
        out[name] = {"top": [{"class": c, "frequency": k / total} for c, k in counts[:top]],
                     "top1_share": counts[0][1] / total}
    return out
