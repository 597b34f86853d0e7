"""Label-preserving input transformations and multi-copy gradient averaging.

A transformation is split into ``sample`` (draw per-image parameters from the
per-image RNG streams) and ``apply`` (a differentiable function of the image
given those parameters). Gradients flow through ``apply``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, EmptyDatasetError
from .models import CrossEntropy, LossSpec, ModelHandle, input_gradient

KINDS = ("identity", "DI", "TI", "SI", "VT", "Admix")


@dataclass
class TransformSpec:
    kind: str = "identity"
    di_range: tuple[float, float] = (1.0, 1.1)
    di_prob: float = 0.7
    ti_range: int = 2
    si_range: tuple[float, float] = (0.1, 1.0)
    si_ladder: bool = False
    vt_factor: float = 1.5
    epsilon: float = 16 / 255
    admix_eta: float = 0.2
    copies: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform {self.kind!r}")
        if self.copies < 1:
            raise ConfigError("copies must be >= 1")

    def to_dict(self):
        return asdict(self)


class DonorPool:
    """Images from which Admix draws a partner of a different class."""

    def __init__(self, images, labels):
        self.images = images
        self.labels = torch.as_tensor(labels)

    def draw(self, label: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.nonzero(self.labels != label).flatten()
        if len(idx) == 0:
            raise ConfigError(f"donor pool has no image outside class {label}")
        pick = idx[torch.randint(len(idx), (1,), generator=gen)]
        return self.images[pick[0]]


def _as_gens(rng, n):
    if isinstance(rng, torch.Generator):
        return [rng] * n
    if len(rng) != n:
        raise ConfigError("need one generator per image")
    return list(rng)


def sample(spec: TransformSpec, x: torch.Tensor, rng, labels=None, donors: DonorPool | None = None,
           copy_index: int = 0) -> list[dict]:
    """Draw per-image transformation parameters."""
    gens = _as_gens(rng, len(x))
    h = x.shape[-1]
    params = []
    for i, g in enumerate(gens):
        k = spec.kind
        if k == "identity":
            p = {}
        elif k == "DI":
            if torch.rand(1, generator=g).item() >= spec.di_prob:
                p = {"skip": True}
            else:
                lo, hi = spec.di_range
                s = lo + (hi - lo) * torch.rand(1, generator=g).item()
                new = max(1, math.floor(s * h))
                canvas = math.ceil(hi * h - 1e-9)
                room = canvas - new
                top = int(torch.randint(room + 1, (1,), generator=g))
                left = int(torch.randint(room + 1, (1,), generator=g))
                p = {"size": new, "canvas": canvas, "top": top, "left": left}
        elif k == "TI":
            r = spec.ti_range
            dx, dy = torch.randint(-r, r + 1, (2,), generator=g).tolist()
            p = {"dx": dx, "dy": dy}
        elif k == "SI":
            if spec.si_ladder:
                p = {"scale": 1.0 / 2**copy_index}
            else:
                lo, hi = spec.si_range
                p = {"scale": lo + (hi - lo) * torch.rand(1, generator=g).item()}
        elif k == "VT":
            amp = spec.vt_factor * spec.epsilon
            p = {"noise": (torch.rand(x.shape[1:], generator=g) * 2 - 1) * amp}
        else:  # Admix
            if donors is None:
                raise ConfigError("Admix needs a donor pool")
            if labels is None:
                raise ConfigError("Admix needs labels to pick donors from other classes")
            p = {"donor": donors.draw(int(labels[i]), g)}
        params.append(p)
    return params


def _translate(x, dx, dy, r):
    h, w = x.shape[-2:]
    xp = F.pad(x, (r, r, r, r))
    return xp[..., r - dy:r - dy + h, r - dx:r - dx + w]


def apply(spec: TransformSpec, x: torch.Tensor, params: list[dict]) -> torch.Tensor:
    """Apply drawn parameters; differentiable in ``x``; shape preserved."""
    k = spec.kind
    if k == "identity":
        return x
    out = []
    h, w = x.shape[-2:]
    for xi, p in zip(x, params):
        xi = xi[None]
        if k == "DI":
            if not p.get("skip"):
                small = F.interpolate(xi, size=(p["size"], p["size"]), mode="bilinear", align_corners=False)
                c = p["canvas"]
                pad = (p["left"], c - p["size"] - p["left"], p["top"], c - p["size"] - p["top"])
                xi = F.interpolate(F.pad(small, pad), size=(h, w), mode="bilinear", align_corners=False)
        elif k == "TI":
            xi = _translate(xi, p["dx"], p["dy"], spec.ti_range)
        elif k == "SI":
            xi = xi * p["scale"]
        elif k == "VT":
            xi = (xi + p["noise"].to(xi.dtype)).clamp(0, 1)
        else:
            xi = (xi + spec.admix_eta * p["donor"].to(xi.dtype)).clamp(0, 1)
        out.append(xi)
    return torch.cat(out)


def augment(spec: TransformSpec, x: torch.Tensor, rng, labels=None, donors=None, copy_index=0) -> torch.Tensor:
    """Sample and apply one random transformation per image (accepts (C,H,W) or a batch)."""
    single = x.ndim == 3
    xb = x[None] if single else x
    if labels is not None and single:
        labels = torch.as_tensor([labels])
    out = apply(spec, xb, sample(spec, xb, rng, labels, donors, copy_index))
    return out[0] if single else out


class TransformedLoss(LossSpec):
    """``base(model, T(x))`` for fixed transformation parameters."""

    def __init__(self, spec, params, base):
        self.spec, self.params, self.base = spec, params, base

    def __call__(self, model, x):
        return self.base(model, apply(self.spec, x, self.params))


def averaged_gradient(spec: TransformSpec, model: ModelHandle, x: torch.Tensor, y, rng,
                      loss: LossSpec | None = None, donors=None) -> torch.Tensor:
    """Mean over ``spec.copies`` independent draws of the gradient of the loss at T(x).

    The mean is accumulated incrementally so identical copies reproduce the
    single-copy gradient bit for bit.
    """
    base = loss if loss is not None else CrossEntropy(y)
    if spec.kind == "identity":
        draws = [[{}] * len(x)] * spec.copies
    else:
        draws = [sample(spec, x, rng, y, donors, j) for j in range(spec.copies)]
    mean = None
    for j, params in enumerate(draws, start=1):
        g = input_gradient(model, x, TransformedLoss(spec, params, base))
        mean = g if mean is None else mean + (g - mean) / j
    return mean


@torch.no_grad()
def input_diversity(spec: TransformSpec, model: ModelHandle, dataset, repeats: int = 1, seed: int = 0,
                    donors=None, batch_size: int = 256) -> float:
    """Mean drop of the clean top-1 logit caused by the transformation.

    Positive values mean the transformation lowers the logit of the class the
    model predicts on the clean image.
    """
    from .engine import per_image_generators

    if len(dataset) == 0:
        raise EmptyDatasetError("input diversity needs at least one image")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        clean = model(x)
        top = clean.argmax(1, keepdim=True)
        base = clean.gather(1, top).squeeze(1)
        for r in range(repeats):
            gens = per_image_generators(seed + r, range(start, start + len(x)))
            xt = augment(spec, x, gens, y, donors)
            total += (base - model(xt).gather(1, top).squeeze(1)).double().sum().item()
            count += len(x)
    return total / count
