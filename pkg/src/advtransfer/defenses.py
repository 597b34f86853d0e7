"""Input pre-processing defenses, learned purifiers and the defend-then-classify contract."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import AdversarialBatch, per_image_generators
from .errors import CheckpointError, ConfigError, TrainingFailure
from .models import ModelHandle

KINDS = ("none", "BDR", "PD", "RP", "purifier", "robust_model")


def bdr(x: torch.Tensor, depth: int = 2) -> torch.Tensor:
    """Bit-depth reduction to ``2**depth`` levels per channel."""
    if not 1 <= depth <= 8:
        raise ConfigError("bit depth must be in [1, 8]")
    levels = 2**depth - 1
    return torch.round(x * levels) / levels


# ----------------------------------------------------------------------------
# pixel deflection


def haar_soft_denoise(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Single-level orthonormal Haar transform, soft-threshold the detail bands at ``sigma``."""
    if sigma <= 0:
        return x
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    xp = F.pad(x, (0, pw, 0, ph), mode="replicate") if (ph or pw) else x
    a, b = xp[..., 0::2, 0::2], xp[..., 0::2, 1::2]
    c, d = xp[..., 1::2, 0::2], xp[..., 1::2, 1::2]
    ll, lh = (a + b + c + d) / 2, (a - b + c - d) / 2
    hl, hh = (a + b - c - d) / 2, (a - b - c + d) / 2

    def soft(t):
        return torch.sign(t) * (t.abs() - sigma).clamp_min(0)

    lh, hl, hh = soft(lh), soft(hl), soft(hh)
    out = torch.empty_like(xp)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out[..., :h, :w].clamp(0, 1)


def deflect(image: torch.Tensor, count: int, k: int, gen: torch.Generator, saliency=None) -> torch.Tensor:
    """Replace ``count`` pixels of one (C, H, W) image with a random k x k neighbour.

    Positions are drawn with probability proportional to ``1 - saliency``.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError("deflection window must be odd")
    if count < 0:
        raise ConfigError("deflection count must be >= 0")
    c, h, w = image.shape
    out = image.clone()
    if count == 0:
        return out
    if saliency is None:
        weights = torch.ones(h * w, dtype=torch.float64)
    else:
        weights = (1.0 - saliency.double().reshape(-1)).clamp_min(0) + 1e-3
    pos = torch.multinomial(weights, count, replacement=True, generator=gen)
    r = k // 2
    offs = torch.randint(-r, r + 1, (count, 2), generator=gen)
    for p, (dy, dx) in zip(pos.tolist(), offs.tolist()):
        i, j = divmod(p, w)
        si, sj = min(max(i + dy, 0), h - 1), min(max(j + dx, 0), w - 1)
        out[:, i, j] = image[:, si, sj]
    return out


def pixel_deflection(x: torch.Tensor, count: int, k: int = 5, sigma: float = 0.04, gens=None, saliency=None,
                     seed: int = 0) -> torch.Tensor:
    """Saliency-guided pixel deflection followed by Haar soft-threshold denoising."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gens = gens or per_image_generators(seed, range(len(xb)))
    sal = [None] * len(xb) if saliency is None else saliency
    out = torch.stack([deflect(xi, count, k, g, s) for xi, g, s in zip(xb, gens, sal)])
    out = haar_soft_denoise(out, sigma)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# random resize and pad


def resize_pad(x: torch.Tensor, scale_range=(1.0, 1.1), gens=None, seed: int = 0, centered: bool = False,
               out_size: int | None = None) -> torch.Tensor:
    """Resize by a random factor, zero-pad to the largest canvas at a random offset, resize to ``out_size``."""
    single = x.ndim == 3
    xb = x[None] if single else x
    h = xb.shape[-1]
    out_size = out_size or h
    lo, hi = scale_range
    canvas = math.ceil(hi * h - 1e-9)
    gens = gens or per_image_generators(seed, range(len(xb)))
    out = []
    for xi, g in zip(xb, gens):
        s = lo + (hi - lo) * torch.rand(1, generator=g, dtype=torch.float64).item()
        new = max(1, math.floor(s * h + 1e-9))
        room = canvas - new
        if centered:
            top = left = room // 2
        else:
            top, left = torch.randint(room + 1, (2,), generator=g).tolist()
        xi = xi[None]
        if new != h:
            xi = F.interpolate(xi, size=(new, new), mode="bilinear", align_corners=False)
        xi = F.pad(xi, (left, room - left, top, room - top))
        if canvas != out_size:
            xi = F.interpolate(xi, size=(out_size, out_size), mode="bilinear", align_corners=False)
        out.append(xi)
    out = torch.cat(out).clamp(0, 1)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# purifiers


class PurifierNet(nn.Module):
    """Residual convolutional denoiser; ``level_channel`` adds a noise-level input plane."""

    def __init__(self, width: int = 32, depth: int = 5, level_channel: bool = False):
        super().__init__()
        cin = 4 if level_channel else 3
        layers = [nn.Conv2d(cin, width, 3, 1, 1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, 1, 1), nn.ReLU()]
        layers.append(nn.Conv2d(width, 3, 3, 1, 1))
        self.body = nn.Sequential(*layers)
        self.level_channel = level_channel

    def forward(self, x, level=None):
        inp = x * 2 - 1
        if self.level_channel:
            inp = torch.cat([inp, level.view(-1, 1, 1, 1).expand(-1, 1, *x.shape[-2:]).to(x.dtype)], 1)
        return x + self.body(inp)


def linear_schedule(steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> torch.Tensor:
    """Cumulative signal fraction ``alpha_bar_t`` for t = 1..steps (index t-1)."""
    betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    return torch.cumprod(1 - betas, 0)


@dataclass
class PurifierRecipe:
    style: str = "NRP"  # HGD | NRP | DiffPure
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    width: int = 32
    depth: int = 5
    feature_layer: str = "conv3_x"
    image_weight: float = 1.0
    feature_weight: float = 1.0
    diffusion_steps: int = 200
    inference_step: int = 30
    psnr_gain_floor: float | None = None

    def __post_init__(self):
        if self.style not in ("HGD", "NRP", "DiffPure"):
            raise ConfigError(f"unknown purifier style {self.style!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.__dict__, sort_keys=True).encode()).hexdigest()[:16]


class Purifier:
    def __init__(self, net: PurifierNet, recipe: PurifierRecipe):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.recipe = recipe
        self.alpha_bar = linear_schedule(recipe.diffusion_steps)

    def __call__(self, x: torch.Tensor, seed: int = 0, indices=None) -> torch.Tensor:
        with torch.no_grad():
            if self.recipe.style != "DiffPure":
                return self.net(x).clamp(0, 1)
            t = self.recipe.inference_step
            ab = self.alpha_bar[t - 1].item()
            gens = per_image_generators(seed, range(len(x)) if indices is None else indices)
            noise = torch.stack([torch.randn(x.shape[1:], generator=g) for g in gens])
            xt = math.sqrt(ab) * (x * 2 - 1) + math.sqrt(1 - ab) * noise
            level = torch.full((len(x),), math.sqrt(1 - ab))
            return self.net((xt + 1) / 2, level).clamp(0, 1)


def _psnr_gain(p: Purifier, adv, clean) -> float:
    from .metrics import psnr

    return psnr(clean, p(adv)) - psnr(clean, adv)


def train_purifier(recipe: PurifierRecipe, clean: torch.Tensor, adversarial: torch.Tensor | None = None,
                   feature_model: ModelHandle | None = None, holdout=None) -> Purifier:
    """Train a purifier.

    HGD: feature loss between purified adversarials and clean images.
    NRP: image loss plus feature loss on the same pairs.
    DiffPure: predicts the clean image from noised clean images at random steps.
    ``holdout`` is an optional (adversarial, clean) pair for the PSNR-gain floor.
    """
    style = recipe.style
    if style in ("HGD", "NRP"):
        if adversarial is None or len(adversarial) != len(clean):
            raise ConfigError(f"{style} purifier needs an aligned adversarial pool")
        if feature_model is None:
            raise ConfigError(f"{style} purifier needs a feature model")
        feature_model.check_taps([recipe.feature_layer])
    torch.manual_seed(recipe.seed)
    net = PurifierNet(recipe.width, recipe.depth, level_channel=style == "DiffPure")
    opt = torch.optim.Adam(net.parameters(), lr=recipe.lr)
    gen = torch.Generator().manual_seed(recipe.seed)
    alpha_bar = linear_schedule(recipe.diffusion_steps).float()
    layer = recipe.feature_layer
    losses = []
    net.train()
    for _ in range(recipe.epochs):
        order = torch.randperm(len(clean), generator=gen)
        for i in range(0, len(clean), recipe.batch_size):
            idx = order[i:i + recipe.batch_size]
            xc = clean[idx]
            if style == "DiffPure":
                t = torch.randint(1, recipe.diffusion_steps + 1, (len(idx),), generator=gen)
                ab = alpha_bar[t - 1].view(-1, 1, 1, 1)
                noise = torch.randn(xc.shape, generator=gen)
                xt = ab.sqrt() * (xc * 2 - 1) + (1 - ab).sqrt() * noise
                out = net((xt + 1) / 2, (1 - ab).sqrt().flatten())
                loss = F.mse_loss(out, xc)
            else:
                out = net(adversarial[idx])
                _, fo = feature_model.forward_with_taps(out, [layer])
                with torch.no_grad():
                    _, fc = feature_model.forward_with_taps(xc, [layer])
                loss = recipe.feature_weight * (fo[layer] - fc[layer]).abs().mean()
                if style == "NRP":
                    loss = loss + recipe.image_weight * F.mse_loss(out, xc)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    p = Purifier(net, recipe)
    p.losses = losses
    if recipe.psnr_gain_floor is not None and holdout is not None:
        gain = _psnr_gain(p, *holdout)
        if gain < recipe.psnr_gain_floor:
            raise TrainingFailure(f"{style} purifier PSNR gain {gain:.2f} dB below floor", {"loss": losses})
    return p


def save_purifier(p: Purifier, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(p.net.state_dict(), path / "params.pt")
    (path / "manifest.json").write_text(json.dumps({"recipe": p.recipe.__dict__}, indent=2, sort_keys=True))
    return path


def load_purifier(path) -> Purifier:
    path = Path(path)
    try:
        recipe = PurifierRecipe(**json.loads((path / "manifest.json").read_text())["recipe"])
        net = PurifierNet(recipe.width, recipe.depth, level_channel=recipe.style == "DiffPure")
        net.load_state_dict(torch.load(path / "params.pt", weights_only=True))
    except (FileNotFoundError, KeyError, RuntimeError) as e:
        raise CheckpointError(f"bad purifier checkpoint at {path}: {e}") from e
    return Purifier(net, recipe)


# ----------------------------------------------------------------------------
# defend then classify


@dataclass
class DefenseSpec:
    kind: str = "none"
    name: str | None = None
    bdr_depth: int = 2
    pd_count: int | None = None
    pd_k: int = 5
    pd_sigma: float = 0.04
    pd_saliency: bool = True
    rp_range: tuple[float, float] = (1.0, 1.1)
    purifier: Purifier | None = field(default=None, repr=False)
    robust_model: ModelHandle | None = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}")
        if self.kind == "PD" and self.pd_count is None:
            raise ConfigError("pixel deflection needs an explicit deflection count")
        if self.kind == "purifier" and self.purifier is None:
            raise ConfigError("purifier defense needs a trained purifier")
        if self.kind == "robust_model" and self.robust_model is None:
            raise ConfigError("robust_model defense needs a model")
        self.name = self.name or self.kind


def apply_defense(spec: DefenseSpec, x: torch.Tensor, target: ModelHandle | None = None, indices=None) -> torch.Tensor:
    """Input transformation of ``spec`` (identity for ``none`` and ``robust_model``)."""
    idx = range(len(x)) if indices is None else indices
    if spec.kind in ("none", "robust_model"):
        return x
    if spec.kind == "BDR":
        return bdr(x, spec.bdr_depth)
    if spec.kind == "PD":
        sal = None
        if spec.pd_saliency and target is not None:
            from .metrics import gradcam

            sal = gradcam(target, x, target.predict(x))
        return pixel_deflection(x, spec.pd_count, spec.pd_k, spec.pd_sigma,
                                per_image_generators(spec.seed, idx), sal)
    if spec.kind == "RP":
        return resize_pad(x, spec.rp_range, per_image_generators(spec.seed, idx))
    return spec.purifier(x, spec.seed, idx)


def defend_then_classify(spec: DefenseSpec, batch: AdversarialBatch | torch.Tensor, target: ModelHandle,
                         indices=None) -> torch.Tensor:
    x = batch.adversarials if isinstance(batch, AdversarialBatch) else batch
    model = spec.robust_model if spec.kind == "robust_model" else target
    return model.predict(apply_defense(spec, x, model, indices))
