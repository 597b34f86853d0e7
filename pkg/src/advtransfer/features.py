"""Intermediate-layer attack objectives: TAP, AA, ILA, FIA, NAA.

All objectives are :class:`~advtransfer.models.LossSpec` objects that the
engine *ascends*; objectives that shrink a distance or an importance-weighted
activation are therefore negated here.

TAP combines three terms, given only as the triple (lambda, eta, alpha):

    total = sum_l mean((f_l(x') - f_l(x))^2) + lambda * CE(x', y)
            - eta * (TV(x' - x) + 1e-12) ** alpha

where TV is the anisotropic total variation of the perturbation, so
``eta`` penalises high-frequency perturbations and ``alpha`` shapes that
penalty.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .engine import AdversarialBatch, AttackSpec, per_image_generators, run_iterative_attack
from .errors import ConfigError, DegenerateDirectionError
from .models import LossSpec, ModelHandle, input_gradient

VARIANTS = ("TAP", "AA", "ILA", "FIA", "NAA")


@dataclass
class FeatureLossSpec:
    variant: str = "FIA"
    layer: str = "conv3_x"
    tap_lambda: float = 0.005
    tap_eta: float = 0.01
    tap_alpha: float = 0.5
    tap_layers: tuple[str, ...] | None = None  # None: every layer
    aa_classes: int = 4
    aa_per_class: int = 5
    fia_n: int = 30
    fia_p_drop: float = 0.3
    naa_n: int = 30
    naa_gamma: float = 1.0
    ila_stage1_iterations: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown feature attack {self.variant!r}")

    def to_dict(self):
        return asdict(self)


def _tap(model: ModelHandle, x, layer):
    _, feats = model.forward_with_taps(x, [layer])
    return feats[layer]


def _per_sample_mean_sq(a, b):
    return (a - b).pow(2).flatten(1).mean(1)


class FeatureDistance(LossSpec):
    """``sign * mean((f_l(x') - ref)^2)`` per sample; ``ref`` is a fixed feature map."""

    def __init__(self, layer, ref, sign=1.0):
        self.layer, self.ref, self.sign = layer, ref.detach(), sign

    def __call__(self, model, x):
        return self.sign * _per_sample_mean_sq(_tap(model, x, self.layer), self.ref)


def total_variation(d):
    return (d[..., 1:, :] - d[..., :-1, :]).abs().flatten(1).sum(1) + \
        (d[..., :, 1:] - d[..., :, :-1]).abs().flatten(1).sum(1)


class TAPLoss(LossSpec):
    def __init__(self, layers, x_clean, clean_feats, labels, lam=0.005, eta=0.01, alpha=0.5):
        self.layers, self.x_clean = list(layers), x_clean.detach()
        self.clean = {k: v.detach() for k, v in clean_feats.items()}
        self.labels, self.lam, self.eta, self.alpha = torch.as_tensor(labels), lam, eta, alpha

    def __call__(self, model, x):
        logits, feats = model.forward_with_taps(x, self.layers)
        total = sum(_per_sample_mean_sq(feats[k], self.clean[k]) for k in self.layers)
        if self.lam:
            total = total + self.lam * F.cross_entropy(logits, self.labels, reduction="none")
        if self.eta:
            total = total - self.eta * (total_variation(x - self.x_clean) + 1e-12) ** self.alpha
        return total


class AALoss(LossSpec):
    """Pull features toward a set of target-image features: ``-mean_k ||f_l(x') - t_k||^2``."""

    def __init__(self, layer, target_feats):
        self.layer, self.targets = layer, target_feats.detach()  # (B, K, ...)

    def __call__(self, model, x):
        f = _tap(model, x, self.layer)
        d = (f[:, None] - self.targets).pow(2).flatten(2).mean(2)
        return -d.mean(1)


class ILAProjection(LossSpec):
    """Projection of the feature displacement onto a fixed unit direction."""

    def __init__(self, layer, clean_feat, direction):
        self.layer, self.clean, self.direction = layer, clean_feat.detach(), direction.detach()

    def __call__(self, model, x):
        return ((_tap(model, x, self.layer) - self.clean) * self.direction).flatten(1).sum(1)


class WeightedFeatureLoss(LossSpec):
    """FIA objective: ``-sum(weights * f_l(x'))``."""

    def __init__(self, layer, weights):
        self.layer, self.weights = layer, weights.detach()

    def __call__(self, model, x):
        return -(self.weights * _tap(model, x, self.layer)).flatten(1).sum(1)


class NAALoss(LossSpec):
    """NAA objective with the linear transformation ``phi(a) = a+ - gamma * a-``, negated."""

    def __init__(self, layer, weights, baseline_feat, gamma=1.0):
        self.layer, self.weights = layer, weights.detach()
        self.base, self.gamma = baseline_feat.detach(), gamma

    def __call__(self, model, x):
        a = (_tap(model, x, self.layer) - self.base) * self.weights
        return -(F.relu(a) - self.gamma * F.relu(-a)).flatten(1).sum(1)


# ----------------------------------------------------------------------------
# importance weights


def _label_logit_feature_grad(model, x, y, layer):
    with torch.enable_grad():
        logits, feats = model.forward_with_taps(x.detach().requires_grad_(True), [layer])
        sel = logits.gather(1, torch.as_tensor(y)[:, None]).sum()
        (g,) = torch.autograd.grad(sel, feats[layer])
    return g


def fia_feature_importance(model: ModelHandle, x, y, layer="conv3_x", n=30, p_drop=0.3, rng=None,
                           seed=0, indices=None) -> torch.Tensor:
    """Mean over ``n`` random pixel-drop masks of d(label logit)/d(feature map)."""
    if n < 1 or not 0 <= p_drop < 1:
        raise ConfigError("FIA needs n >= 1 and p_drop in [0, 1)")
    model.check_taps([layer])
    if rng is None:
        rng = per_image_generators(seed, range(len(x)) if indices is None else indices)
    gens = rng if isinstance(rng, (list, tuple)) else [rng] * len(x)
    h, w = x.shape[-2:]
    mean = None
    for j in range(1, n + 1):
        keep = torch.stack([(torch.rand(h, w, generator=g) >= p_drop) for g in gens]).to(x.dtype)
        g = _label_logit_feature_grad(model, x * keep[:, None], y, layer)
        mean = g if mean is None else mean + (g - mean) / j
    return mean


def naa_attribution(model: ModelHandle, x, y, layer="conv3_x", n=30, baseline=None):
    """Integrated-gradients attribution of the label logit at a feature layer.

    The path runs in feature space from ``f_l(baseline)`` (black image by
    default) to ``f_l(x)`` with an ``n``-point midpoint rule. Returns
    ``(attribution, weights, baseline_feature)`` with attribution = weights * delta.
    """
    if n < 1:
        raise ConfigError("NAA needs n >= 1")
    model.check_taps([layer])
    baseline = torch.zeros_like(x) if baseline is None else baseline
    y = torch.as_tensor(y)
    with torch.no_grad():
        f_x = _tap(model, x, layer)
        f_b = _tap(model, baseline, layer)
    delta = f_x - f_b
    mean = None
    for k in range(1, n + 1):
        point = (f_b + ((k - 0.5) / n) * delta).requires_grad_(True)
        with torch.enable_grad():
            out = model.net.forward_from(layer, point)
            (g,) = torch.autograd.grad(out.gather(1, y[:, None]).sum(), point)
        mean = g if mean is None else mean + (g - mean) / k
    return mean * delta, mean, f_b


# ----------------------------------------------------------------------------
# AA targets


def select_aa_targets(pool_images, pool_labels, labels, gens, n_classes=4, per_class=5):
    """For each source image draw ``per_class`` images from each of ``n_classes`` other classes."""
    pool_labels = torch.as_tensor(pool_labels)
    classes = sorted(set(pool_labels.tolist()))
    out = []
    for y, g in zip(torch.as_tensor(labels).tolist(), gens):
        others = [c for c in classes if c != y]
        if len(others) < n_classes:
            raise ConfigError("not enough other classes for AA targets")
        chosen = [others[i] for i in torch.randperm(len(others), generator=g)[:n_classes].tolist()]
        picks = []
        for c in chosen:
            idx = torch.nonzero(pool_labels == c).flatten()
            picks.append(idx[torch.randperm(len(idx), generator=g)[:per_class]])
        out.append(pool_images[torch.cat(picks)])
    return torch.stack(out)


# ----------------------------------------------------------------------------
# assembling objectives


def build_feature_loss(spec: FeatureLossSpec, model: ModelHandle, x_clean, y, x_ref=None, seed=0,
                       indices=None) -> LossSpec:
    """Objective for ``spec.variant`` anchored at the clean batch.

    ``x_ref`` is the AA target stack (B, K, C, H, W); other variants ignore it.
    """
    idx = range(len(x_clean)) if indices is None else indices
    layer = spec.layer
    with torch.no_grad():
        if spec.variant == "TAP":
            layers = list(spec.tap_layers or model.layer_names)
            _, feats = model.forward_with_taps(x_clean, layers)
            return TAPLoss(layers, x_clean, feats, y, spec.tap_lambda, spec.tap_eta, spec.tap_alpha)
        model.check_taps([layer])
        if spec.variant == "AA":
            if x_ref is None:
                raise ConfigError("AA needs target images")
            b, k = x_ref.shape[:2]
            t = _tap(model, x_ref.flatten(0, 1), layer)
            return AALoss(layer, t.view(b, k, *t.shape[1:]))
    if spec.variant == "FIA":
        w = fia_feature_importance(model, x_clean, y, layer, spec.fia_n, spec.fia_p_drop,
                                   rng=per_image_generators(seed, idx))
        return WeightedFeatureLoss(layer, w)
    if spec.variant == "NAA":
        _, w, f_b = naa_attribution(model, x_clean, y, layer, spec.naa_n)
        return NAALoss(layer, w, f_b, spec.naa_gamma)
    raise ConfigError("ILA is a two-stage attack; use ila_two_stage")


def feature_distance_gradient(spec: FeatureLossSpec, model: ModelHandle, x_adv, x_ref, y=None, x_clean=None,
                              seed=0) -> torch.Tensor:
    """Ascent gradient of the variant's feature objective at ``x_adv``.

    ``x_ref`` is the clean image for TAP/FIA/NAA/ILA and the AA target stack
    for AA (in which case ``x_clean`` anchors nothing and may be omitted).
    """
    if spec.variant == "AA":
        ref = x_ref if x_ref.ndim == 5 else x_ref[:, None]
        loss = build_feature_loss(spec, model, x_adv, y, ref, seed)
    elif spec.variant == "ILA":
        with torch.no_grad():
            clean = _tap(model, x_ref, spec.layer)
        loss = FeatureDistance(spec.layer, clean)
    else:
        loss = build_feature_loss(spec, model, x_ref if x_clean is None else x_clean, y, seed=seed)
    return input_gradient(model, x_adv, loss)


def ila_two_stage(stage1: AttackSpec, model: ModelHandle, x, y, layer="conv3_x", t2=40) -> AdversarialBatch:
    """CE warm-up, then ``t2`` steps maximising the projection of the feature
    displacement onto the stage-1 displacement direction (same budget)."""
    first = run_iterative_attack(stage1, model, x, y)
    if t2 == 0:
        return first
    with torch.no_grad():
        clean = _tap(model, x, layer)
        disp = _tap(model, first.adversarials, layer) - clean
    norms = disp.flatten(1).norm(dim=1)
    if (norms == 0).any():
        bad = torch.nonzero(norms == 0).flatten().tolist()
        raise DegenerateDirectionError(f"stage-1 feature displacement is zero for samples {bad}")
    direction = disp / norms.view(-1, *([1] * (disp.ndim - 1)))
    loss = ILAProjection(layer, clean, direction)
    spec2 = stage1.with_(iterations=t2, stabilization="none")
    out = run_iterative_attack(spec2, model, x, y, lambda p: input_gradient(model, p, loss),
                               x_start=first.adversarials)
    out.attack_id = stage1.variant
    return out


def feature_displacement(model: ModelHandle, x, x_adv, layer="conv3_x") -> torch.Tensor:
    with torch.no_grad():
        return (_tap(model, x_adv, layer) - _tap(model, x, layer)).flatten(1).norm(dim=1)
