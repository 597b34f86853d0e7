"""Registry of the 24 attack variants and a single ``craft`` entry point."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .augment import DonorPool, TransformSpec, averaged_gradient
from .engine import AdversarialBatch, AttackSpec, per_image_generators, run_iterative_attack
from .errors import ConfigError
from .features import FeatureLossSpec, build_feature_loss, ila_two_stage, select_aa_targets
from .generative import Generator, generate
from .models import ModelHandle, RefinementConfig, apply_refinement, input_gradient

CATEGORIES = {
    "baseline": ("PGD",),
    "stabilization": ("MI", "NI", "PI"),
    "augmentation": ("DI", "TI", "SI", "VT", "Admix"),
    "feature": ("TAP", "AA", "ILA", "FIA", "NAA"),
    "refinement": ("SGM", "LinBP", "RFA", "IAA", "DSM"),
    "generative": ("GAP", "CDA", "GAPF", "BIA", "TTP"),
}
VARIANTS = tuple(v for vs in CATEGORIES.values() for v in vs)
CATEGORY_OF = {v: c for c, vs in CATEGORIES.items() for v in vs}
# attacks whose output depends on the attack seed
STOCHASTIC = frozenset({"DI", "TI", "SI", "VT", "Admix", "AA", "FIA"})
DETERMINISTIC = tuple(v for v in VARIANTS if v not in STOCHASTIC)


@dataclass
class AttackContext:
    """Everything an attack may need besides the images.

    ``rfa_models`` maps a norm ("L2" / "Linf") to an adversarially trained
    surrogate; ``generators`` maps a generative variant to its generator.
    """

    surrogate: ModelHandle
    donors: DonorPool | None = None
    aa_pool: tuple | None = None
    rfa_models: dict = field(default_factory=dict)
    dsm_model: ModelHandle | None = None
    generators: dict = field(default_factory=dict)
    layer: str = "conv3_x"
    sgm_gamma: float = 0.5
    linbp_start: str = "conv4_x"
    iaa_beta: float = 15.0
    _refined: dict = field(default_factory=dict, repr=False)

    def refined(self, kind: str) -> ModelHandle:
        if kind not in self._refined:
            cfg = RefinementConfig(kind, gamma=self.sgm_gamma, linbp_start=self.linbp_start, beta=self.iaa_beta)
            self._refined[kind] = apply_refinement(self.surrogate, cfg)
        return self._refined[kind]


def category(variant: str) -> str:
    if variant not in CATEGORY_OF:
        raise ConfigError(f"unknown attack {variant!r}; known: {', '.join(VARIANTS)}")
    return CATEGORY_OF[variant]


def _need(obj, what, variant):
    if obj is None:
        raise ConfigError(f"{variant} needs {what} in the attack context")
    return obj


def craft(variant: str, ctx: AttackContext, x: torch.Tensor, y: torch.Tensor, epsilon: float = 16 / 255,
          seed: int = 0, indices=None, params: dict | None = None, probe: ModelHandle | None = None,
          iterations: int | None = None, step_size: float | None = None) -> AdversarialBatch:
    """Run ``variant`` on (x, y) crafted against ``ctx``; ``indices`` key the per-image RNG streams."""
    cat = category(variant)
    params = dict(params or {})
    idx = list(range(len(x)) if indices is None else indices)
    y = torch.as_tensor(y)
    spec = AttackSpec(variant, epsilon, step_size=step_size, iterations=iterations, seed=seed, params=params,
                      stabilization=variant if cat == "stabilization" else "none")
    sur = ctx.surrogate

    if cat in ("baseline", "stabilization"):
        out = run_iterative_attack(spec, sur, x, y, probe=probe)
    elif cat == "augmentation":
        tspec = TransformSpec(variant, epsilon=epsilon, copies=params.get("copies", 5),
                              **{k: v for k, v in params.items() if k != "copies"})
        gens = per_image_generators(seed, idx)
        donors = ctx.donors if variant == "Admix" else None
        if variant == "Admix":
            _need(donors, "a donor pool", variant)
        out = run_iterative_attack(spec, sur, x, y, lambda p: averaged_gradient(tspec, sur, p, y, gens, donors=donors),
                                   probe=probe)
    elif cat == "feature":
        fspec = FeatureLossSpec(variant, **{"layer": ctx.layer, **params})
        if variant == "ILA":
            t1 = fspec.ila_stage1_iterations
            s1 = spec.with_(iterations=t1)
            out = ila_two_stage(s1, sur, x, y, fspec.layer, spec.iterations - t1)
        else:
            ref = None
            if variant == "AA":
                pool_x, pool_y = _need(ctx.aa_pool, "a target-image pool", variant)
                ref = select_aa_targets(pool_x, pool_y, y, per_image_generators(seed, idx),
                                        fspec.aa_classes, fspec.aa_per_class)
            loss = build_feature_loss(fspec, sur, x, y, ref, seed, idx)
            out = run_iterative_attack(spec, sur, x, y, lambda p: input_gradient(sur, p, loss), probe=probe)
    elif cat == "refinement":
        if variant in ("SGM", "LinBP", "IAA"):
            model = ctx.refined(variant)
        elif variant == "RFA":
            norm = params.get("norm", "L2")
            model = _need(ctx.rfa_models.get(norm), f"an {norm} robust surrogate", variant)
        else:
            model = _need(ctx.dsm_model, "a distilled surrogate", variant)
        out = run_iterative_attack(spec, model, x, y, probe=probe)
    else:
        gen: Generator = _need(ctx.generators.get(variant), "a trained generator", variant)
        out = generate(gen, x, y, epsilon, variant)
    out.attack_id = variant
    out.seed = seed
    return out


def layer_sweep(variant: str, layers, ctx: AttackContext, x, y, target: ModelHandle, epsilon=16 / 255,
                seed=0, params=None) -> list[dict]:
    """Transfer success of a feature attack per tap layer."""
    if category(variant) != "feature":
        raise ConfigError("layer sweeps apply to feature attacks")
    rows = []
    for layer in layers:
        adv = craft(variant, ctx, x, y, epsilon, seed, params={**(params or {}), "layer": layer})
        rows.append({"variant": variant, "layer": layer,
                     "success": (target.predict(adv.adversarials) != y).float().mean().item()})
    return rows
