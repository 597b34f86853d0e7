"""The desk-scale reference setup: data, surrogate, targets, robust and distilled
models, generators and purifiers, each built on first use and cached on disk.

Cache entries are keyed by the recipe, the dataset digest and the parameter
digests of every model they depend on, so a changed ingredient never reuses
a stale artifact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import torch

from .attacks import AttackContext
from .augment import DonorPool
from .data import ImageSet, make_shapes, quantize
from .defenses import DefenseSpec, PurifierRecipe, load_purifier, save_purifier, train_purifier
from .engine import AttackSpec, run_iterative_attack
from .features import FeatureDistance
from .generative import GenTrainConfig, cached_generator
from .models import ModelHandle, TrainRecipe, input_gradient, load_model, save_model, train_reference_model

# bump when the purifier training pool construction changes
POOL_VERSION = 2

# L2 radii are given for 224x224x3 inputs; scale them by the root of the dimension ratio
L2_SCALE = math.sqrt(3 * 32 * 32 / (3 * 224 * 224))


def default_cache_dir() -> Path:
    return Path(os.environ.get("ADVTRANSFER_CACHE", Path.home() / ".cache" / "advtransfer"))


@dataclass
class SetupConfig:
    n_train: int = 3000
    n_val: int = 500
    n_pool: int = 1000
    data_seed: int = 0
    surrogate: TrainRecipe = field(default_factory=lambda: TrainRecipe(
        arch="resnet", arch_kwargs={"width": 8}, epochs=6, seed=0, augmentation="crop_flip",
        accuracy_floor=0.9))
    targets: dict = field(default_factory=lambda: {
        "plain16": TrainRecipe(arch="plain", arch_kwargs={"width": 16}, epochs=6, seed=1, augmentation="crop_flip",
                               accuracy_floor=0.9),
    })
    rfa: dict = field(default_factory=lambda: {
        "Linf": TrainRecipe("pgd_adversarial", "resnet", {"width": 8}, epochs=6, seed=0, norm="Linf",
                            epsilon=8 / 255, pgd_steps=3),
        "L2": TrainRecipe("pgd_adversarial", "resnet", {"width": 8}, epochs=6, seed=0, norm="L2",
                          epsilon=0.1 * L2_SCALE, pgd_steps=3),
    })
    dsm: TrainRecipe = field(default_factory=lambda: TrainRecipe(
        "distilled", "resnet", {"width": 8}, epochs=6, seed=3, augmentation="cutmix"))
    robust: dict = field(default_factory=lambda: {
        "AT_inf": TrainRecipe("pgd_adversarial", "plain", {"width": 16}, epochs=6, seed=1, norm="Linf",
                              epsilon=8 / 255, pgd_steps=3),
        "FD_inf": TrainRecipe("pgd_adversarial", "resnet_fd", {"width": 8}, epochs=6, seed=1, norm="Linf",
                              epsilon=8 / 255, pgd_steps=3),
        "AT_2": TrainRecipe("pgd_adversarial", "plain", {"width": 16}, epochs=6, seed=1, norm="L2",
                            epsilon=3.0 * L2_SCALE, pgd_steps=3),
    })
    generator: GenTrainConfig = field(default_factory=lambda: GenTrainConfig(epochs=3, seed=0))
    ttp_target_class: int = 0
    purifiers: dict = field(default_factory=lambda: {
        "HGD": PurifierRecipe("HGD", feature_layer="conv4_x"),
        "NRP": PurifierRecipe("NRP"),
        "DiffPure": PurifierRecipe("DiffPure"),
    })
    purifier_pool: int = 1000
    pd_count: int = 64

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


def _key(*parts) -> str:
    return hashlib.sha256(":".join(str(p) for p in parts).encode()).hexdigest()[:16]


class ReferenceSetup:
    """Lazily built desk-scale models; every attribute is cached under ``cache_dir``."""

    def __init__(self, cache_dir=None, cfg: SetupConfig | None = None, log=None):
        self.cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
        self.cfg = cfg or SetupConfig()
        self.log = log or (lambda msg: None)
        self.cache_hits, self.cache_misses = 0, 0

    # data ------------------------------------------------------------------
    @cached_property
    def train(self) -> ImageSet:
        return make_shapes(self.cfg.n_train, seed=self.cfg.data_seed)

    @cached_property
    def val(self) -> ImageSet:
        return make_shapes(self.cfg.n_val, seed=self.cfg.data_seed + 1)

    @cached_property
    def pool(self) -> ImageSet:
        """Evaluation candidates, disjoint from training data by seed."""
        return make_shapes(self.cfg.n_pool, seed=self.cfg.data_seed + 2)

    @cached_property
    def eval_set(self) -> ImageSet:
        """Pool images that the surrogate and every target classify correctly."""
        keep = torch.ones(len(self.pool), dtype=torch.bool)
        for m in [self.surrogate, *self.targets.values()]:
            keep &= m.predict(self.pool.images) == self.pool.labels
        return self.pool.subset(torch.nonzero(keep).flatten())

    def eval_images(self, per_class: int = 5, seed: int = 0) -> ImageSet:
        return self.eval_set.per_class(per_class, seed)

    # models ----------------------------------------------------------------
    def _model(self, name, recipe: TrainRecipe, teacher: ModelHandle | None = None) -> ModelHandle:
        key = _key(recipe.digest(), self.train.digest(), teacher.param_digest() if teacher else "")
        path = self.cache_dir / "models" / f"{name}-{key}"
        if (path / "manifest.json").exists():
            self.cache_hits += 1
            return load_model(path)
        self.cache_misses += 1
        self.log(f"training {name}")
        m = train_reference_model(recipe, self.train, self.val, teacher=teacher, tag=name)
        save_model(m, path)
        return load_model(path)

    @cached_property
    def surrogate(self) -> ModelHandle:
        return self._model("surrogate", self.cfg.surrogate)

    @cached_property
    def targets(self) -> dict:
        return {k: self._model(k, r) for k, r in self.cfg.targets.items()}

    @property
    def target(self) -> ModelHandle:
        return next(iter(self.targets.values()))

    @cached_property
    def rfa_models(self) -> dict:
        return {k: self._model(f"rfa-{k}", r) for k, r in self.cfg.rfa.items()}

    @cached_property
    def dsm_model(self) -> ModelHandle:
        return self._model("dsm", self.cfg.dsm, teacher=self.surrogate)

    @cached_property
    def robust_models(self) -> dict:
        return {k: self._model(k, r) for k, r in self.cfg.robust.items()}

    def model(self, name: str) -> ModelHandle:
        if name == "surrogate":
            return self.surrogate
        if name in self.cfg.targets:
            return self.targets[name]
        if name in self.cfg.robust:
            return self.robust_models[name]
        raise KeyError(name)

    # generators ------------------------------------------------------------
    def generator_config(self, variant: str) -> GenTrainConfig:
        tc = self.cfg.ttp_target_class if variant == "TTP" else None
        return replace(self.cfg.generator, loss=variant, ttp_target_class=tc)

    def generator(self, variant: str, **overrides):
        cfg = replace(self.generator_config(variant), **overrides)
        return cached_generator(cfg, self.surrogate, self.train, self.cache_dir / "generators")

    @cached_property
    def generators(self) -> dict:
        return {v: self.generator(v) for v in ("GAP", "CDA", "GAPF", "BIA", "TTP")}

    # attack context --------------------------------------------------------
    def context(self, need=("augmentation", "feature", "refinement", "generative")) -> AttackContext:
        ctx = AttackContext(self.surrogate, DonorPool(self.train.images, self.train.labels),
                            (self.train.images, self.train.labels))
        if "refinement" in need:
            ctx.rfa_models = self.rfa_models
            ctx.dsm_model = self.dsm_model
        if "generative" in need:
            ctx.generators = self.generators
        return ctx

    # purifiers -------------------------------------------------------------
    def _purifier_pool(self, style):
        x = self.train.images[: self.cfg.purifier_pool]
        y = self.train.labels[: self.cfg.purifier_pool]
        if style == "DiffPure":
            return x, None
        sur = self.surrogate
        spec = AttackSpec("PGD", 16 / 255, iterations=10)
        out = []
        for i in range(0, len(x), 100):
            xb, yb = x[i:i + 100], y[i:i + 100]
            if style == "HGD":
                out.append(run_iterative_attack(spec, sur, xb, yb).adversarials)
            else:
                with torch.no_grad():
                    ref = sur.forward_with_taps(xb, ["conv3_x"])[1]["conv3_x"]
                loss = FeatureDistance("conv3_x", ref)
                # the distance has zero gradient at the clean image, so start inside the ball
                gen = torch.Generator().manual_seed(i)
                start = quantize((xb + (torch.rand(xb.shape, generator=gen) * 2 - 1) * spec.epsilon).clamp(0, 1))
                out.append(run_iterative_attack(spec, sur, xb, yb, lambda p: input_gradient(sur, p, loss),
                                                x_start=start).adversarials)
        return x, torch.cat(out)

    def purifier(self, style: str):
        recipe = self.cfg.purifiers[style]
        key = _key(recipe.digest(), self.train.digest(), self.surrogate.param_digest(), self.cfg.purifier_pool,
                   POOL_VERSION)
        path = self.cache_dir / "purifiers" / f"{style}-{key}"
        if (path / "manifest.json").exists():
            self.cache_hits += 1
            return load_purifier(path)
        self.cache_misses += 1
        self.log(f"training {style} purifier")
        clean, adv = self._purifier_pool(style)
        p = train_purifier(recipe, clean, adv, self.surrogate)
        save_purifier(p, path)
        return load_purifier(path)

    # defenses --------------------------------------------------------------
    def defense(self, name: str, seed: int = 0) -> DefenseSpec:
        """Defense by name: none, BDR, PD, RP, HGD, NRP, DiffPure, AT_inf, FD_inf, AT_2."""
        if name in ("none", "BDR", "RP"):
            return DefenseSpec(name, seed=seed)
        if name == "PD":
            return DefenseSpec("PD", pd_count=self.cfg.pd_count, seed=seed)
        if name in self.cfg.purifiers:
            return DefenseSpec("purifier", name=name, purifier=self.purifier(name), seed=seed)
        if name in self.cfg.robust:
            return DefenseSpec("robust_model", name=name, robust_model=self.robust_models[name], seed=seed)
        raise KeyError(f"unknown defense {name!r}")


DEFENSE_NAMES = ("none", "BDR", "PD", "RP", "HGD", "NRP", "DiffPure", "AT_inf", "FD_inf", "AT_2")
