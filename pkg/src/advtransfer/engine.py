"""Iterative sign-gradient attack loop, L∞ projection and gradient stabilization.

The loop is ``x'_{i+1} = proj(x'_i + step * sign(g_i))`` where ``g_i`` comes
from a gradient provider optionally wrapped by a stabilizer (MI/NI/PI or a
look-ahead window). Providers are plain callables ``point -> gradient``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .data import quantize
from .errors import AttackAborted, ConfigError
from .models import CrossEntropy, ModelHandle, input_gradient

STABILIZED = ("MI", "NI", "PI")
ITERATIVE_10 = ("MI", "NI", "PI")


def default_iterations(variant: str) -> int:
    """10 for gradient-stabilization attacks, 50 for every other iterative attack."""
    return 10 if variant in ITERATIVE_10 else 50


def default_step_size(epsilon: float, iterations: int) -> float:
    return max(2 * epsilon / iterations, 1 / 255)


@dataclass
class AttackSpec:
    variant: str = "PGD"
    epsilon: float = 16 / 255
    step_size: float | None = None
    iterations: int | None = None
    stabilization: str = "none"  # none | MI | NI | PI | window:k
    mu: float = 1.0
    alpha: float | None = None  # look-ahead factor; defaults to the step size
    targeted: bool = False
    target_class: int | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations is None:
            self.iterations = default_iterations(self.variant)
        if self.step_size is None:
            self.step_size = default_step_size(self.epsilon, max(self.iterations, 1))
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")

    @property
    def lookahead(self) -> float:
        return self.step_size if self.alpha is None else self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    def with_(self, **kw) -> "AttackSpec":
        return replace(self, **kw)


@dataclass
class AdversarialBatch:
    originals: torch.Tensor
    adversarials: torch.Tensor
    labels: torch.Tensor
    attack_id: str
    epsilon: float
    seed: int = 0
    per_iteration_success: list[float] | None = None
    names: list[str] | None = None

    def linf(self) -> torch.Tensor:
        return (self.adversarials - self.originals).abs().flatten(1).amax(1)

    def perturbations(self) -> torch.Tensor:
        return self.adversarials - self.originals

    def save(self, path: str | Path) -> Path:
        """Image directory (``orig/``, ``adv/`` PNGs) plus ``manifest.json``."""
        path = Path(path)
        names = self.names or [f"img{i:05d}" for i in range(len(self.labels))]
        for sub, imgs in (("orig", self.originals), ("adv", self.adversarials)):
            (path / sub).mkdir(parents=True, exist_ok=True)
            arr = quantize(imgs).mul(255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
            for n, a in zip(names, arr):
                Image.fromarray(a).save(path / sub / f"{n}.png")
        manifest = {
            "attack_id": self.attack_id,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "labels": dict(zip(names, self.labels.tolist())),
            "per_iteration_success": self.per_iteration_success,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AdversarialBatch":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        names = list(manifest["labels"])

        def read(sub):
            arr = np.stack([np.asarray(Image.open(path / sub / f"{n}.png")) for n in names])
            return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0

        return cls(read("orig"), read("adv"), torch.tensor([manifest["labels"][n] for n in names]),
                   manifest["attack_id"], manifest["epsilon"], manifest["seed"],
                   manifest["per_iteration_success"], names)


def project(x_candidate: torch.Tensor, x_original: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip into the L∞ ball of radius ``epsilon`` around ``x_original``, then into [0, 1]."""
    if x_candidate.shape != x_original.shape:
        raise ConfigError("candidate and original shapes differ")
    lo = (x_original - epsilon).clamp_min(0.0)
    hi = (x_original + epsilon).clamp_max(1.0)
    return torch.minimum(torch.maximum(x_candidate, lo), hi)


def per_image_generators(seed: int, indices) -> list[torch.Generator]:
    """One RNG stream per image, keyed by (seed, image index)."""
    gens = []
    for i in indices:
        key = hashlib.sha256(f"{seed}:{int(i)}".encode()).digest()
        gens.append(torch.Generator().manual_seed(int.from_bytes(key[:8], "little") & ((1 << 63) - 1)))
    return gens


# ----------------------------------------------------------------------------
# stabilization


def parse_stabilization(method) -> tuple[str, float | None]:
    if isinstance(method, int):
        return "window", float(method)
    m = str(method)
    if m in ("none", "MI", "NI", "PI"):
        return m, None
    if m.startswith("window"):
        arg = m.split(":", 1)[1] if ":" in m else m[m.index("(") + 1:m.index(")")]
        k = float("inf") if arg.strip() in ("inf", "∞") else float(int(arg))
        if k < 1:
            raise ConfigError("look-ahead window must be >= 1")
        return "window", k
    raise ConfigError(f"unknown stabilization {method!r}")


@dataclass(frozen=True)
class StabilizerState:
    """``accumulated`` is g_{i-1}; ``history`` the raw gradients added so far (oldest first)."""

    accumulated: torch.Tensor | None = None
    history: tuple = ()
    mu: float = 1.0


def _window_lookahead(history, k, mu):
    terms = history if k == float("inf") else history[-int(k):]
    la = None
    for h in terms:
        la = h if la is None else mu * la + h
    return la


def stabilized_gradient(method, state: StabilizerState, raw_grad_at: Callable, x: torch.Tensor,
                        alpha: float) -> tuple[torch.Tensor, StabilizerState]:
    """One stabilized update; returns ``(g_i, next_state)`` and leaves ``state`` untouched.

    MI looks back only; NI looks ahead along the accumulated gradient; PI along the
    single previous raw gradient; ``window:k`` along the momentum accumulation of
    the last ``k`` raw gradients (k=1 is PI, k=inf is NI).
    """
    kind, k = parse_stabilization(method)
    if kind == "none":
        return raw_grad_at(x), state
    if kind == "NI" and state.accumulated is not None:
        point = x + alpha * state.accumulated
    elif kind == "PI" and state.history:
        point = x + alpha * state.history[-1]
    elif kind == "window" and state.history:
        point = x + alpha * _window_lookahead(state.history, k, state.mu)
    else:
        point = x
    h = raw_grad_at(point)
    acc = torch.zeros_like(h) if state.accumulated is None else state.accumulated
    g = state.mu * acc + h
    keep = () if kind in ("MI", "NI") else state.history + (h,)
    if kind == "PI":
        keep = keep[-1:]
    elif kind == "window" and k != float("inf"):
        keep = keep[-int(k):]
    return g, StabilizerState(g, keep, state.mu)


def l1_normalized(provider: Callable) -> Callable:
    """Scale each sample's gradient to unit mean absolute value."""

    def wrapped(point):
        g = provider(point)
        scale = g.abs().flatten(1).mean(1).clamp_min(1e-20).view(-1, *([1] * (g.ndim - 1)))
        return g / scale

    return wrapped


def ce_provider(model: ModelHandle, labels, targeted=False) -> Callable:
    loss = CrossEntropy(labels, targeted=targeted)
    return lambda point: input_gradient(model, point, loss)


def _target_labels(spec, labels):
    if not spec.targeted:
        return labels
    if spec.target_class is None:
        raise ConfigError("targeted attack needs target_class")
    return torch.full_like(labels, int(spec.target_class))


def run_iterative_attack(spec: AttackSpec, model: ModelHandle, x: torch.Tensor, y: torch.Tensor,
                         grad_provider: Callable | None = None, probe: ModelHandle | None = None,
                         x_start: torch.Tensor | None = None, quantize_output: bool = True) -> AdversarialBatch:
    """Run ``spec.iterations`` projected sign steps.

    ``grad_provider`` maps a point to the raw ascent gradient; the default is
    cross-entropy on ``model`` (negated for targeted specs). With a ``probe``
    model the success rate after every iteration is recorded.
    """
    if spec.step_size <= 0:
        raise ConfigError("step size must be positive")
    if spec.iterations <= 0:
        raise ConfigError("iterations must be positive")
    if grad_provider is None:
        grad_provider = ce_provider(model, _target_labels(spec, y), spec.targeted)
    kind, _ = parse_stabilization(spec.stabilization)
    provider = grad_provider if kind == "none" else l1_normalized(grad_provider)
    state = StabilizerState(mu=spec.mu)
    x = x.detach()
    adv = x.clone() if x_start is None else x_start.detach().clone()
    curve = [] if probe is not None else None
    for i in range(spec.iterations):
        g, state = stabilized_gradient(spec.stabilization, state, provider, adv, spec.lookahead)
        if not torch.isfinite(g).all():
            raise AttackAborted(f"{spec.variant}: non-finite gradient at iteration {i}", i)
        adv = project(adv + spec.step_size * torch.sign(g), x, spec.epsilon)
        if probe is not None:
            curve.append((probe.predict(quantize(adv)) != y).float().mean().item())
    if quantize_output:
        adv = quantize(adv)
    return AdversarialBatch(x, adv, y.clone(), spec.variant, spec.epsilon, spec.seed, curve)


def run_pgd(spec: AttackSpec, model: ModelHandle, x, y, probe=None) -> AdversarialBatch:
    return run_iterative_attack(spec, model, x, y, probe=probe)
