"""Differentiable classifiers with named feature taps.

Every reference network is a :class:`StagedNet`: an ordered set of named
stages followed by a global-average-pool + linear head. Feature taps are
stage outputs, so ``forward_from`` can resume a forward pass from any tap
(used by feature-space attribution).

Backward-pass refinements (SGM, LinBP) and the smooth-activation refinement
(IAA) are switches on :class:`Act` and :class:`BasicBlock`; they never need a
different architecture.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    ConfigError,
    TrainingFailure,
    UnknownTapError,
    UnsupportedArchitectureError,
    UnsupportedLossError,
)

torch.set_num_threads(1)


class _LinearBackwardReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clamp_min(0)

    @staticmethod
    def backward(ctx, grad):
        return grad


class _GradScale(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


class Act(nn.Module):
    """ReLU with refinement modes: ``relu``, ``linbp`` (linear in backward
    only) and ``softplus`` (``softplus(beta*x)/beta`` in both passes)."""

    def __init__(self):
        super().__init__()
        self.mode = "relu"
        self.beta = 15.0

    def forward(self, x):
        if self.mode == "relu":
            return F.relu(x)
        if self.mode == "linbp":
            return _LinearBackwardReLU.apply(x)
        if self.mode == "softplus":
            return F.softplus(x, beta=self.beta)
        raise ConfigError(f"unknown activation mode {self.mode!r}")

    def extra_repr(self):
        return f"mode={self.mode}"


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), Act())


class BasicBlock(nn.Module):
    """``act(skip_weight * shortcut(x) + grad_scale ⊙ residual(x))``.

    ``grad_scale`` only touches the backward pass (SGM).
    """

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.act1 = Act()
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act2 = Act()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()
        self.grad_scale = 1.0
        self.skip_weight = 1.0

    def forward(self, x):
        r = self.bn2(self.conv2(self.act1(self.bn1(self.conv1(x)))))
        if self.grad_scale != 1.0:
            r = _GradScale.apply(r, self.grad_scale)
        s = self.shortcut(x)
        if self.skip_weight != 1.0:
            s = self.skip_weight * s
        return self.act2(s + r)


class MeanDenoise(nn.Module):
    """Feature-denoising block: 3x3 mean filter, 1x1 conv, residual add."""

    def __init__(self, c):
        super().__init__()
        self.proj = nn.Conv2d(c, c, 1, bias=False)
        nn.init.zeros_(self.proj.weight)

    def forward(self, x):
        return x + self.proj(F.avg_pool2d(x, 3, 1, 1, count_include_pad=False))


class StagedNet(nn.Module):
    def __init__(self, stages: list[tuple[str, nn.Module]], feat_dim: int, num_classes: int,
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), pool=True):
        super().__init__()
        self.stages = nn.ModuleDict(stages)
        self.fc = nn.Linear(feat_dim, num_classes)
        self.pool = pool
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    @property
    def layer_names(self):
        return list(self.stages.keys())

    def head(self, h):
        if self.pool:
            h = h.mean(dim=(2, 3))
        return self.fc(h.flatten(1))

    def forward(self, x, taps=()):
        h = (x - self.mean) / self.std
        feats = {}
        for name, stage in self.stages.items():
            h = stage(h)
            if name in taps:
                feats[name] = h
        logits = self.head(h)
        return (logits, feats) if taps else logits

    def forward_from(self, name, h):
        """Resume the forward pass from the output of stage ``name``."""
        names = self.layer_names
        for later in names[names.index(name) + 1:]:
            h = self.stages[later](h)
        return self.head(h)

    def penultimate(self, x):
        h = (x - self.mean) / self.std
        for stage in self.stages.values():
            h = stage(h)
        return h.mean(dim=(2, 3)) if self.pool else h.flatten(1)


def _resnet(num_classes=10, width=16, denoise=False):
    w = width
    stages = [
        ("conv1_x", ConvBNAct(3, w)),
        ("conv2_x", BasicBlock(w, w)),
        ("conv3_x", BasicBlock(w, 2 * w, 2)),
        ("conv4_x", BasicBlock(2 * w, 4 * w, 2)),
        ("conv5_x", BasicBlock(4 * w, 4 * w, 2)),
    ]
    if denoise:
        stages[2] = ("conv3_x", nn.Sequential(BasicBlock(w, 2 * w, 2), MeanDenoise(2 * w)))
        stages[3] = ("conv4_x", nn.Sequential(BasicBlock(2 * w, 4 * w, 2), MeanDenoise(4 * w)))
    return StagedNet(stages, 4 * w, num_classes)


def _plain(num_classes=10, width=16):
    w = width
    stages = [
        ("conv1_x", ConvBNAct(3, w)),
        ("conv2_x", nn.Sequential(ConvBNAct(w, w), nn.MaxPool2d(2))),
        ("conv3_x", nn.Sequential(ConvBNAct(w, 2 * w), nn.MaxPool2d(2))),
        ("conv4_x", nn.Sequential(ConvBNAct(2 * w, 4 * w), nn.MaxPool2d(2))),
        ("conv5_x", ConvBNAct(4 * w, 4 * w)),
    ]
    return StagedNet(stages, 4 * w, num_classes)


def _mlp(num_classes=3, in_dim=12, hidden=8):
    """Two-layer perceptron on tiny (C, H, W) inputs; for hand-checkable gradients."""
    stages = [("flat", nn.Flatten()), ("fc1", nn.Linear(in_dim, hidden)), ("hidden", Act())]
    return StagedNet(stages, hidden, num_classes, mean=(0.0,), std=(1.0,), pool=False)


ARCHITECTURES = {
    "resnet": _resnet,
    "plain": _plain,
    "resnet_fd": lambda **kw: _resnet(denoise=True, **kw),
    "mlp": _mlp,
}


def _preprocessing_of(net: StagedNet):
    return {"mean": net.mean.flatten().tolist(), "std": net.std.flatten().tolist(), "range": [0.0, 1.0]}


class ModelHandle:
    """Classifier plus its metadata. Treat as immutable once built: every
    transformation (refinement, training) returns a new handle."""

    def __init__(self, net: StagedNet, architecture_id: str, arch_kwargs: dict | None = None,
                 num_classes: int | None = None, tag: str = ""):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.architecture_id = architecture_id
        self.arch_kwargs = dict(arch_kwargs or {})
        self.num_classes = num_classes or net.fc.out_features
        self.tag = tag or architecture_id

    @classmethod
    def build(cls, architecture_id: str, seed: int = 0, tag: str = "", **arch_kwargs) -> "ModelHandle":
        if architecture_id not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {architecture_id!r}")
        torch.manual_seed(seed)
        net = ARCHITECTURES[architecture_id](**arch_kwargs)
        return cls(net, architecture_id, arch_kwargs, tag=tag)

    @property
    def layer_names(self) -> list[str]:
        return self.net.layer_names

    @property
    def preprocessing(self) -> dict:
        return _preprocessing_of(self.net)

    def __call__(self, x):
        return self.net(x)

    def __repr__(self):
        return f"ModelHandle({self.tag!r}, arch={self.architecture_id}, classes={self.num_classes})"

    def check_taps(self, taps):
        for t in taps:
            if t not in self.net.stages:
                raise UnknownTapError(f"unknown tap {t!r}; available: {self.layer_names}")

    def forward_with_taps(self, x, taps=()):
        self.check_taps(taps)
        if not taps:
            return self.net(x), {}
        return self.net(x, taps=tuple(taps))

    @torch.no_grad()
    def logits(self, x, batch_size=256):
        return torch.cat([self.net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def predict(self, x, batch_size=256):
        return self.logits(x, batch_size).argmax(1)

    def accuracy(self, ds) -> float:
        return (self.predict(ds.images) == ds.labels).float().mean().item()

    def param_digest(self) -> str:
        h = hashlib.sha256(self.architecture_id.encode())
        for k, v in self.net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        for m in self.net.modules():
            if isinstance(m, Act):
                h.update(f"{m.mode}{m.beta}".encode())
            if isinstance(m, BasicBlock):
                h.update(f"{m.grad_scale}{m.skip_weight}".encode())
        return h.hexdigest()[:16]

    def copy(self, tag=None) -> "ModelHandle":
        return ModelHandle(copy.deepcopy(self.net), self.architecture_id, self.arch_kwargs,
                           self.num_classes, tag or self.tag)

    def double(self) -> "ModelHandle":
        h = self.copy()
        h.net.double()
        return h


# ----------------------------------------------------------------------------
# losses and input gradients


class LossSpec:
    """A differentiable objective ``loss(model, x) -> (B,)`` that attacks ascend."""

    differentiable = True

    def __call__(self, model: ModelHandle, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class CrossEntropy(LossSpec):
    def __init__(self, labels, targeted=False):
        self.labels = torch.as_tensor(labels)
        self.targeted = targeted

    def __call__(self, model, x):
        loss = F.cross_entropy(model(x), self.labels, reduction="none")
        return -loss if self.targeted else loss


class DetachedLogitLoss(LossSpec):
    """Label logit computed without a graph; constant in x."""

    def __init__(self, labels):
        self.labels = torch.as_tensor(labels)

    def __call__(self, model, x):
        with torch.no_grad():
            return model(x).gather(1, self.labels[:, None]).squeeze(1)


def input_gradient(model: ModelHandle, x: torch.Tensor, loss: LossSpec) -> torch.Tensor:
    """Gradient of ``loss(model, x).sum()`` with respect to ``x``."""
    if not isinstance(loss, LossSpec) or not loss.differentiable:
        raise UnsupportedLossError(f"not a differentiable loss spec: {loss!r}")
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        value = loss(model, x)
        if not torch.is_tensor(value) or not value.is_floating_point():
            raise UnsupportedLossError(f"loss {loss!r} did not return a float tensor")
        if not value.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(value.sum(), x, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


# ----------------------------------------------------------------------------
# surrogate refinement


@dataclass
class RefinementConfig:
    kind: str = "identity"  # SGM | LinBP | IAA | identity
    gamma: float = 0.5
    linbp_start: str = "conv4_x"
    beta: float = 15.0
    skip_weights: list[float] | float = 1.0


def apply_refinement(model: ModelHandle, cfg: RefinementConfig) -> ModelHandle:
    out = model.copy(tag=f"{model.tag}+{cfg.kind}")
    blocks = [m for m in out.net.modules() if isinstance(m, BasicBlock)]
    if cfg.kind == "identity":
        return out
    if cfg.kind == "SGM":
        if not 0 < cfg.gamma <= 1:
            raise ConfigError("SGM gamma must lie in (0, 1]")
        if not blocks:
            raise UnsupportedArchitectureError(f"SGM needs skip connections; {model.architecture_id} has none")
        for b in blocks:
            b.grad_scale = float(cfg.gamma)
        return out
    if cfg.kind == "LinBP":
        names = out.layer_names
        if cfg.linbp_start not in names:
            raise UnknownTapError(f"unknown LinBP start {cfg.linbp_start!r}")
        for name in names[names.index(cfg.linbp_start):]:
            for m in out.net.stages[name].modules():
                if isinstance(m, Act):
                    m.mode = "linbp"
        return out
    if cfg.kind == "IAA":
        if cfg.beta <= 0:
            raise ConfigError("IAA beta must be positive")
        for m in out.net.modules():
            if isinstance(m, Act):
                m.mode, m.beta = "softplus", float(cfg.beta)
        weights = cfg.skip_weights
        if not isinstance(weights, (list, tuple)):
            weights = [weights] * len(blocks)
        if len(weights) != len(blocks):
            raise ConfigError(f"need {len(blocks)} skip weights, got {len(weights)}")
        for b, w in zip(blocks, weights):
            b.skip_weight = float(w)
        return out
    raise ConfigError(f"unknown refinement kind {cfg.kind!r}")


# ----------------------------------------------------------------------------
# training recipes


@dataclass
class TrainRecipe:
    kind: str = "standard"  # standard | pgd_adversarial | distilled
    arch: str = "resnet"
    arch_kwargs: dict = field(default_factory=dict)
    epochs: int = 8
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    # pgd_adversarial
    norm: str = "Linf"
    epsilon: float = 8 / 255
    pgd_steps: int = 5
    pgd_step_size: float | None = None
    # distilled
    augmentation: str = "none"  # none | cutmix | crop_flip
    temperature: float = 1.0
    # acceptance floors (None disables)
    accuracy_floor: float | None = None
    robust_floor: float | None = None

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _pgd_train_batch(model_net, x, y, recipe, gen):
    """Untargeted PGD against a model in train mode's eval twin, for adversarial training."""
    step = recipe.pgd_step_size or 2.5 * recipe.epsilon / recipe.pgd_steps
    was_training = model_net.training
    model_net.eval()
    if recipe.norm == "Linf":
        delta = (torch.rand(x.shape, generator=gen) * 2 - 1) * recipe.epsilon
    else:
        delta = torch.zeros_like(x)
    for _ in range(recipe.pgd_steps):
        delta.requires_grad_(True)
        loss = F.cross_entropy(model_net((x + delta).clamp(0, 1)), y)
        (g,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            if recipe.norm == "Linf":
                delta = (delta + step * g.sign()).clamp(-recipe.epsilon, recipe.epsilon)
            else:
                gn = g.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
                delta = delta + step * g / gn
                dn = delta.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
                delta = delta * (recipe.epsilon / dn.clamp_min(recipe.epsilon))
            delta = (x + delta).clamp(0, 1) - x
    model_net.train(was_training)
    return (x + delta).detach()


def _cutmix(x, gen):
    n, _, h, w = x.shape
    perm = torch.randperm(n, generator=gen)
    lam = torch.rand(1, generator=gen).item()
    cut = math.sqrt(1 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy = int(torch.randint(h, (1,), generator=gen))
    cx = int(torch.randint(w, (1,), generator=gen))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, h)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, w)
    out = x.clone()
    out[:, :, y0:y1, x0:x1] = x[perm, :, y0:y1, x0:x1]
    return out


def _crop_flip(x, gen, pad=4):
    """Random zero-pad crop plus horizontal flip, one draw per batch element."""
    n, _, h, w = x.shape
    xp = F.pad(x, (pad, pad, pad, pad))
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=gen).tolist()
    flips = (torch.rand(n, generator=gen) < 0.5).tolist()
    out = torch.stack([xp[i, :, a:a + h, b:b + w] for i, (a, b) in enumerate(offs)])
    return torch.where(torch.tensor(flips).view(-1, 1, 1, 1), out.flip(-1), out)


def train_reference_model(recipe: TrainRecipe, train, val=None, teacher: ModelHandle | None = None,
                          tag: str = "") -> ModelHandle:
    """Train a classifier from scratch per ``recipe`` (single worker, bitwise reproducible).

    ``train``/``val`` are :class:`~advtransfer.data.ImageSet` objects.
    """
    if int(train.labels.min()) < 0:
        raise ConfigError("labels must be non-negative")
    num_classes = int(recipe.arch_kwargs.get("num_classes", int(train.labels.max()) + 1))
    if int(train.labels.max()) >= num_classes:
        raise ConfigError("labels exceed num_classes")
    if recipe.kind == "distilled" and teacher is None:
        raise ConfigError("distilled recipe needs a teacher")
    if recipe.kind not in ("standard", "pgd_adversarial", "distilled"):
        raise ConfigError(f"unknown recipe kind {recipe.kind!r}")

    torch.manual_seed(recipe.seed)
    kwargs = dict(recipe.arch_kwargs)
    kwargs.setdefault("num_classes", num_classes)
    net = ARCHITECTURES[recipe.arch](**kwargs)
    gen = torch.Generator().manual_seed(recipe.seed)
    opt = torch.optim.Adam(net.parameters(), lr=recipe.lr)
    steps_per_epoch = math.ceil(len(train) / recipe.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, recipe.lr, total_steps=recipe.epochs * steps_per_epoch)
    curves = {"loss": [], "val_acc": []}
    for _ in range(recipe.epochs):
        net.train()
        order = torch.randperm(len(train), generator=gen)
        total = 0.0
        for i in range(0, len(train), recipe.batch_size):
            idx = order[i:i + recipe.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if recipe.augmentation == "crop_flip":
                x = _crop_flip(x, gen)
            if recipe.kind == "pgd_adversarial":
                x = _pgd_train_batch(net, x, y, recipe, gen)
                loss = F.cross_entropy(net(x), y)
            elif recipe.kind == "distilled":
                if recipe.augmentation == "cutmix":
                    x = _cutmix(x, gen)
                elif recipe.augmentation not in ("none", "crop_flip"):
                    raise ConfigError(f"unknown augmentation {recipe.augmentation!r}")
                with torch.no_grad():
                    soft = F.softmax(teacher(x) / recipe.temperature, dim=1)
                logp = F.log_softmax(net(x) / recipe.temperature, dim=1)
                loss = F.kl_div(logp, soft, reduction="batchmean") * recipe.temperature**2
            else:
                loss = F.cross_entropy(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        curves["loss"].append(total / len(train))
        if val is not None:
            net.eval()
            with torch.no_grad():
                curves["val_acc"].append((net(val.images).argmax(1) == val.labels).float().mean().item())
    handle = ModelHandle(net, recipe.arch, kwargs, tag=tag or f"{recipe.arch}-{recipe.kind}")
    handle.curves = curves
    check = val if val is not None else train
    if recipe.accuracy_floor is not None:
        acc = handle.accuracy(check)
        if acc < recipe.accuracy_floor:
            raise TrainingFailure(f"accuracy {acc:.3f} below floor {recipe.accuracy_floor}", curves)
    if recipe.robust_floor is not None:
        rob = robust_accuracy(handle, check, recipe.epsilon, norm=recipe.norm)
        curves["robust_acc"] = rob
        if rob < recipe.robust_floor:
            raise TrainingFailure(f"robust accuracy {rob:.3f} below floor {recipe.robust_floor}", curves)
    return handle


def robust_accuracy(model: ModelHandle, ds, epsilon: float, steps: int = 10, norm: str = "Linf") -> float:
    """Accuracy under the framework's own untargeted PGD (L∞ via the attack
    engine; L2 via the training-time projected step)."""
    if norm == "Linf":
        from .engine import AttackSpec, run_pgd

        spec = AttackSpec(variant="PGD", epsilon=epsilon, iterations=steps, step_size=2.5 * epsilon / steps)
        adv = run_pgd(spec, model, ds.images, ds.labels).adversarials
    else:
        recipe = TrainRecipe(norm=norm, epsilon=epsilon, pgd_steps=steps)
        gen = torch.Generator().manual_seed(0)
        with torch.enable_grad():
            net = copy.deepcopy(model.net)
            for p in net.parameters():
                p.requires_grad_(False)
            adv = _pgd_train_batch(net, ds.images, ds.labels, recipe, gen)
    return (model.predict(adv) == ds.labels).float().mean().item()


# ----------------------------------------------------------------------------
# checkpoints


def save_model(model: ModelHandle, path: str | Path) -> Path:
    """Directory checkpoint: ``manifest.json`` + raw little-endian float32 ``params.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    manifest = {
        "architecture_id": model.architecture_id,
        "arch_kwargs": model.arch_kwargs,
        "tag": model.tag,
        "num_classes": model.num_classes,
        "layer_names": model.layer_names,
        "preprocessing": model.preprocessing,
        "params": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                   for k, v in state.items()],
    }
    blobs = []
    for v in state.values():
        arr = v.detach().cpu().numpy()
        blobs.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_model(path: str | Path, architecture_id: str | None = None) -> ModelHandle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e}") from e
    arch = manifest["architecture_id"]
    if architecture_id is not None and arch != architecture_id:
        raise CheckpointError(f"checkpoint holds {arch!r}, expected {architecture_id!r}")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture {arch!r}")
    net = ARCHITECTURES[arch](**manifest["arch_kwargs"])
    state = net.state_dict()
    offset = 0
    new_state = {}
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in state or list(state[name].shape) != entry["shape"]:
            raise CheckpointError(f"parameter {name!r} has unexpected shape {entry['shape']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if offset + count * dtype.itemsize > len(blob):
            raise CheckpointError(f"parameter blob truncated at {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        offset += count * dtype.itemsize
        new_state[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="))).clone()
    if offset != len(blob) or set(new_state) != set(state):
        raise CheckpointError("parameter blob does not match the manifest")
    net.load_state_dict(new_state)
    return ModelHandle(net, arch, manifest["arch_kwargs"], manifest["num_classes"], manifest.get("tag", ""))
