"""Perturbation generators trained against a frozen classifier.

Training clips the raw generator output to ``eps_train`` before the loss;
generation clips the same raw output to any ``eps_test``. Loss variants:

* ``GAP``  maximise CE of the frozen classifier.
* ``CDA``  relativistic CE: CE of (adv logits - clean logits), clean side detached.
* ``GAPF`` maximise the mean squared mid-layer feature displacement.
* ``BIA``  GAPF on channel-pooled features, inputs passed through a random
  per-step affine normalisation.
* ``TTP``  pull penultimate features of augmented adversarial images to the
  mean feature of target-class images; perturbations are Gaussian-smoothed
  before clipping. One generator per target class.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import quantize
from .engine import AdversarialBatch
from .errors import CheckpointError, ConfigError, TrainingFailure
from .models import LossSpec, ModelHandle

LOSSES = ("GAP", "CDA", "GAPF", "BIA", "TTP")


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, 1, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU(),
            nn.Conv2d(c, c, 3, 1, 1, bias=False), nn.BatchNorm2d(c),
        )

    def forward(self, x):
        return x + self.body(x)


class GeneratorNet(nn.Module):
    """3 stride-2 downsampling convs, 3 residual blocks, 3 upsampling convs."""

    def __init__(self, width: int = 16):
        super().__init__()
        c = width

        def down(a, b):
            return nn.Sequential(nn.Conv2d(a, b, 3, 2, 1, bias=False), nn.BatchNorm2d(b), nn.ReLU())

        def up(a, b):
            return nn.Sequential(nn.ConvTranspose2d(a, b, 4, 2, 1, bias=False), nn.BatchNorm2d(b), nn.ReLU())

        self.encoder = nn.Sequential(down(3, c), down(c, 2 * c), down(2 * c, 4 * c))
        self.blocks = nn.Sequential(*[_ResBlock(4 * c) for _ in range(3)])
        self.decoder = nn.Sequential(up(4 * c, 2 * c), up(2 * c, c), up(c, c))
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, x):
        return self.out(self.decoder(self.blocks(self.encoder(x * 2 - 1))))


@dataclass
class GenTrainConfig:
    loss: str = "GAP"
    eps_train: float = 10 / 255
    epochs: int = 3
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    layer: str = "conv3_x"
    width: int = 16
    ttp_target_class: int | None = None
    ttp_smooth_sigma: float = 1.0
    bia_shift: float = 0.1
    bia_scale: tuple[float, float] = (0.8, 1.2)
    fooling_floor: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown generator loss {self.loss!r}")
        if self.loss == "TTP" and self.ttp_target_class is None:
            raise ConfigError("TTP needs a target class")

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def gaussian_smooth(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    r = max(1, int(round(2 * sigma)))
    t = torch.arange(-r, r + 1, dtype=x.dtype)
    k = torch.exp(-t**2 / (2 * sigma**2))
    k = k / k.sum()
    c = x.shape[1]
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


class Generator:
    """A trained generator plus the config and surrogate it was trained against."""

    def __init__(self, net: GeneratorNet, cfg: GenTrainConfig, surrogate_tag: str = ""):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.cfg = cfg
        self.surrogate_tag = surrogate_tag

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        """Unbounded generator output (smoothed for TTP)."""
        with torch.no_grad():
            d = self.net(x)
        return gaussian_smooth(d, self.cfg.ttp_smooth_sigma) if self.cfg.loss == "TTP" else d

    def digest(self) -> str:
        h = hashlib.sha256(self.cfg.digest().encode())
        for v in self.net.state_dict().values():
            h.update(v.numpy().tobytes())
        return h.hexdigest()[:16]


def _clip_perturbation(delta, eps):
    return delta.clamp(-eps, eps)


def _random_normalize(x, gen, shift, scale):
    b = x.shape[0]
    m = (torch.rand(1, 3, 1, 1, generator=gen) * 2 - 1) * shift
    s = scale[0] + (scale[1] - scale[0]) * torch.rand(1, 3, 1, 1, generator=gen)
    return (x - 0.5) * s + 0.5 + m.expand(b, -1, -1, -1)


def _ttp_augment(x, gen):
    if torch.rand(1, generator=gen).item() < 0.5:
        x = x.flip(-1)
    dx, dy = torch.randint(-2, 3, (2,), generator=gen).tolist()
    xp = F.pad(x, (2, 2, 2, 2))
    h, w = x.shape[-2:]
    return xp[..., 2 - dy:2 - dy + h, 2 - dx:2 - dx + w]


def generator_objective(cfg: GenTrainConfig, disc: ModelHandle, x, x_adv, y, gen=None, target_mean=None):
    """Per-sample objective the generator maximises."""
    if cfg.loss == "GAP":
        return F.cross_entropy(disc(x_adv), y, reduction="none")
    if cfg.loss == "CDA":
        with torch.no_grad():
            clean = disc(x)
        return F.cross_entropy(disc(x_adv) - clean, y, reduction="none")
    if cfg.loss == "GAPF":
        _, fa = disc.forward_with_taps(x_adv, [cfg.layer])
        with torch.no_grad():
            _, fc = disc.forward_with_taps(x, [cfg.layer])
        return (fa[cfg.layer] - fc[cfg.layer]).pow(2).flatten(1).mean(1)
    if cfg.loss == "BIA":
        gen = gen or torch.Generator().manual_seed(0)
        state = gen.get_state()
        xa = _random_normalize(x_adv, gen, cfg.bia_shift, cfg.bia_scale)
        gen.set_state(state)
        xc = _random_normalize(x, gen, cfg.bia_shift, cfg.bia_scale)
        _, fa = disc.forward_with_taps(xa, [cfg.layer])
        with torch.no_grad():
            _, fc = disc.forward_with_taps(xc, [cfg.layer])
        return (fa[cfg.layer].mean(1) - fc[cfg.layer].mean(1)).pow(2).flatten(1).mean(1)
    # TTP
    if target_mean is None:
        raise ConfigError("TTP objective needs the target-class feature mean")
    xa = _ttp_augment(x_adv, gen) if gen is not None else x_adv
    return -(disc.net.penultimate(xa) - target_mean).pow(2).mean(1)


class GeneratorObjective(LossSpec):
    """Generator objective as a function of the adversarial image (for gradient checks)."""

    def __init__(self, cfg, x_clean, y, target_mean=None):
        self.cfg, self.x, self.y, self.target_mean = cfg, x_clean, torch.as_tensor(y), target_mean

    def __call__(self, model, x_adv):
        return generator_objective(self.cfg, model, self.x, x_adv, self.y, None, self.target_mean)


def target_feature_mean(disc: ModelHandle, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return disc.net.penultimate(images).mean(0)


def generator_step(net: GeneratorNet, opt, cfg: GenTrainConfig, disc: ModelHandle, x, y, gen=None,
                   target_mean=None) -> float:
    """One generator update against the frozen discriminator; returns the objective."""
    net.train()
    delta = net(x)
    if cfg.loss == "TTP":
        delta = gaussian_smooth(delta, cfg.ttp_smooth_sigma)
    x_adv = (x + _clip_perturbation(delta, cfg.eps_train)).clamp(0, 1)
    obj = generator_objective(cfg, disc, x, x_adv, y, gen, target_mean).mean()
    opt.zero_grad()
    (-obj).backward()
    opt.step()
    return obj.item()


def train_generator(cfg: GenTrainConfig, disc: ModelHandle, dataset, target_images=None) -> Generator:
    """Train a generator on ``dataset`` against the frozen ``disc``.

    ``target_images`` (TTP only) are images of ``cfg.ttp_target_class``.
    """
    before = disc.param_digest()
    torch.manual_seed(cfg.seed)
    net = GeneratorNet(cfg.width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    target_mean = None
    if cfg.loss == "TTP":
        if target_images is None:
            target_images = dataset.images[dataset.labels == cfg.ttp_target_class]
        if len(target_images) == 0:
            raise ConfigError(f"no images of target class {cfg.ttp_target_class}")
        target_mean = target_feature_mean(disc, target_images)
    history = []
    for _ in range(cfg.epochs):
        order = torch.randperm(len(dataset), generator=gen)
        for i in range(0, len(dataset), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            history.append(generator_step(net, opt, cfg, disc, dataset.images[idx], dataset.labels[idx],
                                          gen, target_mean))
    assert disc.param_digest() == before, "discriminator parameters drifted during generator training"
    out = Generator(net, cfg, disc.tag)
    out.history = history
    if cfg.fooling_floor is not None:
        rate = fooling_rate(out, disc, dataset.images[:512], dataset.labels[:512], cfg.eps_train)
        if rate < cfg.fooling_floor:
            raise TrainingFailure(f"fooling rate {rate:.3f} below floor {cfg.fooling_floor}",
                                  {"objective": history})
    return out


def generate(gen: Generator, x: torch.Tensor, y: torch.Tensor, eps_test: float, attack_id: str | None = None,
             quantize_output: bool = True) -> AdversarialBatch:
    """``clip01(x + clip(G(x), eps_test))`` in a single forward pass."""
    if not 0 < eps_test <= 1:
        raise ConfigError("eps_test must lie in (0, 1]")
    if x.ndim != 4 or x.shape[1] != 3:
        raise ConfigError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
    adv = (x + _clip_perturbation(gen.raw(x), eps_test)).clamp(0, 1)
    if quantize_output:
        adv = quantize(adv)
    return AdversarialBatch(x, adv, torch.as_tensor(y).clone(), attack_id or gen.cfg.loss, eps_test, gen.cfg.seed)


def fooling_rate(gen: Generator, model: ModelHandle, x, y, eps) -> float:
    adv = generate(gen, x, y, eps).adversarials
    return (model.predict(adv) != y).float().mean().item()


def perturbation_similarity(deltas: torch.Tensor) -> float:
    """Mean pairwise cosine similarity between flattened perturbations."""
    d = F.normalize(deltas.flatten(1).double(), dim=1)
    sim = d @ d.T
    n = len(d)
    if n < 2:
        return 1.0
    return ((sim.sum() - sim.diagonal().sum()) / (n * (n - 1))).item()


# ----------------------------------------------------------------------------
# persistence and sweeps


def save_generator(g: Generator, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = g.net.state_dict()
    (path / "params.bin").write_bytes(b"".join(v.numpy().astype("<f4" if v.is_floating_point() else "<i8").tobytes()
                                               for v in state.values()))
    manifest = {"config": g.cfg.to_dict(), "surrogate": g.surrogate_tag,
                "params": [{"name": k, "shape": list(v.shape), "float": v.is_floating_point()}
                           for k, v in state.items()]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_generator(path) -> Generator:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete generator checkpoint at {path}") from e
    cfg_d = manifest["config"]
    cfg_d["bia_scale"] = tuple(cfg_d["bia_scale"])
    cfg = GenTrainConfig(**cfg_d)
    net = GeneratorNet(cfg.width)
    state, off = {}, 0
    for e in manifest["params"]:
        dt = np.dtype("<f4" if e["float"] else "<i8")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = torch.from_numpy(np.frombuffer(blob, dt, n, off).reshape(e["shape"]).astype(dt.newbyteorder("=")))
        off += n * dt.itemsize
    net.load_state_dict(state)
    return Generator(net, cfg, manifest["surrogate"])


def cached_generator(cfg: GenTrainConfig, disc: ModelHandle, dataset, cache_dir=None, target_images=None) -> Generator:
    """Train, or reload from ``cache_dir`` keyed by (config, discriminator, dataset)."""
    if cache_dir is None:
        return train_generator(cfg, disc, dataset, target_images)
    key = hashlib.sha256(f"{cfg.digest()}:{disc.param_digest()}:{dataset.digest()}".encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"gen-{cfg.loss}-{key}"
    if (path / "manifest.json").exists():
        return load_generator(path)
    g = train_generator(cfg, disc, dataset, target_images)
    save_generator(g, path)
    return load_generator(path)


def eps_sweep(base: GenTrainConfig, disc: ModelHandle, train_set, eval_x, eval_y, target: ModelHandle,
              eps_train_list, eps_test_list, cache_dir=None) -> list[dict]:
    """Success-rate grid on ``target``: one generator per ``eps_train``, evaluated at each ``eps_test``."""
    rows = []
    for et in eps_train_list:
        g = cached_generator(replace(base, eps_train=float(et)), disc, train_set, cache_dir)
        for es in eps_test_list:
            adv = generate(g, eval_x, eval_y, float(es)).adversarials
            rows.append({"eps_train": float(et), "eps_test": float(es),
                         "success": (target.predict(adv) != eval_y).float().mean().item()})
    return rows
