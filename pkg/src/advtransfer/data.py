"""Image sets, the procedural desk dataset, and on-disk ingestion.

Images live in memory as float32 tensors in [0, 1] with shape (N, 3, H, W)
and are always on the 8-bit grid (``k / 255``).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, EmptyDatasetError, MissingLabelError

CLASS_NAMES = (
    "disc",
    "square",
    "triangle",
    "ring",
    "cross",
    "hstripes",
    "vstripes",
    "checker",
    "diagonal",
    "dots",
)


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round to the nearest 8-bit level."""
    return torch.round(x.clamp(0.0, 1.0) * 255.0) / 255.0


@dataclass
class ImageSet:
    images: torch.Tensor
    labels: torch.Tensor
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if not self.names:
            self.names = [f"img{i:05d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageSet(self.images[idx], self.labels[idx], [self.names[i] for i in idx.tolist()])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(quantize(self.images).mul(255).to(torch.uint8).numpy().tobytes())
        h.update(self.labels.numpy().astype(np.int64).tobytes())
        return h.hexdigest()[:16]

    def per_class(self, k: int, seed: int) -> "ImageSet":
        """Seeded selection of up to ``k`` images per class."""
        rng = np.random.default_rng(seed)
        keep = []
        for c in sorted(set(self.labels.tolist())):
            idx = np.flatnonzero(self.labels.numpy() == c)
            keep.extend(sorted(rng.permutation(idx)[:k].tolist()))
        return self.subset(keep)


def _draw_shape(canvas, label, rng, size):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.18, 0.3) * size
    if label == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif label == 1:
        mask = (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    elif label == 2:
        top = cy - r
        mask = (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) * 0.6)
    elif label == 3:
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = (d <= r) & (d >= r * 0.55)
    elif label == 4:
        t = r * 0.3
        mask = ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)) | (
            (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r)
        )
    elif label in (5, 6, 7):
        box = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        period = int(rng.integers(3, 5))
        if label == 5:
            pat = (yy.astype(int) // period) % 2 == 0
        elif label == 6:
            pat = (xx.astype(int) // period) % 2 == 0
        else:
            pat = ((yy.astype(int) // period) + (xx.astype(int) // period)) % 2 == 0
        mask = box & pat
    elif label == 8:
        t = r * 0.28
        sgn = rng.choice([-1.0, 1.0])
        dist = np.abs((yy - cy) - sgn * (xx - cx)) / np.sqrt(2.0)
        mask = (dist <= t) & (np.abs(xx - cx) <= r * 1.2)
    else:
        rr = r * 0.4
        off = r * 0.7
        mask = np.zeros((h, w), dtype=bool)
        for sy, sx in ((-1, -1), (1, 1)):
            mask |= (yy - (cy + sy * off)) ** 2 + (xx - (cx + sx * off)) ** 2 <= rr**2
    return mask


def make_shapes(n: int, seed: int = 0, size: int = 32, num_classes: int = 10) -> ImageSet:
    """Procedural 10-class colour-shape dataset (balanced, 8-bit quantized)."""
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = np.empty((n, 3, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    for i, lab in enumerate(labels):
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        t = rng.uniform(-1, 1, size=2)
        ramp = (t[0] * (yy - 0.5) + t[1] * (xx - 0.5) + 0.5).clip(0, 1)
        bg = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
        bg = bg + rng.normal(0, 0.03, size=bg.shape)
        fg = rng.uniform(0, 1, size=3)
        # keep the foreground visibly apart from the background mean
        while np.abs(fg - bg.mean(axis=(1, 2))).max() < 0.35:
            fg = rng.uniform(0, 1, size=3)
        mask = _draw_shape(bg, int(lab), rng, size)
        img = np.where(mask[None], fg[:, None, None], bg)
        # per-image sensor noise so that random perturbations stay in-distribution
        imgs[i] = img + rng.normal(0, rng.uniform(0, 0.08), size=img.shape)
    images = quantize(torch.from_numpy(imgs))
    return ImageSet(images, torch.from_numpy(labels.astype(np.int64)))


def save_image_dir(ds: ImageSet, path: str | Path) -> Path:
    """Write PNGs plus ``labels.csv`` (name,label)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = quantize(ds.images).mul(255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    with open(path / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "label"])
        for name, img, lab in zip(ds.names, arr, ds.labels.tolist()):
            Image.fromarray(img).save(path / f"{name}.png")
            writer.writerow([f"{name}.png", lab])
    return path


def _resize_crop(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    scale = size / min(w, h)
    if scale != 1.0:
        img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    return img.crop((left, top, left + size, top + size))


def ingest_dataset(
    path: str | Path,
    label_file: str | Path | None = None,
    size: int = 32,
    models=(),
    per_class: int | None = None,
    seed: int = 0,
) -> tuple[ImageSet, dict]:
    """Load an image directory, resize+center-crop to ``size``, and keep only
    images every model in ``models`` classifies correctly.

    Returns the dataset and a small report with the filtered counts.
    """
    path = Path(path)
    label_file = Path(label_file) if label_file else path / "labels.csv"
    files = sorted(p for p in path.glob("*") if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not files:
        raise EmptyDatasetError(f"no images found in {path}")
    labels = {}
    if label_file.exists():
        with open(label_file) as fh:
            for row in csv.DictReader(fh):
                labels[row["name"]] = int(row["label"])
    imgs, labs, names = [], [], []
    for f in files:
        if f.name not in labels:
            raise MissingLabelError(f"no label for image {f.name}")
        im = _resize_crop(Image.open(f).convert("RGB"), size)
        imgs.append(torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1))
        labs.append(labels[f.name])
        names.append(f.stem)
    ds = ImageSet(quantize(torch.stack(imgs)), torch.tensor(labs), names)
    report = {"loaded": len(ds)}
    if models:
        keep = torch.ones(len(ds), dtype=torch.bool)
        for m in models:
            keep &= m.predict(ds.images) == ds.labels
        ds = ds.subset(torch.nonzero(keep).flatten())
    report["correct_by_all"] = len(ds)
    if per_class is not None:
        ds = ds.per_class(per_class, seed)
    report["selected"] = len(ds)
    return ds, report
