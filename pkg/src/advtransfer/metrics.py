"""Transferability, imperceptibility and interpretability measures.

Images are float tensors in [0, 1] shaped (B, 3, H, W) or (3, H, W).
Batch-level scores are means of per-image scores.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .errors import ConfigError, EmptyDatasetError
from .models import ModelHandle


def _batch(x):
    x = torch.as_tensor(x)
    return x[None] if x.ndim == 3 else x


def success_rate(predictions, labels) -> float:
    p, y = torch.as_tensor(predictions), torch.as_tensor(labels)
    if p.shape != y.shape:
        raise ConfigError("predictions and labels differ in length")
    if p.numel() == 0:
        raise EmptyDatasetError("success rate over zero images")
    return (p != y).double().mean().item()


# ----------------------------------------------------------------------------
# PSNR / SSIM


def psnr_per_image(x, x_adv) -> torch.Tensor:
    x, x_adv = _batch(x).double(), _batch(x_adv).double()
    mse = (x - x_adv).pow(2).flatten(1).mean(1)
    out = torch.full_like(mse, math.inf)
    nz = mse > 0
    out[nz] = 10 * torch.log10(1.0 / mse[nz])
    return out


def psnr(x, x_adv) -> float:
    """Mean PSNR (data range 1) over images; ``inf`` when every pair is identical.

    Identical pairs are left out of the mean when others are finite.
    """
    v = psnr_per_image(x, x_adv)
    finite = v[torch.isfinite(v)]
    return math.inf if len(finite) == 0 else finite.mean().item()


def _gaussian_window(size=11, sigma=1.5):
    t = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-t**2 / (2 * sigma**2))
    return g / g.sum()


def ssim_per_image(x, x_adv, size=11, sigma=1.5) -> torch.Tensor:
    x, y = _batch(x).double(), _batch(x_adv).double()
    c = x.shape[1]
    g = _gaussian_window(size, sigma)
    kh, kv = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1), g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def filt(z):
        return F.conv2d(F.conv2d(z, kh, groups=c), kv, groups=c)

    c1, c2 = 0.01**2, 0.03**2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return s.flatten(1).mean(1)


def ssim(x, x_adv) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over windows, channels and images."""
    return ssim_per_image(x, x_adv).mean().item()


# ----------------------------------------------------------------------------
# colour difference


_RGB_TO_XYZ = np.array([[0.412453, 0.357580, 0.180423],
                        [0.212671, 0.715160, 0.072169],
                        [0.019334, 0.119193, 0.950227]])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (..., 3) to CIE Lab, D65 white, 2 degree observer."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    return np.stack([116 * f[..., 1] - 16, 500 * (f[..., 0] - f[..., 1]), 200 * (f[..., 1] - f[..., 2])], -1)


def ciede2000(lab1: np.ndarray, lab2: np.ndarray, kL=1.0, kC=1.0, kH=1.0) -> np.ndarray:
    """Per-pair CIEDE2000 colour difference for Lab arrays shaped (..., 3)."""
    L1, a1, b1 = np.moveaxis(np.asarray(lab1, dtype=np.float64), -1, 0)
    L2, a2, b2 = np.moveaxis(np.asarray(lab2, dtype=np.float64), -1, 0)
    cbar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    g = 0.5 * (1 - np.sqrt(cbar**7 / (cbar**7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = c2p - c1p
    prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, dh)
    dh = np.where(dh < -180, dh + 360, dh)
    dh = np.where(prod == 0, 0.0, dh)
    dHp = 2 * np.sqrt(prod) * np.sin(np.radians(dh) / 2)

    Lbar = (L1 + L2) / 2
    Cbarp = (c1p + c2p) / 2
    hsum = h1p + h2p
    hbar = np.where(np.abs(h1p - h2p) > 180, np.where(hsum < 360, hsum + 360, hsum - 360), hsum) / 2
    hbar = np.where(prod == 0, hsum, hbar)
    t = (1 - 0.17 * np.cos(np.radians(hbar - 30)) + 0.24 * np.cos(np.radians(2 * hbar))
         + 0.32 * np.cos(np.radians(3 * hbar + 6)) - 0.20 * np.cos(np.radians(4 * hbar - 63)))
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    rc = 2 * np.sqrt(Cbarp**7 / (Cbarp**7 + 25.0**7))
    sl = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    sc = 1 + 0.045 * Cbarp
    sh = 1 + 0.015 * Cbarp * t
    rt = -np.sin(np.radians(2 * dtheta)) * rc
    tl, tc, th = dLp / (kL * sl), dCp / (kC * sc), dHp / (kH * sh)
    return np.sqrt(tl**2 + tc**2 + th**2 + rt * tc * th)


def delta_e_per_image(x, x_adv) -> torch.Tensor:
    x, y = _batch(x), _batch(x_adv)
    if x.shape[1] != 3 or y.shape[1] != 3:
        raise ConfigError("CIEDE2000 needs 3-channel sRGB images")
    lab1 = srgb_to_lab(x.permute(0, 2, 3, 1).double().numpy())
    lab2 = srgb_to_lab(y.permute(0, 2, 3, 1).double().numpy())
    de = ciede2000(lab1, lab2).reshape(len(x), -1)
    return torch.from_numpy(np.sqrt((de**2).mean(1)))


def delta_e2000(x, x_adv) -> float:
    """Per-pixel CIEDE2000, L2 norm over pixels divided by sqrt(pixel count), averaged over images."""
    return delta_e_per_image(x, x_adv).mean().item()


# ----------------------------------------------------------------------------
# feature-based


def lpips_per_image(x, x_adv, model: ModelHandle, layers) -> torch.Tensor:
    model.check_taps(layers)
    with torch.no_grad():
        _, fa = model.forward_with_taps(_batch(x), layers)
        _, fb = model.forward_with_taps(_batch(x_adv), layers)
    total = 0
    for k in layers:
        a = F.normalize(fa[k].double(), dim=1, eps=1e-10)
        b = F.normalize(fb[k].double(), dim=1, eps=1e-10)
        total = total + (1 - (a * b).sum(1)).flatten(1).mean(1)
    return total


def lpips(x, x_adv, model: ModelHandle, layers=("conv2_x", "conv3_x", "conv4_x")) -> float:
    """Sum over layers of the spatial mean of (1 - cosine) between unit channel vectors."""
    return lpips_per_image(x, x_adv, model, list(layers)).mean().item()


def _fid_from_stats(mu1, s1, mu2, s2):
    w1, v1 = np.linalg.eigh(s1)
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    m = root1 @ s2 @ root1
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0, None)).sum()
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_cross)


def fid_from_features(fa, fb, reg=1e-6) -> tuple[float, bool]:
    """FID between two feature sets (rows = samples).

    Returns ``(value, regularized)``; singular covariances get ``reg * I``.
    """
    fa = np.asarray(fa, dtype=np.float64).reshape(len(fa), -1)
    fb = np.asarray(fb, dtype=np.float64).reshape(len(fb), -1)
    if len(fa) < 2 or len(fb) < 2:
        raise ConfigError("FID needs at least two samples per set")
    mu1, mu2 = fa.mean(0), fb.mean(0)
    s1 = np.atleast_2d(np.cov(fa, rowvar=False))
    s2 = np.atleast_2d(np.cov(fb, rowvar=False))
    d = s1.shape[0]
    singular = min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= 1e-12 * max(1.0, np.trace(s1))
    if singular:
        s1, s2 = s1 + reg * np.eye(d), s2 + reg * np.eye(d)
    return max(_fid_from_stats(mu1, s1, mu2, s2), 0.0), bool(singular)


def fid(set_a, set_b, model: ModelHandle) -> tuple[float, bool]:
    """FID on penultimate pooled features of ``model``."""
    with torch.no_grad():
        fa = model.net.penultimate(_batch(set_a)).double().numpy()
        fb = model.net.penultimate(_batch(set_b)).double().numpy()
    return fid_from_features(fa, fb)


# ----------------------------------------------------------------------------
# KL, GradCAM, AI/AD


def kl_divergence(p, q) -> torch.Tensor:
    p, q = torch.as_tensor(p, dtype=torch.float64), torch.as_tensor(q, dtype=torch.float64)
    return torch.where(p > 0, p * (p.log() - q.log()), torch.zeros_like(p)).sum(-1)


def model_kl(f_s: ModelHandle, f_t: ModelHandle, images, single_class=False, labels=None) -> float:
    """Mean KL(softmax f_s || softmax f_t) over ``images`` (natural log).

    With ``single_class`` the two distributions are the binary (p_y, 1 - p_y)
    splits at the ground-truth class ``labels``.
    """
    images = _batch(images)
    if len(images) == 0:
        raise EmptyDatasetError("KL over zero images")
    p = F.softmax(f_s.logits(images).double(), 1)
    q = F.softmax(f_t.logits(images).double(), 1)
    if p.shape[1] != q.shape[1]:
        raise ConfigError("models have different class spaces")
    if single_class:
        if labels is None:
            raise ConfigError("single-class KL needs labels")
        y = torch.as_tensor(labels)[:, None]
        ps, qs = p.gather(1, y), q.gather(1, y)
        p, q = torch.cat([ps, 1 - ps], 1), torch.cat([qs, 1 - qs], 1)
    return kl_divergence(p, q).mean().clamp_min(0).item()


def gradcam(model: ModelHandle, x, classes, layer: str | None = None) -> torch.Tensor:
    """GradCAM saliency (B, H, W) in [0, 1] from the last stage (or ``layer``).

    Constant maps become all ones (all zeros when the constant is zero).
    """
    x = _batch(x)
    layer = layer or model.layer_names[-1]
    classes = torch.as_tensor(classes).reshape(-1).expand(len(x))
    with torch.enable_grad():
        logits, feats = model.forward_with_taps(x.detach().requires_grad_(True), [layer])
        a = feats[layer]
        (g,) = torch.autograd.grad(logits.gather(1, classes[:, None]).sum(), a)
    if a.ndim != 4:
        raise ConfigError(f"layer {layer!r} has no spatial map")
    w = g.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((w * a).sum(1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
    lo = cam.flatten(1).amin(1).view(-1, 1, 1)
    hi = cam.flatten(1).amax(1).view(-1, 1, 1)
    span = hi - lo
    flat = span <= 1e-12 * hi.abs().clamp_min(1e-30)
    normed = (cam - lo) / torch.where(flat, torch.ones_like(span), span)
    const = torch.where(hi > 0, torch.ones_like(cam), torch.zeros_like(cam))
    return torch.where(flat, const, normed)


def average_increase(p, o) -> float:
    """Percentage of images whose masked-image class probability ``o`` exceeds ``p``."""
    p, o = torch.as_tensor(p, dtype=torch.float64), torch.as_tensor(o, dtype=torch.float64)
    if p.numel() == 0:
        raise EmptyDatasetError("AI over zero images")
    return 100 * (p < o).double().mean().item()


def average_drop(p, o) -> float:
    """Mean relative class-probability loss ``[p - o]_+ / p`` in percent."""
    p, o = torch.as_tensor(p, dtype=torch.float64), torch.as_tensor(o, dtype=torch.float64)
    if p.numel() == 0:
        raise EmptyDatasetError("AD over zero images")
    if (p <= 0).any():
        raise ConfigError("AD needs positive class probabilities")
    return 100 * ((p - o).clamp_min(0) / p).mean().item()


def interpretability(model: ModelHandle, x, y) -> tuple[float, float]:
    """(AI, AD) of ``model`` with GradCAM soft masks on the ground-truth class."""
    x, y = _batch(x), torch.as_tensor(y)
    cam = gradcam(model, x, y)
    masked = x * cam[:, None]
    p = F.softmax(model.logits(x).double(), 1).gather(1, y[:, None])[:, 0]
    o = F.softmax(model.logits(masked).double(), 1).gather(1, y[:, None])[:, 0]
    return average_increase(p, o), average_drop(p, o)


def spearman(a, b) -> float:
    r = stats.spearmanr(a, b).statistic
    return float(r) if np.isfinite(r) else 0.0


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    attack_id: str
    success_rate: dict = field(default_factory=dict)  # "target/defense" -> fraction
    psnr: float | None = None
    ssim: float | None = None
    delta_e: float | None = None
    lpips: float | None = None
    fid: float | None = None
    fid_regularized: bool = False
    ai_pct: float | None = None
    ad_pct: float | None = None
    kl: float | None = None

    def to_row(self) -> dict:
        row = asdict(self)
        rates = row.pop("success_rate")
        row["psnr_infinite"] = self.psnr is not None and math.isinf(self.psnr)
        if row["psnr_infinite"]:
            row["psnr"] = None
        for k, v in sorted(rates.items()):
            row[f"success[{k}]"] = v
        return row


def imperceptibility(x, x_adv, feature_model: ModelHandle, lpips_layers=("conv2_x", "conv3_x", "conv4_x")) -> dict:
    f, reg = fid(x, x_adv, feature_model)
    return {"psnr": psnr(x, x_adv), "ssim": ssim(x, x_adv), "delta_e": delta_e2000(x, x_adv),
            "lpips": lpips(x, x_adv, feature_model, lpips_layers), "fid": f, "fid_regularized": reg}
