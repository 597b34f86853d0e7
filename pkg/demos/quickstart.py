"""Craft a few transfer attacks on the reference surrogate and score them on the target.

    python demos/quickstart.py [--per-class 5]
"""

import argparse

from advtransfer.attacks import craft
from advtransfer.metrics import psnr, ssim
from advtransfer.reference import ReferenceSetup

ap = argparse.ArgumentParser()
ap.add_argument("--per-class", type=int, default=5)
ap.add_argument("--cache-dir", default=None)
args = ap.parse_args()

ref = ReferenceSetup(args.cache_dir, log=print)
ds = ref.eval_images(args.per_class)
ctx = ref.context(need=("augmentation",))
print(f"{len(ds)} images, surrogate -> {next(iter(ref.targets))}")
print(f"{'attack':8s} {'success':>8s} {'psnr':>7s} {'ssim':>6s}")
for variant in ("PGD", "MI", "DI", "VT", "Admix"):
    b = craft(variant, ctx, ds.images, ds.labels, 16 / 255)
    rate = (ref.target.predict(b.adversarials) != ds.labels).float().mean().item()
    print(f"{variant:8s} {rate:8.3f} {psnr(b.originals, b.adversarials):7.2f} {ssim(b.originals, b.adversarials):6.3f}")
