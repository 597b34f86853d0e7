"""Train both traceback attributors on all 24 attacks and print the confusion summary.

    python demos/attribution_demo.py [--per-class 5]
"""

import argparse

from advtransfer.attacks import VARIANTS, craft
from advtransfer.attribution import build_traceback_dataset, train_image_classifier, train_misclass_svm
from advtransfer.reference import ReferenceSetup

ap = argparse.ArgumentParser()
ap.add_argument("--per-class", type=int, default=5)
ap.add_argument("--cache-dir", default=None)
args = ap.parse_args()

ref = ReferenceSetup(args.cache_dir, log=print)
ds = ref.eval_images(args.per_class)
ctx = ref.context()
sources = {v: (lambda v=v: craft(v, ctx, ds.images, ds.labels, 16 / 255)) for v in VARIANTS}
tb = build_traceback_dataset(sources)
_, rep = train_image_classifier(tb)
print(f"image attributor: attack accuracy {rep.accuracy:.3f}, category accuracy {rep.category_accuracy:.3f}")
for name, r in sorted(rep.per_attack_recall.items(), key=lambda kv: -kv[1]):
    print(f"  {name:6s} recall {r:.2f}")
for row in train_misclass_svm(tb, ref.target):
    flag = " (degenerate)" if row["degenerate"] else ""
    print(f"SVM top-{row['N']}: {row['accuracy']:.3f}{flag}")
