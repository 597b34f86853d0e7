"""Desk-scale framework for crafting, defending against, measuring and tracing
transferable adversarial images."""

__version__ = "0.1.0"

from .attacks import CATEGORIES, VARIANTS, AttackContext, craft  # noqa: E402
from .data import ImageSet, make_shapes  # noqa: E402
from .engine import AdversarialBatch, AttackSpec, run_iterative_attack  # noqa: E402
from .models import ModelHandle  # noqa: E402

__all__ = ["AdversarialBatch", "AttackContext", "AttackSpec", "CATEGORIES", "ImageSet", "ModelHandle",
           "VARIANTS", "craft", "make_shapes", "run_iterative_attack", "__version__"]
