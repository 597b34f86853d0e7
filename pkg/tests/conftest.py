import os
from pathlib import Path

import pytest
import torch

from advtransfer.models import ModelHandle, StagedNet

CACHE = Path(os.environ.get("ADVTRANSFER_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "advtransfer"))


@pytest.fixture(scope="session")
def ref():
    from advtransfer.reference import ReferenceSetup

    return ReferenceSetup(CACHE)


@pytest.fixture(scope="session")
def tiny_resnet():
    """Untrained small residual net; enough for shape and gradient contracts."""
    return ModelHandle.build("resnet", seed=0, width=4)


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.round(torch.rand(4, 3, 32, 32, generator=g) * 255) / 255


def toy_conv_net(weight, head, relu=False):
    """One 1x1 conv stage (3 -> C channels) + pooled linear head; identity normalisation."""
    conv = torch.nn.Conv2d(3, weight.shape[0], 1, bias=False)
    conv.weight.data = weight.view(weight.shape[0], 3, 1, 1).clone()
    stage = torch.nn.Sequential(conv, torch.nn.ReLU()) if relu else conv
    net = StagedNet([("conv1_x", stage)], weight.shape[0], head.shape[0], mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    net.fc.weight.data = head.clone()
    net.fc.bias.data.zero_()
    return ModelHandle(net, "toy")


def fd_relative_error(model, loss, x, coords=20, h=1e-6, seed=0):
    """Central finite differences against autograd on ``coords`` random input coordinates.

    Pass a float64 model and float64 inputs for a meaningful comparison.
    """
    from advtransfer.models import input_gradient

    m = model
    ad = input_gradient(m, x, loss).flatten()
    idx = torch.randperm(x.numel(), generator=torch.Generator().manual_seed(seed))[:coords]
    fd = torch.empty(coords, dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx.tolist()):
            e = torch.zeros(x.numel(), dtype=x.dtype)
            e[i] = h
            e = e.view_as(x)
            fd[j] = (loss(m, x + e).sum() - loss(m, x - e).sum()) / (2 * h)
    return ((fd - ad[idx]).norm() / ad[idx].norm().clamp_min(1e-30)).item()


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
