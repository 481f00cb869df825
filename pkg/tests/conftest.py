import numpy as np
import pytest
import torch
from hypothesis import settings

from contrastmotion.geometry import PointCloud
from contrastmotion.network import ContrastMotionNet, ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

TINY = ModelConfig(pfe_hidden=8, d_pfe=6, enc_width=8, d=6, gate_width=4)


def random_cloud(rng, n=500, extent=8.0, zmax=2.0):
    pts = np.column_stack([rng.uniform(-extent, extent, (n, 2)), rng.uniform(0, zmax, n)])
    return PointCloud(pts)


def randomize(model: ContrastMotionNet, seed=0, bias=0.1):
    """Random weights and non-zero biases so no ReLU sits exactly on its kink."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            scale = bias if name.endswith("bias") else 0.5
            p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * scale)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    return randomize(ContrastMotionNet(TINY, seed=3).double(), seed=4)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(number: int, title: str, ok: bool, detail: str):
    line = "criterion %d %s: %s (%s)" % (number, "PASS" if ok else "FAIL", title, detail)
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
