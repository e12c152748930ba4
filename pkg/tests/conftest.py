import pytest
import torch
import torch.nn as nn

from facemanifold.forensics import Detector
from facemanifold.synthesis import GeneratorConfig, StyleGenerator, freeze


def tiny_generator(seed=0, dtype=torch.float64, **overrides):
    kw = dict(d_z=6, d_w=5, mapping_depth=2, resolutions=(4, 8), feature_channels=(4, 3), channels=3)
    kw.update(overrides)
    torch.manual_seed(seed)
    gen = StyleGenerator(GeneratorConfig(**kw)).to(dtype)
    with torch.no_grad():
        for level in gen.levels:
            level.noise_gain.normal_(0, 0.5)
            level.bias.normal_(0, 0.1)
        gen.to_image.bias.normal_(0, 0.1)
    return freeze(gen)


class LinearProbe(nn.Module):
    """Detector stand-in with logit = sum(weight * x) + bias."""

    def __init__(self, weight, bias=0.0):
        super().__init__()
        self.weight = nn.Parameter(weight.clone(), requires_grad=False)
        self.bias = nn.Parameter(torch.tensor(float(bias), dtype=weight.dtype), requires_grad=False)

    def forward(self, x):
        return (x * self.weight).flatten(1).sum(1) + self.bias


def tiny_detector(arch="A", seed=0, resolution=8):
    torch.manual_seed(seed)
    det = Detector(arch, resolution).double()
    with torch.no_grad():
        for p in det.parameters():
            p.add_(0.2 * torch.randn_like(p))
    return freeze(det)


def zero_module(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


@pytest.fixture
def tiny_gen():
    return tiny_generator()


@pytest.fixture
def tiny_gen_config():
    return GeneratorConfig(d_z=6, d_w=5, mapping_depth=2, resolutions=(4, 8),
                           feature_channels=(4, 3), channels=3)


# -- acceptance summary ------------------------------------------------------
ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def report_criterion():
    """Record ``(passed, detail)`` for an acceptance criterion; printed at session end."""

    def record(number, title, passed, detail):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(
            f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
