import numpy as np
import pytest

from rpslab.presets import PRESETS, load_preset
from rpslab.specparse import parse_system
from rpslab.wiener import Ensemble, GridSpec, sample_path


def scalar_text(alpha, sigma, h="0", T="1"):
    return (
        f"[system] d=1 T={T}\n"
        f"[drift]\nrow=-{alpha}\n"
        f"[noise k=1] diag={sigma}\n"
        f"[feedback] kind=custom\nexpr1={h}\n"
    )


def scalar_spec(alpha, sigma, h="0", T="1", **kw):
    return parse_system(scalar_text(alpha, sigma, h, T), **kw)


def grid(spec, seed, dt, periods_back=2, periods_fwd=3):
    P = round(spec.T / dt)
    dt = spec.T / P
    return sample_path(GridSpec(dt, -periods_back * P, periods_fwd * P, spec.d), seed)


@pytest.fixture(scope="session")
def presets():
    return {name: load_preset(name) for name in sorted(PRESETS)}


@pytest.fixture(scope="session")
def ex55():
    return load_preset("ex5_5")


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
