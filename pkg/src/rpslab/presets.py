"""Embedded spec files for the worked examples."""

from __future__ import annotations

from .specparse import parse_system
from .system import SystemSpec

_NOISE3 = """[noise k=1] diag=1/2, 0, 0
[noise k=2] diag=0, 1/4, 0
[noise k=3] diag=0, 0, 1/3
"""

_LOOP3 = """[drift]
row=-8, 0, 0
row=1, -9, 0
row=0, 1, -10
"""

PRESETS = {
    "ex5_5": "# three-stage cooperative loop with the sharp envelope at lambda = 1\n"
             "[system] d=3 T=2pi\n" + _LOOP3 + _NOISE3
             + "[feedback] kind=othmer_tyson k0=1/12 K=3 m=3 lipschitz=exact\n"
               "[envelope] lambda=1 method=last_row\n",
    "goodwin": "# three-stage loop with repressive Goodwin feedback\n"
               "[system] d=3 T=2pi\n" + _LOOP3 + _NOISE3
               + "[feedback] kind=goodwin V=0.02 K=3 m=3\n",
    "othmer_tyson": "# three-stage loop with activating Othmer-Tyson feedback\n"
                    "[system] d=3 T=2pi\n" + _LOOP3 + _NOISE3
                    + "[feedback] kind=othmer_tyson k0=0.01 K=3 m=3\n",
    "competitive": "# three competing species with diagonal drift, period pi\n"
                   "[system] d=3 T=pi\n"
                   "[drift]\nrow=-4, 0, 0\nrow=0, -4, 0\nrow=0, 0, -4\n"
                   "[noise k=1] diag=0.5, 0, 0\n[noise k=2] diag=0, 0.5, 0\n"
                   "[noise k=3] diag=0, 0, 0.5\n"
                   "[feedback] kind=competitive K1=40 K2=45 K3=50 m=2\n",
}


def preset_text(name: str) -> str:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_preset(name: str) -> SystemSpec:
    return parse_system(preset_text(name), name=name)
