"""Reader for the line-oriented system description format.

Example::

    # stochastic Othmer-Tyson loop
    [system] d=3 T=2pi
    [drift]
    row=-8, 0, 0
    row=1, -9, 0
    row=0, 1, -10
    [noise k=1] diag=1/2, 0, 0
    [noise k=2] diag=0, 1/4, 0
    [noise k=3] diag=0, 0, 1/3
    [feedback] kind=othmer_tyson k0=1/12 K=3 m=3

Key/value pairs may follow a section header on the same line, where each
value runs up to the next ``key=``, or stand on their own line.
Real values accept scientific notation, ``pi``/``2pi`` style multiples and
constant arithmetic such as ``1/12``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprError, parse_expr, eval_expr
from .system import (
    SpecError,
    SystemSpec,
    competitive_feedback,
    custom_feedback,
    goodwin_feedback,
    othmer_tyson_feedback,
)

__all__ = ["parse_system", "parse_real", "SpecError"]

_HEADER_RE = re.compile(r"\[\s*([A-Za-z_]+)((?:\s+[A-Za-z_]\w*=[^\s\]]+)*)\s*\]")
_PAIR_RE = re.compile(r"([A-Za-z_]\w*)\s*=\s*(.*)")
_INLINE_KEY_RE = re.compile(r"(?:^|\s)([A-Za-z_]\w*)\s*=")

SECTION_KEYS = {
    "system": {"d", "T"},
    "drift": {"row"},
    "noise": {"diag"},
    "envelope": {"lambda", "method"},
}
FEEDBACK_KEYS = {
    "goodwin": {"V", "K", "m"},
    "othmer_tyson": {"k0", "K", "m", "lipschitz"},
    "competitive": {"m"},
    "custom": set(),
}


@dataclass
class _Entry:
    value: str
    line: int
    col: int


@dataclass
class _Section:
    name: str
    line: int
    args: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)

    def get(self, key):
        hits = [e for k, e in self.entries if k == key]
        if len(hits) > 1:
            raise SpecError(f"duplicate key {key!r} in [{self.name}]", hits[1].line, hits[1].col)
        return hits[0] if hits else None

    def require(self, key):
        entry = self.get(key)
        if entry is None:
            raise SpecError(f"missing key {key!r} in [{self.name}]", self.line)
        return entry


_IMPLICIT_PI_RE = re.compile(r"(\d\.?)\s*(?=pi\b)")


def parse_real(text: str, line: int | None = None, col: int | None = None) -> float:
    """Parse a real literal: number, ``pi`` multiple (``2pi``) or constant expression."""
    s = text.strip()
    m = re.fullmatch(r"([+-]?(?:\d+\.?\d*|\.\d+)?)\s*pi", s)
    if m:
        coef = {"": 1.0, "+": 1.0, "-": -1.0}.get(m.group(1))
        return (float(m.group(1)) if coef is None else coef) * math.pi
    try:
        # a number written directly before pi is an implicit product
        e = parse_expr(_IMPLICIT_PI_RE.sub(r"\1*", s), 1)
    except ExprError as exc:
        raise SpecError(f"invalid real {s!r}: {exc}", line, col) from exc
    if e.variables():
        raise SpecError(f"real value {s!r} must not reference variables", line, col)
    try:
        return float(eval_expr(e, 0.0, [0.0]))
    except ExprError as exc:
        raise SpecError(f"invalid real {s!r}: {exc}", line, col) from exc


def _parse_int(entry: _Entry, what: str) -> int:
    try:
        return int(entry.value.strip())
    except ValueError:
        raise SpecError(f"{what} must be an integer, got {entry.value!r}", entry.line, entry.col)


def _parse_vector(entry: _Entry, d: int, what: str) -> np.ndarray:
    parts = [p for p in entry.value.split(",")]
    if len(parts) != d:
        raise SpecError(
            f"dimension mismatch: {what} has {len(parts)} entries, expected {d}",
            entry.line, entry.col,
        )
    return np.array([parse_real(p, entry.line, entry.col) for p in parts])


def _split_sections(text: str) -> list[_Section]:
    sections: list[_Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        stripped = body.lstrip()
        if not stripped:
            continue
        indent = len(body) - len(stripped)
        if stripped.startswith("["):
            m = _HEADER_RE.match(stripped)
            if m is None:
                raise SpecError("malformed section header", lineno, indent + 1)
            sec = _Section(m.group(1), lineno)
            for tok in m.group(2).split():
                k, v = tok.split("=", 1)
                sec.args[k] = _Entry(v, lineno, indent + 1)
            rest = stripped[m.end():]
            offset = indent + m.end()
            # a value runs until the next "key=" so lists may contain spaces
            keys = list(_INLINE_KEY_RE.finditer(rest))
            lead = rest[: keys[0].start()] if keys else rest
            if lead.strip():
                col = offset + len(lead) - len(lead.lstrip()) + 1
                raise SpecError(f"expected key=value, found {lead.strip()!r}", lineno, col)
            for km, nxt in zip(keys, keys[1:] + [None]):
                value = rest[km.end(): nxt.start() if nxt else len(rest)].strip()
                col = offset + km.start() + (len(km.group()) - len(km.group().lstrip())) + 1
                if not value:
                    raise SpecError(f"missing value for key {km.group(1)!r}", lineno, col)
                sec.entries.append((km.group(1), _Entry(value, lineno, col)))
            sections.append(sec)
            continue
        pm = _PAIR_RE.fullmatch(stripped)
        if pm is None or not pm.group(2).strip():
            raise SpecError(f"expected key=value, found {stripped!r}", lineno, indent + 1)
        if not sections:
            raise SpecError("key outside of any section", lineno, indent + 1)
        sections[-1].entries.append(
            (pm.group(1), _Entry(pm.group(2).strip(), lineno, indent + 1))
        )
    return sections


def _check_keys(sec: _Section, allowed: set):
    for key, entry in sec.entries:
        if key not in allowed:
            raise SpecError(f"unknown key {key!r} in [{sec.name}]", entry.line, entry.col)


def parse_system(text: str, name: str = "", validate_periodicity: bool = True) -> SystemSpec:
    """Parse spec-file contents into a validated :class:`SystemSpec`."""
    sections = _split_sections(text)
    by_name: dict[str, list[_Section]] = {}
    for sec in sections:
        if sec.name not in SECTION_KEYS and sec.name != "feedback":
            raise SpecError(f"unknown section [{sec.name}]", sec.line)
        if sec.name != "noise" and sec.args:
            raise SpecError(f"section [{sec.name}] takes no arguments", sec.line)
        by_name.setdefault(sec.name, []).append(sec)
    for sname in ("system", "drift", "feedback", "envelope"):
        if len(by_name.get(sname, [])) > 1:
            raise SpecError(f"duplicate section [{sname}]", by_name[sname][1].line)
    for sname in ("system", "drift", "feedback"):
        if sname not in by_name:
            raise SpecError(f"missing section [{sname}]")

    system = by_name["system"][0]
    _check_keys(system, SECTION_KEYS["system"])
    d = _parse_int(system.require("d"), "d")
    if d < 1:
        raise SpecError("d must be positive", system.line)
    T_entry = system.require("T")
    T = parse_real(T_entry.value, T_entry.line, T_entry.col)
    if not T > 0:
        raise SpecError(f"period T must be positive, got {T}", T_entry.line, T_entry.col)

    drift = by_name["drift"][0]
    _check_keys(drift, SECTION_KEYS["drift"])
    rows = [e for k, e in drift.entries]
    if len(rows) != d:
        raise SpecError(f"dimension mismatch: [drift] has {len(rows)} rows, expected {d}",
                        drift.line)
    A = np.array([_parse_vector(e, d, "drift row") for e in rows])

    sigma = np.zeros((d, d))
    seen = set()
    for sec in by_name.get("noise", []):
        _check_keys(sec, SECTION_KEYS["noise"])
        if set(sec.args) != {"k"}:
            raise SpecError("[noise] header needs exactly k=<int>", sec.line)
        k = _parse_int(sec.args["k"], "noise index k")
        if not 1 <= k <= d:
            raise SpecError(f"noise index k={k} out of range 1..{d}", sec.line)
        if k in seen:
            raise SpecError(f"duplicate [noise k={k}]", sec.line)
        seen.add(k)
        sigma[k - 1] = _parse_vector(sec.require("diag"), d, "noise diagonal")

    feedback = _parse_feedback(by_name["feedback"][0], d, T, validate_periodicity)

    lam = method = None
    if "envelope" in by_name:
        env = by_name["envelope"][0]
        _check_keys(env, SECTION_KEYS["envelope"])
        if env.get("lambda") is not None:
            e = env.get("lambda")
            lam = parse_real(e.value, e.line, e.col)
            if not lam > 0:
                raise SpecError("envelope lambda must be positive", e.line, e.col)
        if env.get("method") is not None:
            method = env.get("method").value.strip()

    # re-raise model validation errors with the offending section's line
    try:
        return SystemSpec(d, A, sigma, feedback, T, name=name, lam=lam, envelope_method=method)
    except SpecError as exc:
        if exc.line is None and "drift" in str(exc):
            raise SpecError(str(exc), drift.line) from None
        raise


def _parse_feedback(sec: _Section, d: int, T: float, validate_periodicity: bool):
    kind_entry = sec.require("kind")
    kind = kind_entry.value.strip()
    if kind not in FEEDBACK_KEYS:
        raise SpecError(f"unknown feedback kind {kind!r}", kind_entry.line, kind_entry.col)
    allowed = {"kind"} | FEEDBACK_KEYS[kind]
    if kind == "competitive":
        allowed |= {f"K{i}" for i in range(1, d + 1)}
    if kind == "custom":
        allowed |= {f"expr{i}" for i in range(1, d + 1)}
    for key, entry in sec.entries:
        if key not in allowed:
            if re.fullmatch(r"(K|expr)\d+", key):
                raise SpecError(f"dimension mismatch: {key!r} exceeds d={d}", entry.line, entry.col)
            raise SpecError(f"unknown key {key!r} for feedback kind {kind}", entry.line, entry.col)

    def real(key):
        e = sec.require(key)
        return parse_real(e.value, e.line, e.col)

    try:
        if kind == "goodwin":
            return goodwin_feedback(d, real("V"), real("K"), real("m"))
        if kind == "othmer_tyson":
            mode = sec.get("lipschitz")
            return othmer_tyson_feedback(
                d, real("k0"), real("K"), real("m"),
                lipschitz=mode.value.strip() if mode else "bound",
            )
        if kind == "competitive":
            return competitive_feedback([real(f"K{i}") for i in range(1, d + 1)], real("m"))
        exprs = []
        for i in range(1, d + 1):
            e = sec.require(f"expr{i}")
            value = e.value.strip()
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
                value = value[1:-1]
            try:
                exprs.append(parse_expr(value, d))
            except ExprError as exc:
                col = e.col + len(f"expr{i}=") + getattr(exc, "pos", 0)
                raise SpecError(f"expr{i}: {exc}", e.line, col) from exc
        return custom_feedback(exprs, T, validate_periodicity=validate_periodicity)
    except SpecError as exc:
        if exc.line is None:
            raise SpecError(str(exc), sec.line) from None
        raise
