"""JSON run configuration: parsing, validation with every problem reported, and
conversion to the library's config objects.

Precedence for the random seed: ``--seed`` flag, then the ``UN_SEED``
environment variable, then the ``seed`` key in the file.
"""

from __future__ import annotations

import difflib
import json
import os
import re
from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError
from .estimator import PipelineConfig
from .propensity import McmcConfig
from .simulation import PRESETS, SimConfig

SEED_ENV = "UN_SEED"


def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return "must be an integer"
        if lo is not None and v < lo:
            return f"must be >= {lo}"
    return check


def _num(positive=False, open_unit=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return "must be a number"
        if positive and not v > 0:
            return "must be > 0"
        if open_unit and not -1 < v < 1:
            return "must lie in (-1, 1)"
    return check


def _optional(check):
    def inner(v):
        return None if v is None else check(v)
    return inner


def _bool(v):
    if not isinstance(v, bool):
        return "must be true or false"


def _choice(*options):
    def check(v):
        if v not in options:
            return f"must be one of {', '.join(map(repr, options))}"
    return check


def _coefs(v):
    if not isinstance(v, list) or len(v) != 3 or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        return "must be a list of 3 numbers (intercept, x1, x2)"


def _bootstrap_count(v):
    msg = _int(0)(v)
    if msg is None and v == 1:
        return "must be 0 (no bootstrap) or >= 2"
    return msg


_SHARED = {
    "seed": _int(0),
    "K": _int(1),
    "burn_in": _int(0),
    "thin": _int(1),
    "prior_var": _num(positive=True),
    "B": _bootstrap_count,
    "with_replacement": _bool,
    "caliper_sd": _optional(_num(positive=True)),
    "distance": _choice("ps", "linear"),
    "retrim_per_draw": _bool,
    "workers": _int(1),
}

SCHEMAS = {
    "simulate": {
        **_SHARED,
        "preset": _choice(*sorted(PRESETS)),
        "n": _int(50),
        "J": _int(1),
        "gamma_true": _coefs,
        "beta": _num(),
        "theta0": _num(),
        "theta1": _num(),
        "theta2": _num(),
        "theta3": _num(),
        "gamma3": _num(),
        "rho": _num(open_unit=True),
        "misspecified": _bool,
        "truth_over": _choice("treated", "all"),
    },
    "analyze": {
        **_SHARED,
        "K": _int(2),
        "multiplicity": _bool,
        "outcome_type": _choice("auto", "binary", "continuous"),
        "init": _choice("mle", "map"),
    },
}

ANALYZE_DEFAULTS = {
    "seed": 0,
    "K": 1000,
    "burn_in": 2000,
    "thin": 5,
    "prior_var": 100.0,
    "B": 500,
    "with_replacement": True,
    "caliper_sd": None,
    "distance": "ps",
    "retrim_per_draw": True,
    "workers": 1,
    "multiplicity": True,
    "outcome_type": "auto",
    "init": "mle",
}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def validate(raw: dict, kind: str, text: str = "") -> list[str]:
    """Every problem in ``raw`` as a human-readable line; empty when valid."""
    schema = SCHEMAS[kind]
    problems = []
    for key, value in raw.items():
        where = _line_of(text, key)
        prefix = f"line {where}: " if where else ""
        if key not in schema:
            guess = difflib.get_close_matches(key, list(schema), n=1, cutoff=0.5)
            hint = f"; did you mean '{guess[0]}'?" if guess else ""
            problems.append(f"{prefix}unknown key '{key}'{hint}")
            continue
        msg = schema[key](value)
        if msg:
            problems.append(f"{prefix}{key}: {msg} (got {value!r})")
    return problems


def load(path, kind: str) -> dict:
    """Read and validate a JSON config file, raising ``ConfigError`` listing all problems."""
    if kind not in SCHEMAS:
        raise ValueError(f"unknown config kind {kind!r}")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: line {exc.lineno}, column {exc.colno}: invalid JSON ({exc.msg})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    problems = validate(raw, kind, text)
    if problems:
        raise ConfigError([f"{path}: {p}" for p in problems])
    return raw


def resolve_seed(raw: dict, flag: int | None) -> dict:
    if flag is not None:
        return {**raw, "seed": flag}
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return {**raw, "seed": int(env)}
        except ValueError:
            raise ConfigError([f"{SEED_ENV}: must be an integer (got {env!r})"]) from None
    return raw


def sim_config(raw: dict) -> SimConfig:
    raw = dict(raw)
    cfg = SimConfig()
    preset = raw.pop("preset", None)
    if preset is not None:
        cfg = replace(cfg, **PRESETS[preset])
    if "gamma_true" in raw:
        raw["gamma_true"] = tuple(float(g) for g in raw["gamma_true"])
    known = {f.name for f in fields(SimConfig)}
    cfg = replace(cfg, **{k: v for k, v in raw.items() if k in known})
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def analyze_config(raw: dict) -> tuple[dict, PipelineConfig, McmcConfig]:
    opts = {**ANALYZE_DEFAULTS, **raw}
    caliper = opts["caliper_sd"]
    if not opts["with_replacement"] and caliper is None:
        caliper = 0.5
    pipe = PipelineConfig(
        with_replacement=opts["with_replacement"],
        caliper_sd=caliper,
        distance=opts["distance"],
        multiplicity=opts["multiplicity"],
        retrim_per_draw=opts["retrim_per_draw"],
    )
    mcmc = McmcConfig(
        K=opts["K"], burn_in=opts["burn_in"], thin=opts["thin"], prior_var=opts["prior_var"], init=opts["init"]
    )
    return opts, pipe, mcmc
