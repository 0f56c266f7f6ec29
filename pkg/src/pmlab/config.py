"""Experiment configuration: TOML parsing, up-front hypothesis validation,
canonical serialization, and the deterministic config hash.

Every numeric hypothesis of the chosen experiment is checked before any work
starts, and *all* violations are reported together, each quoting the bound it
breaks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .maps import ConstantSchedule, ExplicitSchedule, IIDSchedule, NearbySchedule
from .observables import Affine, Identity, PiecewiseLinear

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "serialize_config",
           "config_hash", "EXPERIMENT_KINDS"]

EXPERIMENT_KINDS = (
    "density-scan", "cone", "decay", "martingale", "variance", "clt",
    "asip", "nearby", "quenched",
)

# hypothesis of the section-5 (nearby / quenched) theorems: alpha < 1/8
_SECTION5_CAP = 1.0 / 8.0

_DEFAULTS = {
    "grid": {"n_cells": 2048, "rho": 2.0},
    "ensemble": {"m": 100_000, "n_max": 4096, "checkpoints": []},
    "cone": {"a": 60.0},
}


class ConfigError(ValueError):
    """All validation failures for one config, reported together."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated experiment description.

    ``raw`` is the canonical nested-dict form (defaults filled in), which is
    what serialization and hashing operate on.
    """

    kind: str
    raw: dict = field(compare=False)
    seed: int = 0
    workers: int = 1

    @property
    def schedule_spec(self) -> dict:
        return self.raw["schedule"]

    @property
    def observable_spec(self) -> dict:
        return self.raw.get("observable", {"kind": "identity"})

    @property
    def grid_spec(self) -> dict:
        return self.raw["grid"]

    @property
    def ensemble_spec(self) -> dict:
        return self.raw["ensemble"]

    @property
    def params(self) -> dict:
        return self.raw.get("params", {})

    @property
    def tolerances(self) -> dict:
        return self.raw.get("tolerances", {})

    def build_schedule(self):
        return _build_schedule(self.schedule_spec)

    def build_observable(self):
        return _build_observable(self.observable_spec)


def _schedule_betas_static(spec: dict):
    """The exponents (or exponent bounds) a schedule can emit, for validation."""
    kind = spec.get("kind")
    if kind == "constant":
        return [spec.get("beta")]
    if kind == "explicit":
        return list(spec.get("values", []))
    if kind == "nearby":
        b0, eps = spec.get("beta0"), spec.get("epsilon", 0.0)
        if b0 is None:
            return []
        return [b0 - eps, b0 + eps]
    if kind == "iid":
        return list(spec.get("alphabet", []))
    return []


def _build_schedule(spec: dict):
    kind = spec["kind"]
    cap = spec.get("alpha_cap", 0.99)
    if kind == "constant":
        return ConstantSchedule(spec["beta"], alpha_cap=cap)
    if kind == "explicit":
        return ExplicitSchedule(tuple(spec["values"]), alpha_cap=cap)
    if kind == "nearby":
        return NearbySchedule(spec["beta0"], spec.get("epsilon", 0.0),
                              seed=spec.get("seed", 0), alpha_cap=cap)
    if kind == "iid":
        return IIDSchedule(tuple(spec["alphabet"]), tuple(spec["probabilities"]),
                           seed=spec.get("seed", 0), alpha_cap=cap)
    raise ValueError(f"unknown schedule kind {kind!r}")


def _build_observable(spec: dict):
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return Identity()
    if kind == "affine":
        return Affine(spec.get("slope", 1.0), spec.get("intercept", 0.0))
    if kind == "piecewise-linear":
        return PiecewiseLinear(tuple(spec["knots"]), tuple(spec["values"]))
    raise ValueError(f"unknown observable kind {kind!r}")


def _validate(raw: dict) -> list:
    bad = []
    exp = raw.get("experiment", {})
    kind = exp.get("kind")
    if kind not in EXPERIMENT_KINDS:
        bad.append(f"experiment.kind must be one of {', '.join(EXPERIMENT_KINDS)}"
                   f" (got {kind!r})")

    sched = raw.get("schedule")
    betas = []
    if not isinstance(sched, dict) or "kind" not in sched:
        bad.append("schedule table with a 'kind' key is required")
    else:
        skind = sched["kind"]
        if skind not in ("constant", "explicit", "nearby", "iid"):
            bad.append(f"schedule.kind {skind!r} unknown")
        betas = [b for b in _schedule_betas_static(sched) if b is not None]
        cap = sched.get("alpha_cap", 0.99)
        if not 0.0 < cap < 1.0:
            bad.append(f"schedule.alpha_cap must lie in (0, 1), got {cap}")
        else:
            for b in betas:
                if not 0.0 < b < cap:
                    bad.append(
                        f"schedule exponent {b} violates 0 < beta_k < alpha_cap = {cap}"
                    )
        if skind == "iid":
            probs = sched.get("probabilities", [])
            alphabet = sched.get("alphabet", [])
            if len(probs) != len(alphabet):
                bad.append("schedule.probabilities must match schedule.alphabet in length")
            if probs and (min(probs) < 0.0 or abs(sum(probs) - 1.0) > 1e-12):
                bad.append(
                    f"schedule.probabilities must be nonnegative and sum to 1"
                    f" (got sum = {sum(probs)})"
                )

    obs = raw.get("observable", {"kind": "identity"})
    try:
        _build_observable(obs)
    except (KeyError, ValueError) as exc:
        bad.append(f"observable: {exc}")

    grid = raw.get("grid", {})
    n_cells = grid.get("n_cells", _DEFAULTS["grid"]["n_cells"])
    rho = grid.get("rho", _DEFAULTS["grid"]["rho"])
    if not (isinstance(n_cells, int) and n_cells >= 2):
        bad.append(f"grid.n_cells must be an integer >= 2, got {n_cells}")
    if rho < 1.0:
        bad.append(f"grid.rho must be >= 1, got {rho}")

    ens = raw.get("ensemble", {})
    m = ens.get("m", _DEFAULTS["ensemble"]["m"])
    n_max = ens.get("n_max", _DEFAULTS["ensemble"]["n_max"])
    cps = ens.get("checkpoints", [])
    if m < 1:
        bad.append(f"ensemble.m must be >= 1, got {m}")
    if n_max < 1:
        bad.append(f"ensemble.n_max must be >= 1, got {n_max}")
    if cps and (min(cps) < 1 or max(cps) > n_max):
        bad.append("ensemble.checkpoints must lie in [1, n_max]")

    params = raw.get("params", {})
    alpha_cap = sched.get("alpha_cap", 0.99) if isinstance(sched, dict) else 0.99
    alpha_eff = max(betas) if betas else alpha_cap

    if kind == "decay":
        p = params.get("p", 1.0)
        if not (1.0 <= p and p * alpha_cap < 1.0):
            bad.append(
                f"params.p = {p} violates the decay hypothesis 1 <= p < 1/alpha"
                f" (alpha_cap = {alpha_cap})"
            )
    if kind == "martingale":
        r = params.get("r")
        if r is not None and not 1.0 <= r < 1.0 / (2.0 * alpha_eff):
            bad.append(
                f"params.r = {r} violates the moment-scan hypothesis"
                f" 1 <= r < 1/(2*alpha) = {1.0 / (2.0 * alpha_eff):.6g}"
                f" (alpha = {alpha_eff})"
            )
    if kind in ("nearby", "quenched"):
        for b in betas:
            if not b < _SECTION5_CAP:
                bad.append(
                    f"schedule exponent {b} violates the random-composition"
                    f" hypothesis alpha < 1/8"
                )
    if kind == "cone":
        a = params.get("a", _DEFAULTS["cone"]["a"])
        if a <= 0.0:
            bad.append(f"params.a must be > 0, got {a}")

    return bad


def _fill_defaults(raw: dict) -> dict:
    out = json.loads(json.dumps(raw))  # deep copy, TOML types are JSON-safe
    out.setdefault("experiment", {})
    out["experiment"].setdefault("seed", 0)
    out["experiment"].setdefault("workers", 1)
    out.setdefault("grid", {})
    for k, v in _DEFAULTS["grid"].items():
        out["grid"].setdefault(k, v)
    out.setdefault("ensemble", {})
    for k, v in _DEFAULTS["ensemble"].items():
        out["ensemble"].setdefault(k, v)
    out.setdefault("observable", {"kind": "identity"})
    out.setdefault("params", {})
    out.setdefault("tolerances", {})
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment config.

    Raises ConfigError carrying *every* violation (syntax errors surface as a
    single tomllib error with position info).
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax error: {exc}"]) from exc
    raw = _fill_defaults(raw)
    bad = _validate(raw)
    if bad:
        raise ConfigError(bad)
    exp = raw["experiment"]
    return ExperimentConfig(kind=exp["kind"], raw=raw,
                            seed=int(exp["seed"]), workers=int(exp["workers"]))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical TOML text: sorted tables and keys, repr-exact numbers, so
    parse(serialize(parse(text))) is semantically identical to parse(text)."""
    lines = []
    for table in sorted(config.raw):
        entries = config.raw[table]
        if not isinstance(entries, dict):
            continue
        lines.append(f"[{table}]")
        for key in sorted(entries):
            lines.append(f"{key} = {_toml_value(entries[key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    """Deterministic hash of the semantic config.  The worker count is
    excluded: it is an execution budget that must not change any result."""
    raw = json.loads(json.dumps(config.raw))
    raw.get("experiment", {}).pop("workers", None)
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
