"""Experiment configuration files.

A configuration is a JSON document with the blocks below; every field has a
default, so ``{}`` is a valid configuration (six-state model, gamma 0.8,
oblivious uniform training, tabular Watkins with matrix gain)::

    {
      "mdp":       {"builtin": "six_state", "discount": 0.8, "success": 0.8},
      "policy":    {"kind": "oblivious", "epsilon": 0.1, "kappa0": 1.0},
      "basis":     {"kind": "tabular", "d": 4, "seed": 0},
      "estimator": {"kind": "matrix_gain", "variant": "watkins", "delta": 1.0,
                    "burn_in": null, "refresh_every": 1024, "safeguard_radius": null},
      "schedule":  {"alpha": {"g": 1.0, "rho": 1.0, "shift": 0.0},
                    "beta":  {"g": 1.0, "rho": 0.85, "shift": 0.0}},
      "n_steps": 100000, "n_runs": 1, "seed": 0, "x0": 0,
      "out": "qsalab-out",
      "analysis": {"bellman": true, "span": true}
    }

``mdp`` may instead name a file (``{"path": "model.json"}``) written by
:func:`qsalab.mdp.save_mdp`, or request a random model
(``{"random": {"n_states": 5, "n_actions": 3, "seed": 1}, "discount": 0.9}``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import StepSchedule, TwoTimeScale
from .features import random_basis, tabular_basis
from .mdp import random_mdp, six_state_example, load_mdp
from .policy import KINDS, PolicySpec
from .qlearn import EST_CODES, TD_CODES, EstimatorConfig

BUILTINS = ("six_state",)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


DEFAULTS = {
    "mdp": {"builtin": "six_state", "discount": 0.8, "success": 0.8},
    "policy": {"kind": "oblivious", "epsilon": 0.1, "kappa0": 1.0},
    "basis": {"kind": "tabular", "d": 4, "seed": 0},
    "estimator": {"kind": "matrix_gain", "variant": "watkins", "delta": 1.0, "burn_in": None,
                  "refresh_every": 1024, "safeguard_radius": None},
    "schedule": {"alpha": {"g": 1.0, "rho": 1.0, "shift": 0.0},
                 "beta": {"g": 1.0, "rho": 0.85, "shift": 0.0}},
    "n_steps": 100000,
    "n_runs": 1,
    "seed": 0,
    "x0": 0,
    "out": "qsalab-out",
    "analysis": {"bellman": True, "span": True},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            if path == "mdp." and k in ("path", "random"):
                out[k] = v
                continue
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict) and k != "analysis":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a block")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Validated configuration; ``raw`` is the full document with defaults filled in."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
        cfg = cls(_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config: file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON ({e})") from e
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dumps(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def override(self, **kw) -> "ExperimentConfig":
        doc = self.to_dict()
        for k, v in kw.items():
            if v is not None:
                doc[k] = v
        return ExperimentConfig.from_dict(doc)

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        m = r["mdp"]
        g = m.get("discount")
        if not isinstance(g, (int, float)) or not (0.0 <= g < 1.0):
            raise ConfigError(f"mdp.discount: must lie in [0, 1), got {g!r}")
        if "path" not in m and "random" not in m and m["builtin"] not in BUILTINS:
            raise ConfigError(f"mdp.builtin: unknown model {m['builtin']!r}")
        if "path" in m and not Path(m["path"]).exists():
            raise ConfigError(f"mdp.path: file not found: {m['path']}")
        p = r["policy"]
        if p["kind"] not in KINDS:
            raise ConfigError(f"policy.kind: expected one of {KINDS}, got {p['kind']!r}")
        if not (0.0 <= p["epsilon"] <= 1.0):
            raise ConfigError(f"policy.epsilon: must lie in [0, 1], got {p['epsilon']!r}")
        if not p["kappa0"] > 0:
            raise ConfigError(f"policy.kappa0: must be positive, got {p['kappa0']!r}")
        b = r["basis"]
        if b["kind"] not in ("tabular", "random"):
            raise ConfigError(f"basis.kind: expected 'tabular' or 'random', got {b['kind']!r}")
        if b["kind"] == "random" and not (isinstance(b["d"], int) and b["d"] >= 1):
            raise ConfigError(f"basis.d: must be a positive integer, got {b['d']!r}")
        e = r["estimator"]
        if e["kind"] not in EST_CODES or e["kind"] == "frozen":
            raise ConfigError(f"estimator.kind: unknown estimator {e['kind']!r}")
        if e["variant"] not in TD_CODES:
            raise ConfigError(f"estimator.variant: unknown variant {e['variant']!r}")
        if e["kind"] == "matrix_gain" and b["kind"] != "tabular":
            raise ConfigError("estimator.kind: matrix_gain requires basis.kind = 'tabular'")
        if not e["delta"] > 0:
            raise ConfigError(f"estimator.delta: must be positive, got {e['delta']!r}")
        for name in ("alpha", "beta"):
            s = r["schedule"][name]
            try:
                StepSchedule(float(s["g"]), float(s["rho"]), float(s["shift"]))
            except (ValueError, TypeError, KeyError) as ex:
                raise ConfigError(f"schedule.{name}: {ex}") from ex
        if e["kind"] in ("zap", "zapzero"):
            try:
                self.schedules()
            except ValueError as ex:
                raise ConfigError(f"schedule: {ex}") from ex
        for k in ("n_steps", "n_runs", "seed", "x0"):
            if not isinstance(r[k], int) or isinstance(r[k], bool) or r[k] < 0:
                raise ConfigError(f"{k}: must be a nonnegative integer, got {r[k]!r}")
        if r["n_runs"] < 1:
            raise ConfigError("n_runs: must be at least 1")

    # -- builders --------------------------------------------------------
    def build_mdp(self):
        m = self.raw["mdp"]
        if "path" in m:
            return load_mdp(m["path"])
        if "random" in m:
            rnd = m["random"]
            rng = np.random.default_rng(rnd.get("seed", 0))
            return random_mdp(int(rnd.get("n_states", 5)), int(rnd.get("n_actions", 3)), rng,
                              discount=float(m["discount"]))
        return six_state_example(float(m["discount"]), float(m.get("success", 0.8)))

    def build_policy(self) -> PolicySpec:
        p = self.raw["policy"]
        return PolicySpec(p["kind"], epsilon=float(p["epsilon"]), kappa0=float(p["kappa0"]))

    def build_basis(self, mdp) -> np.ndarray:
        b = self.raw["basis"]
        if b["kind"] == "tabular":
            return tabular_basis(mdp)
        return random_basis(mdp, int(b["d"]), np.random.default_rng(b["seed"]))

    def build_estimator(self) -> EstimatorConfig:
        e = self.raw["estimator"]
        return EstimatorConfig(e["kind"], e["variant"], delta=float(e["delta"]), burn_in=e["burn_in"],
                               refresh_every=int(e["refresh_every"]),
                               safeguard_radius=e["safeguard_radius"])

    def schedules(self):
        s = self.raw["schedule"]
        a = StepSchedule(float(s["alpha"]["g"]), float(s["alpha"]["rho"]), float(s["alpha"]["shift"]))
        if self.raw["estimator"]["kind"] in ("zap", "zapzero"):
            b = StepSchedule(float(s["beta"]["g"]), float(s["beta"]["rho"]), float(s["beta"]["shift"]))
            return TwoTimeScale(a, b, allow_equal=(a.rho == b.rho))
        return a
