"""Run configuration: JSON files validated field-by-field against documented
ranges, with desk-scale defaults for every hyperparameter.

Unknown keys are rejected; soft inconsistencies (e.g. an exponential-filter
beta supplied alongside a binary filter) are collected as warnings.
"""

import json
import os
from dataclasses import dataclass, field

from .agents import FILTER_KINDS, TRAIN_MODES
from .envlab import ENV_IDS
from .errors import ConfigError

OUT_ROOT_ENV_VAR = "AFBC_LAB_OUT_ROOT"


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


# field name -> (default, type, predicate, description of the valid range)
SCHEMA = {
    "env": ("pendulum", str, lambda v: v in ENV_IDS, f"one of {ENV_IDS}"),
    "dataset": ("", str, lambda v: True, "path to a dataset file (empty only for non-train use)"),
    "mode": ("afbc_per", str, lambda v: v in TRAIN_MODES, f"one of {TRAIN_MODES}"),
    "seed": (0, int, _non_negative, ">= 0"),
    "out": ("", str, lambda v: True, "output directory (defaults under the output root)"),
    "steps": (50_000, int, _non_negative, ">= 0"),
    "batch_size": (512, int, _positive, "> 0"),
    "gamma": (0.99, float, lambda v: 0 < v <= 1, "(0, 1]"),
    "tau_polyak": (0.005, float, lambda v: 0 < v <= 1, "(0, 1]"),
    "target_delay": (2, int, _positive, "> 0"),
    "actor_lr": (1e-4, float, _positive, "> 0"),
    "critic_lr": (1e-4, float, _positive, "> 0"),
    "hidden": ([64, 64], list, lambda v: all(isinstance(x, int) and x > 0 for x in v), "positive ints"),
    "k_advantage_samples": (4, int, _positive, "> 0"),
    "use_popart": (False, bool, lambda v: True, "bool"),
    "ensemble_size": (2, int, lambda v: v >= 2, ">= 2"),
    "redq_subset": (2, int, lambda v: v >= 2, ">= 2 (and <= ensemble_size)"),
    "tau_temp": (0.0, float, _non_negative, ">= 0"),
    "eval_interval": (1000, int, _positive, "> 0"),
    "eval_episodes": (10, int, _positive, "> 0"),
    "log_interval": (50, int, _positive, "> 0"),
    "max_episode_steps": (0, int, _non_negative, ">= 0 (0 = env default)"),
}

FILTER_SCHEMA = {
    "kind": ("binary", str, lambda v: v in FILTER_KINDS, f"one of {FILTER_KINDS}"),
    "beta": (1.0, float, _positive, "> 0"),
    "clip_max": (20.0, float, _positive, "> 0"),
    "popart_rescale": (True, bool, lambda v: True, "bool"),
    "ttest_k": (4, int, lambda v: v >= 2, ">= 2"),
    "ttest_p_start": (1.0, float, _unit, "[0, 1]"),
    "ttest_p_end": (0.05, float, _unit, "[0, 1]"),
    "classifier_ensemble": (3, int, _positive, "> 0"),
    "classifier_threshold": (0.6, float, _unit, "[0, 1]"),
    "classifier_max_std": (0.2, float, _positive, "> 0"),
}

PER_SCHEMA = {
    "alpha": (0.6, float, _unit, "[0, 1]"),
    "epsilon": (1e-3, float, _positive, "> 0"),
    "scheme": ("clipped_advantage", str, lambda v: v in ("clipped_advantage", "binary"), "clipped_advantage | binary"),
}


@dataclass
class RunConfig:
    values: dict
    filter: dict
    per: dict
    warnings: list = field(default_factory=list)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def to_dict(self):
        out = dict(self.values)
        out["filter"] = dict(self.filter)
        out["per"] = dict(self.per)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _apply_schema(section_name, schema, supplied):
    resolved = {}
    for key, (default, typ, check, described_range) in schema.items():
        if key in supplied:
            value = supplied.pop(key)
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if typ is bool:
                ok = isinstance(value, bool)
            elif typ is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, typ)
            if not ok:
                raise ConfigError(f"{section_name}{key}: expected {typ.__name__}, got {type(value).__name__}")
            if not check(value):
                raise ConfigError(f"{section_name}{key}: value {value!r} outside valid range {described_range}")
            resolved[key] = value
        else:
            resolved[key] = default
    if supplied:
        raise ConfigError(f"unknown config key(s) in {section_name or 'top level'}: {sorted(supplied)}")
    return resolved


def resolve_config(raw):
    """Defaults + range checks over a raw dict; returns a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    filter_raw = raw.pop("filter", {})
    per_raw = raw.pop("per", {})
    if not isinstance(filter_raw, dict) or not isinstance(per_raw, dict):
        raise ConfigError("'filter' and 'per' config sections must be objects")
    filter_supplied = set(filter_raw)
    values = _apply_schema("", SCHEMA, raw)
    filter_values = _apply_schema("filter.", FILTER_SCHEMA, dict(filter_raw))
    per_values = _apply_schema("per.", PER_SCHEMA, dict(per_raw))
    if values["redq_subset"] > values["ensemble_size"]:
        raise ConfigError("redq_subset must be <= ensemble_size")
    warnings = []
    if filter_values["kind"] == "binary" and "beta" in filter_supplied:
        warnings.append("filter.beta is ignored with the binary filter")
    if filter_values["ttest_p_end"] > filter_values["ttest_p_start"]:
        raise ConfigError("filter.ttest_p_end must be <= filter.ttest_p_start")
    return RunConfig(values=values, filter=filter_values, per=per_values, warnings=warnings)


def validate_config(path):
    """Parses, defaults, and range-checks a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error in {path} at line {exc.lineno}: {exc.msg}")
    return resolve_config(raw)


def default_out_root():
    return os.environ.get(OUT_ROOT_ENV_VAR, "runs")
