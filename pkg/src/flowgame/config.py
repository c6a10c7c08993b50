"""Declarative run configuration (YAML, checked against a JSON schema)."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .budget import AttackBudget
from .density import IpdDensity
from .game import SWEEP_AXES, Scenario
from .trace import DelayModel, IpdModel, ipd, load_trace


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_COUNT = {"type": "integer", "minimum": 1}

_DELAY = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"family": {"enum": ["laplace", "normal"]}, "loc": _NONNEG, "scale": _NONNEG},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "flowgame run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["ipd_model"],
    "properties": {
        "scenario": {"type": "string", "minLength": 1, "pattern": "^[^,\\n\\r\"]+$"},
        "seed": {"type": "integer", "minimum": 0},
        "n": {"type": "integer", "minimum": 2},
        "ipd_model": {
            "type": "object",
            "required": ["family"],
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["exponential", "lognormal", "pareto", "empirical"]},
                "rate": _NUM, "mu": _NUM, "sigma": _NUM, "shape": _NUM, "scale": _NUM,
                "samples": {"type": "array", "items": _NUM, "minItems": 2},
                "corpus": {"type": "string"},
            },
        },
        "delay_model_1": _DELAY,
        "delay_model_2": _DELAY,
        "budget": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"a_max": _NONNEG, "p_a": _NONNEG,
                           "p_l": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
        },
        "adversary": {"enum": ["none", "opt-delay", "rand-delay", "opt", "no1", "no2"]},
        "detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 2},
                "eta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "p_l_assumed": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
                "mode": {"enum": ["auto", "delay", "robust"]},
                "calib_count": _COUNT,
            },
        },
        "counts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"x_count": _COUNT, "repeat_count": _COUNT,
                           "training_ipds": _COUNT, "jitter_count": _COUNT},
        },
        "densities": {"type": "string"},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axis", "values"],
            "properties": {"axis": {"enum": list(SWEEP_AXES)},
                           "values": {"type": "array", "minItems": 1}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"path": {"type": "string"}, "format": {"enum": ["csv", "json"]}},
        },
    },
}


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    sweep_axis: str | None
    sweep_values: tuple
    output_path: Path | None
    output_format: str
    source: dict


def corpus_files(path) -> list[Path]:
    """Trace files of a corpus: a directory's regular files in name order, or a single file."""
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    return [path]


def load_corpus(path):
    return [load_trace(p) for p in corpus_files(path)]


def load_densities(path):
    """(f_dY, f_dD or None) from a sidecar written by the fit command."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    f_dy = IpdDensity.from_dict(data["f_dy"])
    f_dd = IpdDensity.from_dict(data["f_dd"]) if data.get("f_dd") else None
    return f_dy, f_dd


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _ipd_model(spec: dict, base: Path) -> IpdModel:
    spec = dict(spec)
    corpus = spec.pop("corpus", None)
    if corpus is not None:
        if spec["family"] != "empirical":
            raise ConfigError("ipd_model.corpus is only valid for the empirical family")
        ipds = np.concatenate([ipd(t) for t in load_corpus(_resolve(base, corpus))])
        spec["samples"] = ipds[ipds > 0].tolist()
    return IpdModel.from_dict(spec)


def parse_config(doc, base_dir=".") -> RunConfig:
    """Validate a parsed document and build the scenario it describes."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    doc = copy.deepcopy(doc)
    base = Path(base_dir)
    for key in ("densities",):
        if key in doc and not _resolve(base, doc[key]).is_file():
            raise ConfigError(f"{key}: file not found: {doc[key]}")
    corpus = doc["ipd_model"].get("corpus")
    if corpus is not None and not _resolve(base, corpus).exists():
        raise ConfigError(f"ipd_model/corpus: path not found: {corpus}")
    out_path = doc.get("output", {}).get("path")
    if out_path is not None and not _resolve(base, out_path).parent.is_dir():
        raise ConfigError(f"output/path: directory not found: {out_path}")
    try:
        densities = None
        if "densities" in doc:
            f_dy, f_dd = load_densities(_resolve(base, doc["densities"]))
            if f_dd is None:
                raise ConfigError("densities: sidecar lacks a jitter density (f_dd)")
            densities = (f_dy, f_dd)
        det = doc.get("detector", {})
        counts = doc.get("counts", {})
        scenario = Scenario(
            ipd_model=_ipd_model(doc["ipd_model"], base),
            delay_model_1=DelayModel.from_dict(doc.get("delay_model_1", {})),
            delay_model_2=DelayModel.from_dict(doc.get("delay_model_2", {})),
            n=doc.get("n", 20),
            budget=AttackBudget(**{k: float(v) for k, v in doc.get("budget", {}).items()}),
            adversary=doc.get("adversary", "none"),
            levels=det.get("levels", 256),
            eta=float(det.get("eta", 0.01)),
            p_l_assumed=det.get("p_l_assumed"),
            mode=det.get("mode", "auto"),
            calib_count=det.get("calib_count", 100_000),
            x_count=counts.get("x_count", 100),
            repeat_count=counts.get("repeat_count", 50),
            training_ipds=counts.get("training_ipds", 20_000),
            jitter_count=counts.get("jitter_count", 40_000),
            seed=doc.get("seed", 0),
            name=doc.get("scenario", "scenario"),
            densities=densities,
        )
        # detector constraints surface at load time, before any fitting
        _check_detector(scenario)
        sweep = doc.get("sweep")
        if sweep:
            for v in sweep["values"]:
                _check_detector(scenario.with_axis(sweep["axis"], v))
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    output = doc.get("output", {})
    return RunConfig(
        scenario=scenario,
        sweep_axis=sweep["axis"] if sweep else None,
        sweep_values=tuple(sweep["values"]) if sweep else (),
        output_path=_resolve(base, output["path"]) if "path" in output else None,
        output_format=output.get("format", "csv"),
        source=doc,
    )


def _check_detector(scenario: Scenario) -> None:
    need = math.ceil(round(10 / scenario.eta, 9))
    if scenario.calib_count < need:
        raise ConfigError(f"detector/calib_count must be >= ceil(10/eta) = {need}")
    scenario.grid


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return parse_config(doc, path.parent)
