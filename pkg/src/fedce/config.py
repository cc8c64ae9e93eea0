"""Experiment config files: YAML or JSON, checked against a strict schema.

Unknown keys are errors. The file layout mirrors :class:`ExperimentConfig`;
``data.source.kind`` picks between ``synthetic`` and ``csv``. A relative CSV
path is resolved against the config file's folder.
"""

from __future__ import annotations

import os
from dataclasses import replace

import jsonschema
import yaml

from ._validation import ConfigError
from .aggregation import RULES, AggregatorConfig
from .attacks import KINDS, AttackConfig
from .contribution import METHODS, UTILITIES, GtgConfig
from .data import CsvSource, DataConfig, SyntheticSource
from .harness import ExperimentConfig
from .numerics import TrainingHyperParams

_INT = {"type": "integer"}
_NUM = {"type": "number"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "name": {"type": "string"},
    "K": {"type": "integer", "minimum": 2},
    "T": {"type": "integer", "minimum": 1},
    "repetitions": {"type": "integer", "minimum": 1},
    "base_seed": {"type": "integer", "minimum": 0},
    "hidden": {"type": "integer", "minimum": 0},
    "tau_range": {"type": ["array", "null"], "items": _INT, "minItems": 2, "maxItems": 2},
    "data": _obj({
        "source": {"oneOf": [
            _obj({"kind": {"const": "synthetic"}, "n": _INT, "d": _INT, "C": _INT,
                  "separation": _NUM}, required=["kind"]),
            _obj({"kind": {"const": "csv"}, "path": {"type": "string"},
                  "label_column": {"type": "string"},
                  "normalization": {"enum": ["zscore", "none"]}},
                 required=["kind", "path", "label_column"]),
        ]},
        "partition": {"enum": ["iid", "dirichlet"]},
        "alpha": _NUM,
        "noise": {"enum": ["none", "linear"]},
        "validation_fraction": _NUM,
    }),
    "training": _obj({
        "eta": _NUM, "lambda_decay": _NUM, "nu": _NUM,
        "mu": {"type": ["number", "null"]},
        "tau": _INT,
        "batch_size": {"type": ["integer", "null"]},
    }),
    "aggregator": _obj({
        "rule": {"enum": list(RULES)},
        "kappa": _INT,
        "rho": _NUM,
        "fednova_mode": {"enum": ["literal", "normalized"]},
    }),
    "ce_methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
    "utility": {"enum": list(UTILITIES)},
    "gtg": _obj({"eps0": _NUM, "eps1": _NUM, "eps2": _NUM, "max_permutations": _INT}),
    "adp_on_deltas": {"type": "boolean"},
    "attack": _obj({
        "kind": {"enum": list(KINDS)},
        "attacker_id": _INT, "target_id": _INT,
        "gamma": _NUM, "epsilon": _NUM, "val_fraction": _NUM,
        "steps": _INT, "step_size": _NUM,
        "ce_method": {"enum": ["LOO", "GTG", "SV"]},
        "mode": {"enum": ["direct", "surrogate"]},
        "rounds": {"type": ["array", "null"], "items": _INT},
    }),
    "score_rounds_aggregation": {"enum": ["mean", "sum"]},
})


def _field_of(error: jsonschema.ValidationError) -> str:
    path = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        path += extra[:1]
    elif error.validator == "required":
        path.append(error.message.split("'")[1])
    return ".".join(path) or "<root>"


def validate_document(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level", "<root>")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = min(errors, key=lambda e: len(e.absolute_path))
        if err.validator == "oneOf" and err.context:
            err = min(err.context, key=lambda e: (e.validator != "additionalProperties", len(e.message)))
        field = _field_of(err)
        raise ConfigError(f"invalid config at {field}: {err.message}", field)


def _coerce_numbers(value, schema):
    """Turn ints into floats wherever the schema expects a real, so hashes agree."""
    if isinstance(value, dict):
        if "oneOf" in schema:
            kind = value.get("kind")
            schema = next(s for s in schema["oneOf"] if s["properties"]["kind"]["const"] == kind)
        props = schema.get("properties", {})
        return {k: _coerce_numbers(v, props.get(k, {})) for k, v in value.items()}
    types = schema.get("type")
    if isinstance(value, int) and not isinstance(value, bool) and (
            types == "number" or (isinstance(types, list) and "number" in types)):
        return float(value)
    return value


def from_dict(doc: dict, base_dir: str = "") -> ExperimentConfig:
    """Build a validated :class:`ExperimentConfig` from a parsed document."""
    validate_document(doc)
    doc = _coerce_numbers(doc, SCHEMA)
    data = dict(doc.pop("data", {}))
    source = dict(data.pop("source", {"kind": "synthetic"}))
    kind = source.pop("kind")
    if kind == "csv":
        data["source"] = CsvSource(**source, base_dir=base_dir)
    else:
        data["source"] = SyntheticSource(**source)
    built = dict(doc)
    built["data"] = DataConfig(**data)
    if "training" in doc:
        built["training"] = TrainingHyperParams(**doc["training"])
    if "aggregator" in doc:
        built["aggregator"] = AggregatorConfig(**doc["aggregator"])
    if "gtg" in doc:
        built["gtg"] = GtgConfig(**doc["gtg"])
    if "attack" in doc:
        built["attack"] = AttackConfig(**doc["attack"])
    if "ce_methods" in doc:
        built["ce_methods"] = tuple(doc["ce_methods"])
    if doc.get("tau_range") is not None:
        built["tau_range"] = tuple(doc["tau_range"])
    return ExperimentConfig(**built)


def load_config(path, seed: int | None = None, repetitions: int | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config file, applying the ``--seed``/``--repetitions`` overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", "config") from exc
    config = from_dict(doc if doc is not None else {}, os.path.dirname(os.path.abspath(path)))
    if seed is not None:
        config = replace(config, base_seed=seed)
    if repetitions is not None:
        config = replace(config, repetitions=repetitions)
    return config
