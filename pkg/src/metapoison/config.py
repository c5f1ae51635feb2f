"""Run configuration: JSON schema, presets, overrides, hashing, dataset construction."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path

import jsonschema

from . import data as D
from .crafting import CraftConfig
from .models import ArchSpec
from .victim import VictimConfig


class ConfigError(ValueError):
    """Bad config; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}


def _fields_schema(cls, skip=(), extra=None) -> dict:
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if t.startswith("int"):
            props[f.name] = _INT
        elif t.startswith("float |") or t == "float | None":
            props[f.name] = {"type": ["number", "null"]}
        elif t.startswith("float"):
            props[f.name] = _NUM
        elif t.startswith("bool"):
            props[f.name] = _BOOL
        elif t.startswith("str | None"):
            props[f.name] = {"type": ["string", "null"]}
        elif t.startswith("str"):
            props[f.name] = {"type": "string"}
        else:
            props[f.name] = {}
    props.update(extra or {})
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "type": "object",
    "required": ["dataset", "arch", "craft", "attack", "victim"],
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["synthetic", "cifar"]},
                "seed": _INT,
                "n_per_class": {"type": "integer", "minimum": 1},
                "validation_per_class": {"type": "integer", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "minItems": 3, "maxItems": 3},
                "root": {"type": ["string", "null"]},
            },
        },
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["mlp", "convnet"]},
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 3, "maxItems": 3},
                "num_classes": {"type": "integer", "minimum": 2},
                "input_center": _NUM,
            },
        },
        "craft": _fields_schema(CraftConfig),
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["scheme"],
            "properties": {
                "scheme": {"enum": ["collision", "self_conceal", "multiclass"]},
                "targets": {"oneOf": [{"type": "array", "items": {"type": "integer", "minimum": 0},
                                       "minItems": 1},
                                      {"const": "auto"}]},
                "target_count": {"type": "integer", "minimum": 1},
                "target_class": _INT,
                "y_adv": {"type": ["integer", "null"]},
                "poison_class": {"type": ["integer", "null"]},
                "budget": {"type": "number", "minimum": 0, "maximum": 1},
                "band": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            },
        },
        "victim": _fields_schema(VictimConfig, skip=("arch",),
                                 extra={"seeds": {"type": "array", "items": _INT, "minItems": 1}}),
    },
}


def full_defaults() -> dict:
    """Crafting settings as published: C=60, M=24, T=24, K=2, beta=200."""
    return {
        "dataset": {"kind": "synthetic", "seed": 0, "n_per_class": 250, "validation_per_class": 100,
                    "test_per_class": 50, "classes": 2, "shape": [8, 8, 3], "root": None},
        "arch": ArchSpec(kind="mlp", widths=(32, 32), input_shape=(8, 8, 3), num_classes=2).to_dict(),
        "craft": CraftConfig().to_dict(),
        "attack": {"scheme": "collision", "targets": "auto", "target_count": 1, "target_class": 0,
                   "y_adv": 1, "poison_class": 1, "budget": 0.1, "band": [1.5, 3.5]},
        "victim": {k: v for k, v in VictimConfig(epochs=200).to_dict().items() if k != "arch"},
    }


def desk_defaults() -> dict:
    """Scaled settings for the 8x8 two-class synthetic task."""
    cfg = full_defaults()
    cfg["craft"].update(steps=30, ensemble=6, epoch_range=10, outer_lr=12.75)
    cfg["victim"].update(epochs=100, seeds=list(range(20)))
    return cfg


PRESETS = {"full": full_defaults, "desk": desk_defaults}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path) from None
    try:
        arch = ArchSpec.from_dict(cfg["arch"])
        # steps == 0 is a legal run (no updates); the crafting loop itself needs C >= 1
        CraftConfig.from_dict({**cfg["craft"], "steps": max(1, cfg["craft"].get("steps", 1))})
        VictimConfig.from_dict({**cfg["victim"], "arch": arch})
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        if tuple(ds.get("shape", (8, 8, 3))) != arch.input_shape:
            raise ConfigError("dataset shape disagrees with arch input_shape", "dataset/shape")
        if ds.get("classes", 2) != arch.num_classes:
            raise ConfigError("dataset classes disagree with arch num_classes", "dataset/classes")
    att = cfg["attack"]
    for key in ("y_adv", "poison_class", "target_class"):
        v = att.get(key)
        if v is not None and not 0 <= v < arch.num_classes:
            raise ConfigError(f"class {v} out of range", f"attack/{key}")
    return cfg


def load(path=None, preset: str = "desk", overrides: dict | None = None) -> dict:
    """Preset, then the JSON file at ``path``, then ``overrides``; validated."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", "preset")
    cfg = PRESETS[preset]()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON: {err}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object", "<root>")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def parse_assignment(text: str) -> dict:
    """``section.field=value`` with a JSON value (bare words are strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not section.field=value")
    key, raw = text.split("=", 1)
    section, name = key.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {section: {name: value}}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def craft_part(cfg: dict) -> dict:
    """The sections that determine the poisons (victim settings excluded)."""
    return {k: cfg[k] for k in ("dataset", "arch", "craft", "attack")}


def arch_of(cfg) -> ArchSpec:
    return ArchSpec.from_dict(cfg["arch"])


def craft_config(cfg) -> CraftConfig:
    return CraftConfig.from_dict(cfg["craft"])


def craft_config_any(cfg) -> CraftConfig:
    """Like :func:`craft_config` but lets ``steps`` be 0 (no outer updates)."""
    steps = cfg["craft"].get("steps", 1)
    cc = CraftConfig.from_dict({**cfg["craft"], "steps": max(1, steps)})
    cc.steps = steps
    return cc


def victim_config(cfg) -> VictimConfig:
    return VictimConfig.from_dict({**cfg["victim"], "arch": arch_of(cfg)})


def build_datasets(cfg: dict) -> tuple:
    """(train, validation, test) for the configured dataset."""
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        seed, classes, shape = ds.get("seed", 0), ds.get("classes", 2), ds.get("shape", (8, 8, 3))
        return (D.synth_dataset(seed, ds.get("n_per_class", 250), classes, shape, "train"),
                D.synth_dataset(seed, ds.get("validation_per_class", 100), classes, shape, "validation"),
                D.synth_dataset(seed, ds.get("test_per_class", 50), classes, shape, "test"))
    root = ds.get("root") or os.environ.get("METAPOISON_DATA_DIR")
    if not root:
        raise ConfigError("CIFAR root not set (dataset.root or METAPOISON_DATA_DIR)", "dataset/root")
    try:
        train = D.load_cifar_binary(D.cifar_paths(root, "train"), "train")
        test = D.load_cifar_binary(D.cifar_paths(root, "test"), "test")
    except FileNotFoundError as err:
        raise ConfigError(f"missing CIFAR file: {err.filename}", "dataset/root") from None
    return train, test, test
