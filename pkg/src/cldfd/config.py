"""Run configuration: one nested JSON document covering every phase.

Sections mirror the modules (``data``, ``augment``, ``model``, ``pretrain``,
``selfsup``, ``distill``, ``fd``, ``eval``) plus ``seed``, ``output_dir`` and
``paths`` for upstream artifacts. Command-line overrides use dotted paths,
e.g. ``--distill.tau 10`` or ``--fd.h 64``.
"""
from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .augment import AugmentPolicy
from .data import GapParams
from .distill import DistillConfig, PretrainConfig
from .errors import ConfigError
from .evalkit import FDConfig
from .model import BackboneConfig

OUTPUT_ROOT_ENV = "CLDFD_OUTPUT_ROOT"
SCHEMA_VERSION = 1

FD_DEFAULTS = {"h": 64, "beta": 0.4}

DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": None,
    "paths": {"data": None, "teacher": None, "student": None},
    "data": {
        "base_classes": 8,
        "base_per_class": 100,
        "base_seed": 7,
        "target_classes": 5,
        "target_per_class": 60,
        "target_seed": 11,
        "image_size": 32,
        "gap": {"palette": 1.0, "texture": 1.0, "geometry": 1.0},
        "fraction": 0.2,
        "split_seed": 0,
    },
    "augment": AugmentPolicy().to_dict(),
    "model": {"channels": [8, 16, 32, 64], "strides": [1, 2, 2, 2]},
    "pretrain": {
        "mode": "supervised",
        "epochs": 20,
        "batch_size": 64,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lr_milestones": None,
        "augment": True,
        "color_augment": None,
    },
    "selfsup": {
        "kind": "simclr",
        "temperature": 0.1,
        "byol_momentum": 0.99,
        "byol_reduction": "mean",
        "head_hidden": 128,
        "head_dim": 32,
    },
    "distill": {
        "lam": 2.0,
        "tau": 1,
        "epochs": 300,
        "batch_size": 32,
        "topology": "cross_level",
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lr_milestones": None,
        "kd_reduction": "mean",
    },
    "fd": None,
    "eval": {
        "way": 5,
        "shot": 1,
        "query": 15,
        "episodes": 600,
        "fd_query": True,
        "probe_steps": 100,
        "probe_lr": 0.01,
        "rand_index": True,
        "kmeans_restarts": 10,
        "kmeans_max_iter": 100,
    },
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where + ".")
        elif k == "fd" and isinstance(v, dict):
            out[k] = _merge(FD_DEFAULTS, v, "fd.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """JSON literal when it parses, plain string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for depth, k in enumerate(keys[:-1]):
        if k == "fd" and node.get("fd") is None:
            node["fd"] = dict(FD_DEFAULTS)
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[: depth + 1])!r}")
        node = node[k]
    last = keys[-1]
    if last not in node and not (node is cfg.get("fd") and last in FD_DEFAULTS):
        raise ConfigError(f"unknown config key {dotted!r}")
    if dotted == "fd" and value in ("none", "null", None):
        value = None
    node[last] = value


def parse_overrides(tokens: Iterable[str]) -> List[Tuple[str, Any]]:
    """``["--a.b", "1", "--c=x"]`` -> ``[("a.b", 1), ("c", "x")]``."""
    tokens = list(tokens)
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            raw = tokens[i + 1]
            i += 2
        out.append((key.replace("-", "_"), parse_value(raw)))
    return out


def resolve(config_path: Optional[str] = None, overrides: Iterable[Tuple[str, Any]] = ()) -> dict:
    """Defaults <- config file <- overrides, then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path} must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for key, value in overrides:
        apply_override(cfg, key, value)
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    validate(cfg)
    return cfg


# --- typed views -----------------------------------------------------------------


def backbone_config(cfg) -> BackboneConfig:
    m = cfg["model"]
    return BackboneConfig(tuple(m["channels"]), tuple(m["strides"]), cfg["data"]["image_size"], 3)


def augment_policy(cfg) -> AugmentPolicy:
    a = dict(cfg["augment"])
    a["crop_scale_range"] = tuple(a["crop_scale_range"])
    a["aspect_range"] = tuple(a["aspect_range"])
    return AugmentPolicy(**a)


def gap_params(cfg) -> GapParams:
    return GapParams(**cfg["data"]["gap"])


def pretrain_config(cfg) -> PretrainConfig:
    p = dict(cfg["pretrain"])
    p["temperature"] = cfg["selfsup"]["temperature"]
    return PretrainConfig(seed=cfg["seed"], **p)


def distill_config(cfg) -> DistillConfig:
    d = dict(cfg["distill"])
    s = cfg["selfsup"]
    return DistillConfig(
        seed=cfg["seed"],
        ss_kind=s["kind"],
        temperature=s["temperature"],
        byol_momentum=s["byol_momentum"],
        byol_reduction=s["byol_reduction"],
        head_hidden=s["head_hidden"],
        head_dim=s["head_dim"],
        **d,
    )


def fd_config(cfg) -> Optional[FDConfig]:
    if cfg["fd"] is None:
        return None
    return FDConfig(int(cfg["fd"]["h"]), float(cfg["fd"]["beta"]))


def validate(cfg) -> None:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    try:
        backbone_config(cfg)
        augment_policy(cfg)
        gap_params(cfg)
        pretrain_config(cfg)
        distill_config(cfg)
        fd = fd_config(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if fd is not None and fd.h > backbone_config(cfg).feature_dim:
        raise ConfigError(f"fd.h={fd.h} exceeds the feature dimension {backbone_config(cfg).feature_dim}")
    frac = cfg["data"]["fraction"]
    if not 0 < frac < 1:
        raise ConfigError("data.fraction must lie in (0, 1)")


def dump(cfg, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def diff(a: dict, b: dict, prefix: str = "") -> Dict[str, Tuple[Any, Any]]:
    """Dotted keys whose values differ between two resolved configs."""
    out = {}
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.update(diff(va, vb, f"{prefix}{k}."))
        elif va != vb:
            out[f"{prefix}{k}"] = (va, vb)
    return out
