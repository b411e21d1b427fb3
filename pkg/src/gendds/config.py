"""Run configuration: one nested document with strict keys.

Files may be YAML or JSON.  User values are merged over the defaults; any key
not present in the defaults is rejected.  The merged result is what gets
echoed next to every output as ``config.json``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .pipeline import TextConfig
from .unet import UNetConfig

_PLAN = {"epochs": 10, "batch_size": 16, "lr_unet": 1e-4, "lr_text": None, "prompt_dropout": 0.1,
         "checkpoint_every": 0, "grad_accum": 1, "warmup": 0.05, "weight_decay": 0.0}

DEFAULTS = {
    "seed": 0,
    "dataset": {"count": 500, "split": 0.9, "frames": 8, "resolution": 32, "format": "png",
                "source": None},
    "codec": {"enabled": True, "latent_channels": 4, "epochs": 20, "lr": 2e-3, "batch_size": 16, "patience": 3},
    "model": {"unet": UNetConfig().to_dict(), "text": TextConfig().to_dict()},
    "train": {
        "base": dict(_PLAN, epochs=30, val_batch=256),
        "lora": dict(_PLAN, epochs=5, rank=8, alpha=8.0,
                     targets=["*attn.to_q", "*attn.to_k", "*attn.to_v", "*attn.to_out"],
                     train_text=False, filter_tags=[]),
        "control": dict(_PLAN, epochs=5),
        "temporal": dict(_PLAN, epochs=10, heads=4, sites="all", lr_unet=1e-3),
    },
    "sampler": {"kind": "dpmpp_2m", "steps": 32, "cfg_scale": 7.5, "eta": 0.0, "rho": 7.0},
    "sample": {"prompt": "outdoors, road, scenery, sky, sunny, light traffic, city", "frames": 8, "count": 1,
               "grid": False, "grid_count": 100, "lora": False, "control": False, "temporal": True,
               "depth_seed": None, "format": "ppm", "name": None, "chunk": 10},
    "probe": {"epochs": 20, "lr": 3e-3, "batch_size": 32, "width": 16},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"config {path} is not valid: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a mapping at top level")
    return data


def set_path(doc: dict, dotted: str, value) -> None:
    node = doc
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then dotted-key ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, load_file(path))
    nested: dict = {}
    for key, value in (overrides or {}).items():
        set_path(nested, key, value)
    cfg = _merge(cfg, nested)
    cfg["model"]["unet"]["latent_channels"] = cfg["codec"]["latent_channels"] if cfg["codec"]["enabled"] else 3
    UNetConfig.from_dict(cfg["model"]["unet"])
    if cfg["model"]["unet"]["context_dim"] != cfg["model"]["text"]["dim"]:
        raise ConfigurationError("model.unet.context_dim must equal model.text.dim")
    return cfg


def echo(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
