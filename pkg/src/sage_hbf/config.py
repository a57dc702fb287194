"""Experiment configuration: presets, JSON loading, dotted-path overrides,
and the canonical config hash stamped into every output row.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .beamforming import LinkConfig
from .channel import AntennaLayout, Domain, TargetDomainParams, UserRegion
from .metatrain import MetaHyper
from .model import NetConfig


class ConfigError(Exception):
    """Configuration file or override is invalid."""


#: runs in minutes on one CPU core; the acceptance suite uses this preset
DESK_PRESET = {
    "system": {"n_t": 16, "n_rf": 4, "n_u": 2, "p_max": 1.0, "neg_log10_sigma2": 1.0},
    "domains": {
        "layouts": [[16, 1, 1], [1, 16, 1], [1, 1, 16], [2, 2, 4]],
        "gammas": [1.5, 2.0],
        "bs_height_set": [6, 7, 8, 9, 10, 11, 12],
        "d_over_lambda": 0.5,
        "dataset_size": 2048,
        "region": {"x": [10.0, 100.0], "y": [-50.0, 50.0]},
    },
    "target": {
        "layout": [1, 4, 4],
        "num_paths": 3,
        "path_decay": 0.5,
        "angle_spread": 0.2,
        "bs_height": 6.0,
        "gamma": 2.0,
        "dataset_size": 2048,
        "val_size": 512,
        "dataset_path": None,
    },
    "net": {
        "conv_channels": 128,
        "conv_layers": 3,
        "fc_width": 1024,
        "fc_layers": 3,
        "dropout_rate": 0.5,
        "kernel_size": 3,
        "use_batchnorm": True,
        "width_scale": 0.125,
    },
    "train": {
        "method": "mldg",
        "alpha": 0.05,
        "epsilon": 0.02,
        "beta": 1.0,
        "batch_size": 128,
        "epochs": 30,
        "gen_fraction": 0.25,
        "val_size": 256,
    },
    "finetune": {
        "n_real_samples": 20,
        "aug_m": 10_000,
        "tau": 0.005,
        "epochs": 20,
        "batch_size": 128,
        "backbone": None,
    },
    "eval": {"neg_log10_sigma2_grid": [-1.0, 0.0, 1.0, 2.0, 3.0], "models": []},
    "xconfig": {"layouts": [[16, 1, 1], [1, 1, 16]], "gamma": 2.0},
    "sweep": {"n_real_samples": [10, 20, 100, 1000, 10000], "aug_m": 10_000},
    "baseline": {"n_samples": 200, "restarts": 8, "iters": 500, "max_iters": 200},
    "gradcheck": {
        "n_t": 4, "n_rf": 2, "n_u": 2, "conv_channels": 4, "conv_layers": 2,
        "fc_width": 16, "fc_layers": 2, "batch": 4, "seed": 11, "step": 1e-5,
        "rel_tol": 1e-4,
    },
    "seeds": [1, 2, 3, 4, 5],
    "output_dir": "runs/desk",
}

#: mirrors the published experiment scale (hours of compute; not used in tests)
PAPER_PRESET = {
    "system": {"n_t": 64, "n_rf": 8, "n_u": 4, "p_max": 1.0, "neg_log10_sigma2": 13.0},
    "domains": {
        "layouts": [[64, 1, 1], [1, 64, 1], [1, 1, 64], [4, 4, 4]],
        "gammas": [1.3, 1.5, 1.7, 2.0],
        "bs_height_set": [6, 7, 8, 9, 10, 11, 12],
        "d_over_lambda": 0.5,
        "dataset_size": 100_000,
        "region": {"x": [10.0, 100.0], "y": [-50.0, 50.0]},
    },
    "target": {
        "layout": [1, 8, 8],
        "num_paths": 3,
        "path_decay": 0.5,
        "angle_spread": 0.2,
        "bs_height": 6.0,
        "gamma": 2.0,
        "dataset_size": 100_000,
        "val_size": 10_000,
        "dataset_path": None,
    },
    "net": {
        "conv_channels": 128,
        "conv_layers": 3,
        "fc_width": 1024,
        "fc_layers": 3,
        "dropout_rate": 0.5,
        "kernel_size": 3,
        "use_batchnorm": True,
        "width_scale": 1.0,
    },
    "train": {
        "method": "mldg",
        "alpha": 1e-4,
        "epsilon": 1e-5,
        "beta": 1.0,
        "batch_size": 1000,
        "epochs": 1000,
        "gen_fraction": 0.25,
        "val_size": 1000,
    },
    "finetune": {
        "n_real_samples": 20,
        "aug_m": 1_000_000,
        "tau": 1e-3,
        "epochs": 20,
        "batch_size": 1000,
        "backbone": None,
    },
    "eval": {"neg_log10_sigma2_grid": [9.0, 11.0, 13.0, 15.0, 17.0], "models": []},
    "xconfig": {"layouts": [[64, 1, 1], [1, 64, 1], [1, 1, 64]], "gamma": 2.0},
    "sweep": {"n_real_samples": [10, 20, 100, 1000, 100_000], "aug_m": 1_000_000},
    "baseline": {"n_samples": 200, "restarts": 8, "iters": 500, "max_iters": 200},
    "gradcheck": {
        "n_t": 4, "n_rf": 2, "n_u": 2, "conv_channels": 4, "conv_layers": 2,
        "fc_width": 16, "fc_layers": 2, "batch": 4, "seed": 11, "step": 1e-5,
        "rel_tol": 1e-4,
    },
    "seeds": [1, 2, 3, 4, 5],
    "output_dir": "runs/paper",
}

PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Resolve a config: preset defaults, then file values, then --set overrides."""
    file_cfg: dict = {}
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config root must be a JSON object")
    preset = file_cfg.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _deep_merge(PRESETS[preset], file_cfg)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``dotted.path=json_value`` override (bare words act as strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted string
    out = copy.deepcopy(cfg)
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override path {key!r}: {p!r} is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"override path {key!r}: unknown key {parts[-1]!r}")
    node[parts[-1]] = value
    return out


def validate_config(cfg: dict) -> None:
    try:
        net_config(cfg)
        meta_hyper(cfg)
        link_config(cfg)
        source_domains(cfg)
        target_params(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not cfg["seeds"]:
        raise ConfigError("invalid config: seeds list is empty")


def config_hash(cfg: dict) -> str:
    """Short digest identifying the experiment (output location excluded)."""
    canon = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _region(block: dict) -> UserRegion:
    return UserRegion(x_range=tuple(block["region"]["x"]), y_range=tuple(block["region"]["y"]))


def net_config(cfg: dict) -> NetConfig:
    sys_b, net_b = cfg["system"], cfg["net"]
    return NetConfig(
        n_t=sys_b["n_t"], n_rf=sys_b["n_rf"], n_u=sys_b["n_u"],
        conv_channels=net_b["conv_channels"], conv_layers=net_b["conv_layers"],
        fc_width=net_b["fc_width"], fc_layers=net_b["fc_layers"],
        dropout_rate=net_b["dropout_rate"], kernel_size=net_b["kernel_size"],
        use_batchnorm=net_b["use_batchnorm"], width_scale=net_b["width_scale"],
    )


def meta_hyper(cfg: dict) -> MetaHyper:
    t = cfg["train"]
    return MetaHyper(alpha=t["alpha"], epsilon=t["epsilon"], beta=t["beta"],
                     batch_size=t["batch_size"], epochs=t["epochs"],
                     gen_fraction=t["gen_fraction"])


def link_config(cfg: dict) -> LinkConfig:
    s = cfg["system"]
    return LinkConfig.from_neg_log10_sigma2(s["neg_log10_sigma2"], p_max=s["p_max"])


def _layout(spec, d_over_lambda: float, n_t: int) -> AntennaLayout:
    layout = AntennaLayout(*(int(v) for v in spec), d_over_lambda=d_over_lambda)
    if layout.n_t != n_t:
        raise ValueError(f"layout {spec} has {layout.n_t} elements, system.n_t is {n_t}")
    return layout


def source_domains(cfg: dict) -> list[Domain]:
    d = cfg["domains"]
    n_t = cfg["system"]["n_t"]
    region = _region(d)
    heights = tuple(float(h) for h in d["bs_height_set"])
    return [
        Domain(layout=_layout(spec, d["d_over_lambda"], n_t), gamma=float(g),
               bs_height_set=heights, region=region)
        for spec in d["layouts"]
        for g in d["gammas"]
    ]


def target_params(cfg: dict) -> TargetDomainParams:
    t = cfg["target"]
    n_t = cfg["system"]["n_t"]
    return TargetDomainParams(
        layout=_layout(t["layout"], cfg["domains"]["d_over_lambda"], n_t),
        num_paths=t["num_paths"], path_decay=t["path_decay"],
        angle_spread=t["angle_spread"], bs_height=t["bs_height"],
        gamma=t["gamma"], region=_region(cfg["domains"]),
    )
