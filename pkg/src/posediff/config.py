"""Run configuration: one JSON tree with full defaulting, strict key
validation, and a provenance hash embedded in every output artifact.

Two presets ship: ``tiny`` (desk-scale: 16 frames, 64-dim features, fast
optimizer settings) and ``paper`` (243 frames, 512-dim features, the
published optimizer/sampler settings; runnable but slow).
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import build_schedule
from .exceptions import ConfigError
from .prompts import HashTextEncoder, PrecomputedTextEncoder, PromptBank, PromptSpec
from .training import TrainConfig

__all__ = ["default_config", "preset", "load_config", "config_hash", "build_runtime"]

DEFAULTS = {
    "seed": 0,
    "dtype": "float32",
    "schedule": {"T": 1000, "kind": "cosine", "beta_min": 1e-4, "beta_max": 0.02},
    "model": {
        "feature_dim": 512,
        "heads": 8,
        "blocks_spatial": 1,
        "blocks_temporal": 1,
        "blocks_spatio_temporal": 3,
        "mlp_ratio": 2.0,
        "use_fpp": True,
        "use_fpc": True,
        "use_pts": True,
    },
    "prompt": {"encoder": "hashed", "encoder_seed": 0, "embeddings_file": None},
    "data": {
        "n_frames": 243,
        "n_joints": 17,
        "normalize": "root_centered",
    },
    "train": {
        "epochs": 100,
        "batch_size": 4,
        "lr0": 6e-5,
        "lr_decay": 0.993,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "weight_decay": 0.1,
        "grad_clip": None,
        "max_steps": None,
        "checkpoint_every": 1,
    },
    "sample": {
        "hypotheses": 20,
        "iterations": 10,
        "deterministic": True,
        "per_frame_jpma": False,
        "rigid_only": False,
    },
}

PRESETS = {
    "paper": {},
    "tiny": {
        "dtype": "float32",
        "schedule": {"T": 100},
        "model": {"feature_dim": 64, "heads": 4},
        "data": {"n_frames": 16},
        "train": {
            "epochs": 400,
            "lr0": 2e-3,
            "lr_decay": 0.999,
            "weight_decay": 0.01,
            "checkpoint_every": 100,
        },
        "sample": {"hypotheses": 4, "iterations": 4},
    },
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _merge(DEFAULTS, PRESETS[name])


def load_config(path=None, preset_name: str | None = None, overrides: dict | None = None) -> dict:
    """Preset (or defaults), overlaid with a JSON file, overlaid with overrides."""
    cfg = preset(preset_name) if preset_name else default_config()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config root must be an object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    if cfg["dtype"] not in _DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {cfg['dtype']!r}")
    if cfg["prompt"]["encoder"] not in ("hashed", "file"):
        raise ConfigError("prompt.encoder must be 'hashed' or 'file'")
    if cfg["prompt"]["encoder"] == "file" and not cfg["prompt"]["embeddings_file"]:
        raise ConfigError("prompt.encoder='file' needs prompt.embeddings_file")
    if cfg["data"]["normalize"] not in ("root_centered", "image_normalized"):
        raise ConfigError("data.normalize must be root_centered or image_normalized")
    if cfg["sample"]["hypotheses"] < 1 or cfg["sample"]["iterations"] < 1:
        raise ConfigError("sample.hypotheses and sample.iterations must be >= 1")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()[:16]


class Runtime:
    """Everything a command needs, assembled from one validated config."""

    def __init__(self, cfg: dict):
        _validate(cfg)
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.dtype = _DTYPES[cfg["dtype"]]
        s = cfg["schedule"]
        self.sched = build_schedule(s["T"], s["kind"], s["beta_min"], s["beta_max"])
        m = cfg["model"]
        self.model_config = DenoiserConfig(
            n_frames=cfg["data"]["n_frames"],
            n_joints=cfg["data"]["n_joints"],
            feature_dim=m["feature_dim"],
            heads=m["heads"],
            blocks_spatial=m["blocks_spatial"],
            blocks_temporal=m["blocks_temporal"],
            blocks_spatio_temporal=m["blocks_spatio_temporal"],
            mlp_ratio=m["mlp_ratio"],
            use_fpp=m["use_fpp"],
            use_fpc=m["use_fpc"],
            use_pts=m["use_pts"],
        )
        self.model = Denoiser.create(self.model_config, seed=cfg["seed"], dtype=self.dtype)
        self.bank = None
        if m["use_fpp"]:
            p = cfg["prompt"]
            if p["encoder"] == "file":
                encoder = PrecomputedTextEncoder(p["embeddings_file"])
                if encoder.embed_dim != m["feature_dim"]:
                    raise ConfigError(
                        f"embedding file dim {encoder.embed_dim} != model dim {m['feature_dim']}"
                    )
            else:
                encoder = HashTextEncoder(m["feature_dim"], seed=p["encoder_seed"])
            self.bank = PromptBank(
                PromptSpec(), encoder, seed=cfg["seed"], dtype=self.dtype
            )
        t = cfg["train"]
        self.train_config = TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr0=t["lr0"],
            lr_decay=t["lr_decay"],
            adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"],
            weight_decay=t["weight_decay"],
            grad_clip=t["grad_clip"],
        )

    def prompt_for(self, action: str | None):
        if self.bank is None:
            return None
        return self.bank.assemble(action)


def build_runtime(cfg: dict) -> Runtime:
    return Runtime(cfg)
