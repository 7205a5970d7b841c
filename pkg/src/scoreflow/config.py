"""Run configuration: YAML schema, validation, canonical hashing.

The config file is a nested key-value document with blocks `problem`,
`flow`, `training`, `eval`, `sweep`, `paths`, plus top-level `seed` and
`threads`. Unknown keys anywhere are errors so hyperparameter typos fail
fast. Every output artifact embeds the sha256 hash of the canonicalized
config so results can be traced back to their exact settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .pipeline import FlowConfig, TrainConfig
from .problems import InverseProblem, LinearGaussianProblem, NonlinearToyProblem


class ConfigError(ValueError):
    """Raised for unknown keys, missing fields, or out-of-range values."""


_PROBLEM_DEFAULTS = {
    "linear_gaussian": {
        "x_dim": 16,
        "y_dim": 64,
        "noise_std": 0.1,
        "prior_condition": 10.0,
        "seed": 2024,
    },
    "nonlinear_toy": {
        "grid": 16,
        "observed_rows": 6,
        "noise_std": 0.05,
        "nonlin_scale": 3.0,
        "blur_sigma": 1.0,
        "interior_base": 0.5,
        "fiducial_interior": 3.0,
        "blob_scale": 0.8,
        "blob_smoothness": 2.0,
        "rim_center": 1.5,
        "rim_halfwidth": 0.1,
    },
}

_FLOW_DEFAULTS = {"n_blocks": 6, "hidden": [128, 128], "s_max": 2.0}

_TRAINING_DEFAULTS = {
    "lr": 1e-3,
    "weight_decay": 0.0,
    "batch_size": 64,
    "max_epochs": 400,
    "patience": 50,
    "n_train": 1000,
    "stages": 3,
    "n_s_train": 64,
    "n_s_infer": 256,
    "val_fraction": 0.1,
}

_EVAL_DEFAULTS = {"n_test": 50, "n_samples": 2000, "psnr_range": 2.0}

_SWEEP_DEFAULTS = {"sizes": [400, 1000, 2000]}

_PATHS_DEFAULTS = {"out_dir": "runs/out"}


def _merge_block(name: str, defaults: dict, given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"config block '{name}' must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    problem: dict
    flow: dict = field(default_factory=lambda: dict(_FLOW_DEFAULTS))
    training: dict = field(default_factory=lambda: dict(_TRAINING_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))
    sweep: dict = field(default_factory=lambda: dict(_SWEEP_DEFAULTS))
    paths: dict = field(default_factory=lambda: dict(_PATHS_DEFAULTS))
    seed: int = 0
    threads: int = 0  # 0 = all available; generation is vectorized, so advisory

    def as_dict(self) -> dict:
        return {
            "problem": self.problem,
            "flow": self.flow,
            "training": self.training,
            "eval": self.eval,
            "sweep": self.sweep,
            "paths": self.paths,
            "seed": self.seed,
            "threads": self.threads,
        }

    def config_hash(self) -> str:
        return canonical_hash(self.as_dict())

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            n_blocks=self.flow["n_blocks"],
            hidden=tuple(self.flow["hidden"]),
            s_max=self.flow["s_max"],
        )

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            lr=t["lr"],
            weight_decay=t["weight_decay"],
            batch_size=t["batch_size"],
            max_epochs=t["max_epochs"],
            patience=t["patience"],
            n_s_train=t["n_s_train"],
            n_s_infer=t["n_s_infer"],
            val_fraction=t["val_fraction"],
        )


def canonical_hash(d: dict) -> str:
    """sha256 of the sorted-key JSON serialization."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def validate_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known_top = {"problem", "flow", "training", "eval", "sweep", "paths", "seed", "threads"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "problem" not in raw:
        raise ConfigError("missing required block 'problem'")
    prob_raw = raw["problem"]
    if not isinstance(prob_raw, dict) or "kind" not in prob_raw:
        raise ConfigError("'problem' must be a mapping with a 'kind' key")
    kind = prob_raw["kind"]
    if kind not in _PROBLEM_DEFAULTS:
        raise ConfigError(f"unknown problem kind '{kind}', expected one of {sorted(_PROBLEM_DEFAULTS)}")
    prob = _merge_block(
        "problem", {**_PROBLEM_DEFAULTS[kind], "kind": kind}, prob_raw
    )
    cfg = RunConfig(
        problem=prob,
        flow=_merge_block("flow", _FLOW_DEFAULTS, raw.get("flow", {})),
        training=_merge_block("training", _TRAINING_DEFAULTS, raw.get("training", {})),
        eval=_merge_block("eval", _EVAL_DEFAULTS, raw.get("eval", {})),
        sweep=_merge_block("sweep", _SWEEP_DEFAULTS, raw.get("sweep", {})),
        paths=_merge_block("paths", _PATHS_DEFAULTS, raw.get("paths", {})),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 0)),
    )
    _validate_values(cfg)
    return cfg


def _validate_values(cfg: RunConfig) -> None:
    t = cfg.training
    for key in ("batch_size", "max_epochs", "patience", "n_train", "n_s_train", "n_s_infer"):
        if int(t[key]) < 1:
            raise ConfigError(f"training.{key} must be >= 1, got {t[key]}")
    if int(t["stages"]) < 0:
        raise ConfigError(f"training.stages must be >= 0, got {t['stages']}")
    if not 0.0 <= float(t["val_fraction"]) < 1.0:
        raise ConfigError(f"training.val_fraction must be in [0, 1), got {t['val_fraction']}")
    if float(t["lr"]) <= 0:
        raise ConfigError(f"training.lr must be positive, got {t['lr']}")
    for key in ("n_test", "n_samples"):
        if int(cfg.eval[key]) < 1:
            raise ConfigError(f"eval.{key} must be >= 1, got {cfg.eval[key]}")
    if float(cfg.eval["psnr_range"]) <= 0:
        raise ConfigError(f"eval.psnr_range must be positive, got {cfg.eval['psnr_range']}")
    if int(cfg.flow["n_blocks"]) < 1:
        raise ConfigError(f"flow.n_blocks must be >= 1, got {cfg.flow['n_blocks']}")
    sizes = cfg.sweep["sizes"]
    if not isinstance(sizes, list) or not sizes or any(int(s) < 1 for s in sizes):
        raise ConfigError(f"sweep.sizes must be a nonempty list of positive ints, got {sizes}")


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return validate_config(raw or {})


def problem_from_config(prob: dict) -> InverseProblem:
    """Build a problem instance from a validated problem block."""
    kind = prob.get("kind")
    if kind == "linear_gaussian":
        return LinearGaussianProblem.replication(
            x_dim=int(prob["x_dim"]),
            y_dim=int(prob["y_dim"]),
            noise_std=float(prob["noise_std"]),
            prior_condition=float(prob["prior_condition"]),
            seed=int(prob["seed"]),
        )
    if kind == "nonlinear_toy":
        return NonlinearToyProblem(
            grid=int(prob["grid"]),
            observed_rows=int(prob["observed_rows"]),
            noise_std=float(prob["noise_std"]),
            nonlin_scale=float(prob["nonlin_scale"]),
            blur_sigma=float(prob["blur_sigma"]),
            interior_base=float(prob["interior_base"]),
            fiducial_interior=float(prob["fiducial_interior"]),
            blob_scale=float(prob["blob_scale"]),
            blob_smoothness=float(prob["blob_smoothness"]),
            rim_center=float(prob["rim_center"]),
            rim_halfwidth=float(prob["rim_halfwidth"]),
        )
    raise ConfigError(f"unknown problem kind '{kind}'")
