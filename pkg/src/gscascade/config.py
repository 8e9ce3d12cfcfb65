"""Run configuration: JSON document + environment + CLI flag merging.

Precedence (highest wins): CLI flags > GSCASCADE_* environment variables >
config file > built-in defaults. Documents are schema-checked before any work
starts; unknown keys anywhere are an error (exit code 2 in the CLI).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .losses import LossWeights
from .optimize import TrainConfig
from .scenegen import SceneSpec


class ConfigError(Exception):
    pass


_SCENE_KEYS = {"kind", "n_gaussians", "n_frames", "motion_magnitude", "noise_sigma", "seed"}
_TRAIN_KEYS = {
    "iters_per_frame", "lr_rot", "lr_trans", "lr_scaledir", "lr_sbias", "lr_delta",
    "adam_beta1", "adam_beta2", "adam_eps", "max_scale", "layer_sizes", "k_neighbors",
    "lambda_weight", "propagate_covariance", "anchored", "warm_start_params",
    "recluster_every",
}
_WEIGHT_KEYS = {"w_rigid", "w_iso", "w_rot", "w_scale", "w_data"}
_SEG_KEYS = {"k_parts", "lambda_p", "lambda_r", "lambda_p0"}
_TRACK_KEYS = {"camera_index", "n_tracks"}
_TOP_KEYS = {"scene", "scene_dir", "train", "weights", "segmentation", "tracking",
             "out", "seed", "threads"}

ENV_PREFIX = "GSCASCADE_"


def _check_keys(section, mapping, allowed):
    if not isinstance(mapping, dict):
        raise ConfigError(f"'{section}' must be a JSON object")
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")


@dataclass
class RunConfig:
    scene: dict = None  # raw SceneSpec kwargs (seed filled at build time)
    scene_dir: str = None
    train: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    out: str = None
    seed: int = 0
    threads: int = 1

    def scene_spec(self):
        if self.scene is None:
            raise ConfigError("config has no 'scene' section")
        kwargs = dict(self.scene)
        kwargs.setdefault("seed", self.seed)
        try:
            return SceneSpec(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid scene spec: {e}") from e

    def train_config(self, scene_scale=1.0):
        kwargs = dict(self.train)
        try:
            weights = LossWeights(**self.weights)
            return TrainConfig(
                weights=weights,
                seed=self.seed,
                scene_scale=scene_scale,
                threads=self.threads,
                **kwargs,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid train config: {e}") from e

    def seg_options(self):
        opts = {"k_parts": 2, "lambda_p": 1.0, "lambda_r": 1.0, "lambda_p0": 1.0}
        opts.update(self.segmentation)
        return opts

    def track_options(self):
        opts = {"camera_index": 0, "n_tracks": 12}
        opts.update(self.tracking)
        return opts


def _parse_layers(text):
    try:
        sizes = tuple(int(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError as e:
        raise ConfigError(f"invalid layer list '{text}': {e}") from e
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError(f"invalid layer list '{text}'")
    return sizes


def _coerce(name, value, kind):
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {name}: {value!r}") from e


def load_run_config(document=None, env=None, cli=None):
    """Merge a parsed JSON document, environment dict, and CLI namespace."""
    cfg = RunConfig()

    if document is not None:
        _check_keys("config", document, _TOP_KEYS)
        if "scene" in document:
            _check_keys("scene", document["scene"], _SCENE_KEYS)
            cfg.scene = dict(document["scene"])
        if "train" in document:
            _check_keys("train", document["train"], _TRAIN_KEYS)
            cfg.train = dict(document["train"])
            if "layer_sizes" in cfg.train:
                sizes = cfg.train["layer_sizes"]
                if isinstance(sizes, str):
                    sizes = _parse_layers(sizes)
                cfg.train["layer_sizes"] = tuple(int(s) for s in sizes)
        if "weights" in document:
            _check_keys("weights", document["weights"], _WEIGHT_KEYS)
            cfg.weights = dict(document["weights"])
        if "segmentation" in document:
            _check_keys("segmentation", document["segmentation"], _SEG_KEYS)
            cfg.segmentation = dict(document["segmentation"])
        if "tracking" in document:
            _check_keys("tracking", document["tracking"], _TRACK_KEYS)
            cfg.tracking = dict(document["tracking"])
        if "scene_dir" in document:
            cfg.scene_dir = str(document["scene_dir"])
        if "out" in document:
            cfg.out = str(document["out"])
        if "seed" in document:
            cfg.seed = _coerce("seed", document["seed"], int)
        if "threads" in document:
            cfg.threads = _coerce("threads", document["threads"], int)

    env = os.environ if env is None else env
    if env.get(ENV_PREFIX + "SEED") is not None:
        cfg.seed = _coerce("GSCASCADE_SEED", env[ENV_PREFIX + "SEED"], int)
    if env.get(ENV_PREFIX + "THREADS") is not None:
        cfg.threads = _coerce("GSCASCADE_THREADS", env[ENV_PREFIX + "THREADS"], int)
    if env.get(ENV_PREFIX + "OUT") is not None:
        cfg.out = env[ENV_PREFIX + "OUT"]
    if env.get(ENV_PREFIX + "ITERS") is not None:
        cfg.train["iters_per_frame"] = _coerce(
            "GSCASCADE_ITERS", env[ENV_PREFIX + "ITERS"], int
        )
    if env.get(ENV_PREFIX + "LAYERS") is not None:
        cfg.train["layer_sizes"] = _parse_layers(env[ENV_PREFIX + "LAYERS"])
    if env.get(ENV_PREFIX + "MAX_SCALE") is not None:
        cfg.train["max_scale"] = _coerce(
            "GSCASCADE_MAX_SCALE", env[ENV_PREFIX + "MAX_SCALE"], float
        )

    if cli is not None:
        if getattr(cli, "seed", None) is not None:
            cfg.seed = int(cli.seed)
        if getattr(cli, "threads", None) is not None:
            cfg.threads = int(cli.threads)
        if getattr(cli, "out", None) is not None:
            cfg.out = cli.out
        if getattr(cli, "iters", None) is not None:
            cfg.train["iters_per_frame"] = int(cli.iters)
        if getattr(cli, "layers", None) is not None:
            cfg.train["layer_sizes"] = _parse_layers(cli.layers)
        if getattr(cli, "max_scale", None) is not None:
            cfg.train["max_scale"] = float(cli.max_scale)

    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg
