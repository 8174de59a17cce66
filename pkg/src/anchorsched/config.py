"""Run configuration: profiles, JSON files, environment variables and flag overrides.

Precedence, highest first: command-line flags, ``ANCHORSCHED_*`` environment
variables, the JSON config file, the named profile's defaults.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .agent import AgentConfig
from .env import ConfigError, EnvConfig
from .experiment import EvalProtocol, ExperimentConfig

ENV_PREFIX = "ANCHORSCHED_"

_PAPER = {
    "profile": "paper",
    "seed": 0,
    "out": "runs/paper",
    "env": {
        "num_users": 5,
        "total_blocks": 10,
        "max_init_blocks": 7,
        "max_delay": 5,
        "p_job": 0.5,
        "p_prio": 0.0001,
        "snr_db": 10.0,
        "rayleigh_scale": 0.3,
        "w_capacity": 1.0,
        "w_timeout_normal": 1.0,
        "w_timeout_prio": 5.0,
        "priority_first": True,
    },
    "training": {
        "episodes": 30,
        "steps_per_episode": 10000,
        "batch_size": 256,
        "replay_capacity": 100000,
        "hidden_widths": [128, 128, 128],
        "hidden_activation": "relu",
        "actor_lr": 0.001,
        "critic_lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-08,
        "epsilon_initial": 1.0,
        "epsilon_decay_fraction": 0.5,
        "dtype": "float32",
    },
    "experiment": {
        "repetitions": 3,
        "anchor_weights": [100000.0, 1000000.0, 10000000.0],
        "p_prio_augmented": 0.2,
        "p_prio_priority": 1.0,
        "p_prio_forgetting": 0.0,
        "augmented_episode_factor": 2,
        "eval": {"episodes": 5, "steps_per_episode": 200000, "p_prio": 0.0001},
    },
}


def _desk():
    d = copy.deepcopy(_PAPER)
    d["profile"] = "desk"
    d["out"] = "runs/desk"
    d["training"]["episodes"] = 10
    d["training"]["steps_per_episode"] = 2000
    d["experiment"]["eval"] = {"episodes": 2, "steps_per_episode": 20000, "p_prio": 0.001}
    return d


PROFILES = {"paper": _PAPER, "desk": _desk()}

# flag / env-var name -> path inside the config dict
OVERRIDE_PATHS = {
    "seed": ("seed",),
    "out": ("out",),
    "episodes": ("training", "episodes"),
    "steps": ("training", "steps_per_episode"),
    "repetitions": ("experiment", "repetitions"),
}


def profile_defaults(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def _check_keys(data: dict, template: dict, where: str) -> list[str]:
    problems = []
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in template:
            problems.append(f"unknown key {path!r}")
        elif isinstance(template[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{path!r} must be an object")
            else:
                problems.extend(_check_keys(value, template[key], path))
    return problems


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_path(data: dict, path: tuple, value) -> None:
    for key in path[:-1]:
        data = data[key]
    data[path[-1]] = value


@dataclass
class RunConfig:
    data: dict

    @property
    def profile(self) -> str:
        return self.data["profile"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.data["env"])

    def agent_config(self) -> AgentConfig:
        t = {k: v for k, v in self.data["training"].items() if k not in ("episodes", "steps_per_episode")}
        return AgentConfig(**t)

    def experiment_config(self) -> ExperimentConfig:
        e = self.data["experiment"]
        t = self.data["training"]
        return ExperimentConfig(
            env=self.env_config(),
            agent=self.agent_config(),
            episodes=int(t["episodes"]),
            steps_per_episode=int(t["steps_per_episode"]),
            repetitions=int(e["repetitions"]),
            anchor_weights=tuple(float(w) for w in e["anchor_weights"]),
            p_prio_augmented=float(e["p_prio_augmented"]),
            p_prio_priority=float(e["p_prio_priority"]),
            p_prio_forgetting=float(e["p_prio_forgetting"]),
            augmented_episode_factor=int(e["augmented_episode_factor"]),
            evaluation=EvalProtocol(int(e["eval"]["episodes"]), int(e["eval"]["steps_per_episode"]),
                                    float(e["eval"]["p_prio"])),
        )

    def validate(self) -> None:
        problems = _check_keys(self.data, _PAPER, "")
        if problems:
            raise ConfigError("; ".join(problems))
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: unknown profile {self.profile!r}")
        checks = [
            ("env", self.env_config),
            ("training", self.agent_config),
            ("experiment", self.experiment_config),
        ]
        for block, build in checks:
            try:
                build()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{block}: {exc}") from exc
        t, e = self.data["training"], self.data["experiment"]
        for path, value in [("training.episodes", t["episodes"]),
                            ("training.steps_per_episode", t["steps_per_episode"]),
                            ("experiment.repetitions", e["repetitions"]),
                            ("experiment.augmented_episode_factor", e["augmented_episode_factor"]),
                            ("experiment.eval.episodes", e["eval"]["episodes"]),
                            ("experiment.eval.steps_per_episode", e["eval"]["steps_per_episode"])]:
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{path} must be a positive integer, got {value!r}")
        if len(e["anchor_weights"]) != 3 or any(w < 0 for w in e["anchor_weights"]):
            raise ConfigError("experiment.anchor_weights must hold three nonnegative weights")
        for key in ("p_prio_augmented", "p_prio_priority", "p_prio_forgetting"):
            if not 0.0 <= e[key] <= 1.0:
                raise ConfigError(f"experiment.{key} must lie in [0, 1]")
        if not 0.0 <= e["eval"]["p_prio"] <= 1.0:
            raise ConfigError("experiment.eval.p_prio must lie in [0, 1]")
        if not isinstance(self.data["seed"], int) or self.data["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        relevant = {k: v for k, v in self.data.items() if k != "out"}
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    # a run manifest embeds the effective configuration
    if "config" in data and "config_hash" in data:
        data = data["config"]
    return data


def _env_overrides(environ) -> dict:
    out = {}
    for name in (*OVERRIDE_PATHS, "profile"):
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        if name in ("out", "profile"):
            out[name] = raw
        else:
            try:
                out[name] = int(raw)
            except ValueError:
                raise ConfigError(f"{ENV_PREFIX}{name.upper()} must be an integer, got {raw!r}") from None
    return out


def load_config(path=None, profile: str | None = None, overrides: dict | None = None,
                environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    env_values = _env_overrides(environ)
    file_data = read_config_file(path) if path is not None else {}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}

    name = profile or env_values.get("profile") or file_data.get("profile") or "paper"
    data = profile_defaults(name)
    problems = _check_keys(file_data, _PAPER, "")
    if problems:
        raise ConfigError("; ".join(problems))
    data = _merge(data, file_data)
    data["profile"] = name
    for source in (env_values, flags):
        for key, value in source.items():
            if key == "profile":
                continue
            if key not in OVERRIDE_PATHS:
                raise ConfigError(f"unknown override {key!r}")
            _set_path(data, OVERRIDE_PATHS[key], value)
    cfg = RunConfig(data)
    cfg.validate()
    return cfg
