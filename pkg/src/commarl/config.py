"""Experiment configuration files and run manifests.

Configs are JSON objects with four blocks (scenario, training, protocol,
channel) plus a root seed and an output directory. Every field is
validated before a run starts and unknown keys are rejected with the
offending field named, so a typo fails loudly instead of silently
falling back to a default.
"""

import datetime
import json
import os
import tempfile

from . import __version__
from .env import EnvError, ScenarioConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    """A config file or block failed validation."""


OUTPUT_ROOT_ENV = "COMMARL_OUTPUT_ROOT"
CHANNEL_CONDITIONS = ("none", "light", "medium", "heavy", "custom")

_SCENARIO_KEYS = ("name", "width", "height", "n_agents", "n_targets",
                  "sight", "obstacles", "episode_limit", "capture_bonus",
                  "collision_penalty")
_TRAINING_KEYS = ("episodes", "gamma", "lambda_s", "lambda_r", "betas",
                  "hidden", "learning_rate", "batch_size", "buffer_capacity",
                  "target_sync", "grad_clip", "eps_start", "eps_end",
                  "eps_anneal_frac", "eval_every", "eval_episodes",
                  "divergence_limit", "divergence_patience")
_PROTOCOL_KEYS = ("delta", "window")
_CHANNEL_KEYS = ("condition", "model_file")
_TOP_KEYS = ("scenario", "training", "protocol", "channel", "seed",
             "output_dir")


def _require_block(data, key):
    block = data.get(key)
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError("field %s must be an object" % key)
    return block


def _check_keys(block, allowed, prefix):
    for key in block:
        if key not in allowed:
            name = "%s.%s" % (prefix, key) if prefix else str(key)
            raise ConfigError("unknown field: %s" % name)


def scenario_to_dict(cfg):
    return {
        "name": cfg.name,
        "width": cfg.width,
        "height": cfg.height,
        "n_agents": cfg.n_agents,
        "n_targets": cfg.n_targets,
        "sight": cfg.sight,
        "obstacles": sorted([x, y] for x, y in cfg.obstacles),
        "episode_limit": cfg.episode_limit,
        "capture_bonus": cfg.capture_bonus,
        "collision_penalty": cfg.collision_penalty,
    }


def scenario_from_dict(block):
    _check_keys(block, _SCENARIO_KEYS, "scenario")
    if "name" not in block:
        raise ConfigError("missing field: scenario.name")
    kwargs = dict(block)
    if "obstacles" in kwargs:
        try:
            kwargs["obstacles"] = [tuple(cell) for cell in kwargs["obstacles"]]
        except TypeError as exc:
            raise ConfigError("scenario.obstacles: %s" % exc) from exc
    try:
        return ScenarioConfig(**kwargs)
    except (EnvError, TypeError, ValueError) as exc:
        raise ConfigError("scenario: %s" % exc) from exc


def training_to_dict(cfg):
    """Training block of the normalized snapshot (protocol keys excluded)."""
    return {
        "episodes": cfg.episodes,
        "gamma": cfg.gamma,
        "lambda_s": cfg.lambda_s,
        "lambda_r": cfg.lambda_r,
        "betas": list(cfg.betas),
        "hidden": cfg.hidden,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "buffer_capacity": cfg.buffer_capacity,
        "target_sync": cfg.target_sync,
        "grad_clip": cfg.grad_clip,
        "eps_start": cfg.eps_start,
        "eps_end": cfg.eps_end,
        "eps_anneal_frac": cfg.eps_anneal_frac,
        "eval_every": cfg.eval_every,
        "eval_episodes": cfg.eval_episodes,
        "divergence_limit": cfg.divergence_limit,
        "divergence_patience": cfg.divergence_patience,
    }


class ExperimentConfig:
    """Validated contents of one experiment config file."""

    def __init__(self, scenario, training, channel, seed, output_dir):
        self.scenario = scenario
        self.training = training
        self.channel = channel
        self.seed = seed
        self.output_dir = output_dir

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(data, _TOP_KEYS, "")
        if "scenario" not in data:
            raise ConfigError("missing field: scenario")

        scenario = scenario_from_dict(_require_block(data, "scenario"))

        protocol = _require_block(data, "protocol")
        _check_keys(protocol, _PROTOCOL_KEYS, "protocol")
        train_block = _require_block(data, "training")
        _check_keys(train_block, _TRAINING_KEYS, "training")
        kwargs = dict(train_block)
        kwargs.update(protocol)
        try:
            training = TrainingConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError("training: %s" % exc) from exc

        chan = _require_block(data, "channel")
        _check_keys(chan, _CHANNEL_KEYS, "channel")
        condition = chan.get("condition", "none")
        if condition not in CHANNEL_CONDITIONS:
            raise ConfigError("channel.condition must be one of %s"
                              % (CHANNEL_CONDITIONS,))
        model_file = chan.get("model_file")
        if condition == "custom" and not model_file:
            raise ConfigError("channel.condition 'custom' needs "
                              "channel.model_file")
        if condition != "custom" and model_file:
            raise ConfigError("channel.model_file only applies to "
                              "condition 'custom'")
        channel = {"condition": condition}
        if model_file:
            channel["model_file"] = str(model_file)

        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")

        output_dir = data.get("output_dir", os.path.join("runs",
                                                         scenario.name))
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigError("output_dir must be a non-empty string")

        return cls(scenario, training, channel, seed, output_dir)

    def to_dict(self):
        """Fully populated snapshot that round-trips through from_dict."""
        training = training_to_dict(self.training)
        return {
            "scenario": scenario_to_dict(self.scenario),
            "training": training,
            "protocol": {"delta": self.training.delta,
                         "window": self.training.window},
            "channel": dict(self.channel),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("%s: %s" % (path, exc)) from exc
    return ExperimentConfig.from_dict(data)


def default_config(name, **top_level):
    """Normalized config dict for a stock scenario; kwargs override."""
    data = {"scenario": {"name": name}}
    data.update(top_level)
    return ExperimentConfig.from_dict(data).to_dict()


def resolve_output_dir(path):
    """Relative output paths land under the env-var root when it is set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


# -- manifests ------------------------------------------------------------

def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(
        timespec="seconds")


def write_json_atomic(path, payload):
    """Write JSON to a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Record tying one run's artifacts to its config, seed and build."""

    def __init__(self, command, config_snapshot, seed):
        self.command = command
        self.config = config_snapshot
        self.seed = seed
        self.version = __version__
        self.started = _now()
        self.finished = None
        self.artifacts = {}

    def as_dict(self):
        return {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "started": self.started,
            "finished": self.finished,
            "config": self.config,
            "artifacts": dict(self.artifacts),
        }

    def write(self, path):
        if self.finished is None:
            self.finished = _now()
        write_json_atomic(path, self.as_dict())
