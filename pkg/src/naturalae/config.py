"""Experiment configuration: one INI file, strict keys, named seed streams."""

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig
from .detector import ARCHITECTURES
from .evaluation import ENVIRONMENTS
from .transforms import TransformConfig


class ConfigError(ValueError):
    pass


def _floats(text, n=None):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return tuple(vals)


def _words(text):
    return tuple(w for w in text.replace(",", " ").split() if w)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "seed": (int, 20200711),
        "output_dir": (str, "naturalae_out"),
    },
    "data": {
        "train_samples": (int, 2000),
        "test_samples": (int, 200),
        "image_size": (int, 64),
    },
    "train": {
        "epochs": (int, 30),
        "batch_size": (int, 32),
        "lr": (float, 3e-3),
        # arch/replica names; replica 0 of the first entry is the attack target
        "variants": (_words, ("wide/0", "narrow/0", "wide/1", "wide/2")),
    },
    "transforms": {
        "scale": (lambda t: _floats(t, 2), (0.3, 1.0)),
        "angle": (lambda t: _floats(t, 2), (-60.0, 60.0)),
        "brightness": (lambda t: _floats(t, 2), (-0.25, 0.25)),
        "contrast": (lambda t: _floats(t, 2), (0.6, 1.4)),
        "noise_sigma": (lambda t: _floats(t, 2), (0.0, 0.06)),
        "base_kernel": (int, 3),
        "max_kernel": (int, 9),
    },
    "attack": {
        "target": (str, "wide/0"),
        "alpha": (float, 0.3),
        "beta": (float, 0.3),
        "gamma": (float, 0.01),
        "p_norm": (int, 2),
        "mc_batch": (int, 8),
        "lr_delta": (float, 0.01),
        "lr_mask": (float, 0.01),
        "max_iters": (int, 1500),
        "stop_threshold": (float, -2.0),
        "project_white": (_bool, True),
    },
    "rps": {
        "tau": (float, 0.2),
        "active_eps": (float, 2.0 / 255.0),
        "sources": (int, 12),
    },
    "eval": {
        "environments": (_words, ("outdoor", "indoor")),
    },
}

STREAMS = {"data": 1, "train": 2, "attack": 3, "eval": 4, "noise": 5, "test": 6}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    path: str = ""

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    @property
    def output_dir(self):
        return os.environ.get("NATURALAE_OUT") or self.values["experiment"]["output_dir"]

    def stream_seed(self, name, *extra):
        """Independent 63-bit seed for a named sub-stream of the global seed."""
        ss = np.random.SeedSequence([self.seed, STREAMS[name], *extra])
        return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))

    def transform_config(self):
        t = self.values["transforms"]
        return TransformConfig(
            scale=t["scale"],
            angle=t["angle"],
            brightness=t["brightness"],
            contrast=t["contrast"],
            noise_sigma=t["noise_sigma"],
            base_kernel=t["base_kernel"],
            max_kernel=t["max_kernel"],
            mc_batch=self.values["attack"]["mc_batch"],
        )

    def attack_config(self):
        a = dict(self.values["attack"])
        a.pop("target")
        return AttackConfig(seed=self.stream_seed("attack"), active_eps=self.values["rps"]["active_eps"], **a)


def parse_variant(text):
    arch, _, replica = text.partition("/")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}")
    return arch, int(replica or 0)


def load_config(path=None, seed=None):
    """Parse ``path`` (defaults only when None); every error surfaces as ConfigError."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    errors = []
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {k: default for k, (_, default) in keys.items()}
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                errors.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                values[section][key] = keys[key][0](raw)
            except ValueError as e:
                errors.append(f"[{section}] {key} = {raw!r}: {e}")
    if seed is not None:
        values["experiment"]["seed"] = int(seed)
    cfg = ExperimentConfig(values, path or "")
    if not errors:
        errors = _validate(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def _validate(cfg):
    errors = []
    try:
        variants = [parse_variant(v) for v in cfg["train.variants"]]
        if len(set(variants)) != len(variants):
            errors.append("[train] variants must be distinct")
        if parse_variant(cfg["attack.target"]) not in variants:
            errors.append(f"[attack] target {cfg['attack.target']!r} is not listed in [train] variants")
    except ValueError as e:
        errors.append(f"[train] variants: {e}")
    for env in cfg["eval.environments"]:
        if env not in ENVIRONMENTS:
            errors.append(f"[eval] unknown environment {env!r}")
    for key in ("data.train_samples", "data.test_samples", "train.batch_size", "rps.sources"):
        if cfg[key] < 1:
            errors.append(f"{key} must be >= 1")
    if cfg["train.epochs"] < 0:
        errors.append("train.epochs must be >= 0")
    if cfg["data.image_size"] < 32:
        errors.append("data.image_size must be >= 32")
    if cfg["rps.tau"] <= 0:
        errors.append("rps.tau must be > 0")
    for build in (cfg.transform_config, cfg.attack_config):
        try:
            build()
        except (ValueError, TypeError) as e:
            errors.append(str(e))
    return errors
