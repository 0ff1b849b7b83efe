"""Experiment configuration: one INI file drives every command.

Every knob has a default, so an empty (or absent) file is a complete
desk-scale experiment.  Unknown sections or keys are rejected rather
than ignored, and command-line values override file values.  The fully
resolved configuration can be written back out as a snapshot whose
parse is value-identical to the in-memory one.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .align import AlignConfig
from .errors import ConfigError
from .nar import NarConfig
from .policy import ArConfig
from .world import WorldConfig

# section -> key -> default (the type of the default is the type of the key)
SCHEMA: dict[str, dict[str, object]] = {
    "world": {
        "v_text": 16, "l_text": 12, "k_ar": 32, "k_nar": 32, "q_layers": 3,
        "expansion": 2, "speakers": 8, "tau_oracle": 0.5, "eps_nar": 0.05,
        "d_emb": 16, "world_seed": 20240917,
    },
    "policy": {
        "d_model": 64, "n_layers": 2, "n_heads": 2, "d_ffn": 256,
        "max_context": 64, "init_std": 0.02, "param_seed": 0,
    },
    "nar": {
        "prompt_len": 8, "decode_steps": 4, "d_model": 64, "n_layers": 2,
        "n_heads": 2, "d_ffn": 256, "init_std": 0.02, "param_seed": 0,
    },
    "align": {
        "method": "dpo", "lr": 1e-3, "batch": 16, "epochs": 1, "seed": 0,
        "temperature": 1.0, "dpo_beta": 1.0, "ppo_clip": 0.2,
        "ppo_kl_beta": 0.05, "ppo_kl_abort": 10.0, "ppo_steps": 30,
        "ppo_rollout_batch": 16, "ppo_inner_epochs": 2, "bon_n": 8,
    },
    "data": {
        "sft_n": 5000, "sft_epochs": 4, "sft_lr": 3e-3, "sft_batch": 32,
        "nar_n": 2000, "nar_epochs": 4, "nar_lr": 3e-3, "nar_batch": 32,
        "pref_n": 500, "eval_n": 1000, "eval_reps": 10,
        "eval_temperature": 1.0,
    },
    "iterate": {
        "iterations": 3,
    },
    "run": {
        "seed": 0, "workers": 1,
    },
    # paths a command was invoked with; recorded so a snapshot is a complete
    # description of the run and can be fed back in as a config
    "args": {
        "policy": "", "nar": "", "prefs": "", "baseline": "", "reward": "",
        "run": "",
    },
}


def _convert(section: str, key: str, raw: object):
    default = SCHEMA[section][key]
    if not isinstance(raw, str):
        raw_t, def_t = type(raw), type(default)
        if raw_t is def_t or (def_t is float and raw_t is int):
            return default.__class__(raw)
        raise ConfigError(f"[{section}] {key}: expected "
                          f"{def_t.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if isinstance(default, bool):
            raise ConfigError(f"[{section}] {key}: unsupported type")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as "
            f"{type(default).__name__}") from e


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration values, keyed [section][key]."""
    values: dict

    def get(self, section: str, key: str):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"no such config entry [{section}] {key}")

    # --- typed views -------------------------------------------------------

    def world_config(self) -> WorldConfig:
        return WorldConfig(**self.values["world"])

    def ar_config(self) -> ArConfig:
        return ArConfig.for_world(self.world_config(), **self.values["policy"])

    def nar_config(self) -> NarConfig:
        return NarConfig.for_world(self.world_config(), **self.values["nar"])

    def align_config(self, **overrides) -> AlignConfig:
        merged = dict(self.values["align"])
        merged.update({k: v for k, v in overrides.items() if v is not None})
        cfg = AlignConfig(**merged)
        cfg.validate()
        return cfg

    # --- construction ------------------------------------------------------

    @staticmethod
    def load(path: str | None = None,
             overrides: list[str] | None = None) -> "ExperimentConfig":
        """Defaults, then file values, then `section.key=value` overrides."""
        values = {sec: dict(keys) for sec, keys in SCHEMA.items()}
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, "r", encoding="utf-8") as f:
                    parser.read_file(f)
            except configparser.Error as e:
                raise ConfigError(f"{path}: {e}") from e
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(
                        f"{path}: unknown section [{section}]; known: "
                        f"{', '.join(SCHEMA)}")
                for key, raw in parser.items(section):
                    if key not in SCHEMA[section]:
                        raise ConfigError(
                            f"{path}: unknown key {key!r} in [{section}]; "
                            f"known: {', '.join(SCHEMA[section])}")
                    values[section][key] = _convert(section, key, raw)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(
                    f"override must look like section.key=value, got {item!r}")
            target, raw = item.split("=", 1)
            section, key = target.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config entry [{section}] {key}")
            values[section][key] = _convert(section, key, raw)
        return ExperimentConfig(values=values)

    def override(self, section: str, key: str, value) -> "ExperimentConfig":
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        values = {sec: dict(keys) for sec, keys in self.values.items()}
        values[section][key] = _convert(section, key, value)
        return ExperimentConfig(values=values)

    # --- snapshotting ------------------------------------------------------

    def snapshot(self) -> str:
        """Render every resolved value in schema order; floats keep full
        precision so a reparse reproduces this config exactly."""
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                value = self.values[section][key]
                text = repr(value) if isinstance(value, float) else str(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def write_snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.snapshot())
