"""Experiment configuration: flat key=value sections parsed into dataclasses.

Three sections, all optional keys falling back to dataclass defaults:

    [stream]   task stream shape (n_tasks, classes_per_task, dim,
               similarity, samples_per_class, seed, noise/mean scales)
    [encoder]  frozen encoder shape (d_model, n_blocks, n_heads, prompt_len,
               prompted_blocks, input_dim, n_feature_tokens, mlp_ratio,
               key_loss, key_loss_weight)
    [train]    eps_task, eps_pre, phi, n_fft, epochs, batch_size, lr, seed,
               mode, probe_samples, space_samples, space_from,
               fft_literal_angle, pretrain_steps, pretrain_classes,
               pretrain_lr

Unknown keys or sections are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, fields

from growcl.encoder import EncoderConfig
from growcl.stream import StreamSpec
from growcl.trainer import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {"stream": StreamSpec, "encoder": EncoderConfig, "train": TrainConfig}
_TUPLE_KEYS = {"similarity_schedule", "prompted_blocks"}
_ALIASES = {"stream": {"similarity": "similarity_schedule"}}


def _coerce(value: str, target_type, key: str):
    if key in _TUPLE_KEYS:
        parts = [p.strip() for p in value.split(",") if p.strip()]
        caster = int if key == "prompted_blocks" else float
        return tuple(caster(p) for p in parts)
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value.strip()


def parse_config(text: str):
    """Parse config text into (StreamSpec, EncoderConfig, TrainConfig)."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for section, cls in _SECTIONS.items():
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        if parser.has_section(section):
            for key, value in parser.items(section):
                key = _ALIASES.get(section, {}).get(key, key)
                if key not in by_name:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                f = by_name[key]
                base = f.type if isinstance(f.type, type) else type(f.default)
                try:
                    kwargs[key] = _coerce(value, base, key)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
        try:
            built[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from exc
    return built["stream"], built["encoder"], built["train"]


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return text, parse_config(text)


def config_dict(spec: StreamSpec, enc: EncoderConfig, train: TrainConfig) -> dict:
    def as_dict(obj):
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    return {"stream": as_dict(spec), "encoder": as_dict(enc), "train": as_dict(train)}


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    config: dict
    outputs: dict
    started_at: str
    finished_at: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "config_hash": self.config_hash,
                "config": self.config,
                "outputs": self.outputs,
                "started_at": self.started_at,
                "finished_at": self.finished_at,
            },
            sort_keys=True,
            indent=2,
        )
