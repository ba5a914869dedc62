"""Run configuration: JSON schema, defaults, cross-field validation.

Every field has a default; parsing records which fields were filled from
defaults so the run manifest can report them. Policies may be given inline
(a ``variant`` object) or as a ``preset`` name, which is resolved against
the model depth at parse time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .errors import ValidationError
from .model import ModelConfig
from .parallel import METHOD_COSTS
from .policies import (
    PabPolicy,
    PolicyConfig,
    RANGE_SEMANTICS,
    policy_from_dict,
    policy_to_dict,
    resolve_preset,
)

PRECISIONS = ("f32", "f64")

_MODEL_DEFAULTS = {
    "layers": 4,
    "hidden": 64,
    "heads": 4,
    "frames": 8,
    "spatial_tokens": 64,
    "text_tokens": 16,
    "mlp_ratio": 4.0,
    "cross_in_temporal": False,
    "seed": 11,
}
_SCHEDULE_DEFAULTS = {"steps": 30, "scheme": "linear"}
_PARALLEL_DEFAULTS = {"workers": 1, "method": "dsp", "split_batch": False}
_TOP_DEFAULTS = {
    "output_dir": None,
    "precision": "f32",
    "guidance": False,
    "guidance_scale": 4.0,
    "broadcast_object": "outputs",
    "range_semantics": "period",
    "seed": 11,
    "text": None,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    model_seed: int
    steps: int
    scheme: str
    policy: PolicyConfig
    preset: Optional[str]
    workers: int
    method: str
    split_batch: bool
    output_dir: Optional[str]
    precision: str
    guidance: bool
    guidance_scale: float
    broadcast_object: str
    range_semantics: str
    seed: int
    text: Optional[tuple[int, ...]]
    defaults_filled: tuple[str, ...] = ()
    preset_notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "model": {
                "layers": self.model.layers,
                "hidden": self.model.hidden,
                "heads": self.model.heads,
                "frames": self.model.frames,
                "spatial_tokens": self.model.spatial_tokens,
                "text_tokens": self.model.text_tokens,
                "mlp_ratio": self.model.mlp_ratio,
                "cross_in_temporal": self.model.cross_in_temporal,
                "seed": self.model_seed,
            },
            "schedule": {"steps": self.steps, "scheme": self.scheme},
            "policy": policy_to_dict(self.policy),
            "preset": self.preset,
            "parallel": {
                "workers": self.workers,
                "method": self.method,
                "split_batch": self.split_batch,
            },
            "output_dir": self.output_dir,
            "precision": self.precision,
            "guidance": self.guidance,
            "guidance_scale": self.guidance_scale,
            "broadcast_object": self.broadcast_object,
            "range_semantics": self.range_semantics,
            "seed": self.seed,
            "text": list(self.text) if self.text is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section(data: dict, name: str, defaults: dict, filled: list[str]) -> dict:
    section = dict(data.get(name) or {})
    unknown = set(section) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown {name} fields: {sorted(unknown)}")
    for key, default in defaults.items():
        if key not in section:
            section[key] = default
            filled.append(f"{name}.{key}")
    return section


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValidationError("run config must be a JSON object")
    known_top = {"model", "schedule", "policy", "preset", "parallel"} | set(_TOP_DEFAULTS)
    unknown = set(data) - known_top
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")

    filled: list[str] = []
    model_raw = _section(data, "model", _MODEL_DEFAULTS, filled)
    schedule_raw = _section(data, "schedule", _SCHEDULE_DEFAULTS, filled)
    parallel_raw = _section(data, "parallel", _PARALLEL_DEFAULTS, filled)
    top = {}
    for key, default in _TOP_DEFAULTS.items():
        if key in data:
            top[key] = data[key]
        else:
            top[key] = default
            filled.append(key)

    model_seed = int(model_raw.pop("seed"))
    model = ModelConfig(**model_raw)

    preset_notes: list[str] = []
    preset_name = None
    policy_raw = data.get("policy")
    if policy_raw is None and "preset" in data and data["preset"]:
        policy_raw = {"preset": data["preset"]}
    if policy_raw is None:
        policy: PolicyConfig = resolve_preset("none", model.layers)[0]
        filled.append("policy")
    elif isinstance(policy_raw, dict) and "preset" in policy_raw:
        preset_name = policy_raw["preset"]
        policy, preset_notes = resolve_preset(preset_name, model.layers)
    else:
        policy = policy_from_dict(policy_raw)
        preset_name = data.get("preset")  # provenance from a prior serialization

    cfg = RunConfig(
        model=model,
        model_seed=model_seed,
        steps=int(schedule_raw["steps"]),
        scheme=str(schedule_raw["scheme"]),
        policy=policy,
        preset=preset_name,
        workers=int(parallel_raw["workers"]),
        method=str(parallel_raw["method"]),
        split_batch=bool(parallel_raw["split_batch"]),
        output_dir=top["output_dir"],
        precision=str(top["precision"]),
        guidance=bool(top["guidance"]),
        guidance_scale=float(top["guidance_scale"]),
        broadcast_object=str(top["broadcast_object"]),
        range_semantics=str(top["range_semantics"]),
        seed=int(top["seed"]),
        text=tuple(int(t) for t in top["text"]) if top["text"] is not None else None,
        defaults_filled=tuple(filled),
        preset_notes=tuple(preset_notes),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.precision not in PRECISIONS:
        raise ValidationError(f"precision must be one of {PRECISIONS}, got {cfg.precision!r}")
    if cfg.broadcast_object not in ("outputs", "scores"):
        raise ValidationError(f"broadcast_object must be outputs|scores, got {cfg.broadcast_object!r}")
    if cfg.range_semantics not in RANGE_SEMANTICS:
        raise ValidationError(f"range_semantics must be one of {RANGE_SEMANTICS}")
    if cfg.steps < 1:
        raise ValidationError("schedule needs at least one step")
    if cfg.method not in METHOD_COSTS:
        raise ValidationError(f"unknown parallel method {cfg.method!r}")
    if cfg.workers < 1:
        raise ValidationError("workers must be >= 1")
    if cfg.workers > 1:
        if cfg.model.frames % cfg.workers or cfg.model.spatial_tokens % cfg.workers:
            raise ValidationError(
                f"workers ({cfg.workers}) must divide frames ({cfg.model.frames}) "
                f"and spatial tokens ({cfg.model.spatial_tokens})"
            )
    if cfg.method == "broadcast_sp" and not isinstance(cfg.policy, PabPolicy):
        raise ValidationError("broadcast_sp requires a PAB policy")
    if cfg.text is not None and len(cfg.text) != cfg.model.text_tokens:
        raise ValidationError(
            f"text must list exactly {cfg.model.text_tokens} token ids"
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """CLI flag overrides; a preset override re-resolves the policy."""
    updates = {}
    if overrides.get("preset") is not None:
        policy, notes = resolve_preset(overrides["preset"], cfg.model.layers)
        updates["policy"] = policy
        updates["preset"] = overrides["preset"]
        updates["preset_notes"] = tuple(notes)
    for name in (
        "seed",
        "output_dir",
        "precision",
        "range_semantics",
        "broadcast_object",
        "workers",
        "method",
    ):
        if overrides.get(name) is not None:
            updates[name] = overrides[name]
    if not updates:
        return cfg
    cfg = replace(cfg, **updates)
    validate_config(cfg)
    return cfg
