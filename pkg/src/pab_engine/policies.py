"""Decision tables for the caching policies, plus the cache store itself.

A decision table maps every (step, layer, component kind) site to either
Compute or Reuse(source step). Cells are stored as the source step index,
so a cell equal to its own step index means Compute. Broadcast-range
semantics are configurable:

* ``period`` (default): range r means one compute per r steps, with the
  r - 1 steps in between reusing the latest computed output;
* ``reuse-count``: range r means r reuse steps follow each compute
  (period r + 1).

Per-kind counters run in lockstep across layers: all layers compute or
reuse a kind together, which is what lets a sharded run skip whole
communication rounds when the temporal kind is reused.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import PolicyError, ValidationError
from .model import KIND_INDEX, KINDS, ComponentKind, ModelConfig

RANGE_SEMANTICS = ("period", "reuse-count")


@dataclass(frozen=True)
class NonePolicy:
    """Every site computes at every step."""


@dataclass(frozen=True)
class MlpBroadcast:
    """MLP reuse triggered at fixed timesteps for selected layer pairs.

    Each trigger timestep is matched to the nearest schedule point; that step
    computes and caches the MLP outputs of the listed blocks, and the
    following steps inside the broadcast range reuse them. Unlisted blocks
    always compute.
    """

    triggers: tuple[float, ...]
    blocks: tuple[int, ...]
    range: int


@dataclass(frozen=True)
class PabPolicy:
    """Staggered per-kind broadcast ranges inside a timestep window.

    Steps whose diffusion timestep falls inside [window_lo, window_hi] share
    attention outputs according to the per-kind range; steps outside the
    window always compute.
    """

    spatial_range: int = 2
    temporal_range: int = 4
    cross_range: int = 6
    window: tuple[float, float] = (930.0, 450.0)  # (hi, lo) on the 1000 scale
    mlp: Optional[MlpBroadcast] = None

    def attention_ranges(self):
        return {
            ComponentKind.SPATIAL: self.spatial_range,
            ComponentKind.TEMPORAL: self.temporal_range,
            ComponentKind.CROSS: self.cross_range,
        }


@dataclass(frozen=True)
class TGatePolicy:
    """Two-phase gating: cross attention computes before the gate step and is
    replayed after it; self attentions warm up, then compute every
    ``interval`` steps before the gate and every step after it."""

    gate_step: int = 12
    interval: int = 2
    warmup: int = 2


@dataclass(frozen=True)
class DeltaDitPolicy:
    """Whole-block residual-delta caching for a front range of layer pairs
    during the early (outline) stage: before the gate step, skipped steps add
    the cached (output - input) delta instead of running the block."""

    gate_step: int = 25
    interval: int = 2
    block_range: tuple[int, int] = (0, 1)  # inclusive layer-pair indices


PolicyConfig = Union[NonePolicy, PabPolicy, TGatePolicy, DeltaDitPolicy]


def validate_policy(policy: PolicyConfig, num_steps: int, layers: int) -> None:
    if isinstance(policy, NonePolicy):
        return
    if isinstance(policy, PabPolicy):
        for name, r in (
            ("spatial_range", policy.spatial_range),
            ("temporal_range", policy.temporal_range),
            ("cross_range", policy.cross_range),
        ):
            if r < 1:
                raise ValidationError(f"{name} must be >= 1, got {r}")
        hi, lo = policy.window
        if not (0 <= lo < hi <= 1000):
            raise ValidationError(f"window must satisfy 0 <= lo < hi <= 1000, got [{hi}, {lo}]")
        if policy.mlp is not None:
            mlp = policy.mlp
            if mlp.range < 1:
                raise ValidationError(f"mlp range must be >= 1, got {mlp.range}")
            if not mlp.triggers:
                raise ValidationError("empty MLP trigger list")
            if not mlp.blocks:
                raise ValidationError("empty MLP block list")
            for tau in mlp.triggers:
                if not 0 <= tau <= 1000:
                    raise ValidationError(f"mlp trigger {tau} outside [0, 1000]")
            for blk in mlp.blocks:
                if not 0 <= blk < layers:
                    raise ValidationError(f"mlp block {blk} outside [0, {layers})")
        return
    if isinstance(policy, TGatePolicy):
        if policy.gate_step < 1 or policy.interval < 1:
            raise ValidationError("gate step and interval must be >= 1")
        if policy.warmup < 0:
            raise ValidationError("warmup must be >= 0")
        if policy.gate_step > num_steps:
            raise ValidationError(f"gate step {policy.gate_step} exceeds {num_steps} steps")
        return
    if isinstance(policy, DeltaDitPolicy):
        if policy.gate_step < 1 or policy.interval < 1:
            raise ValidationError("gate step and interval must be >= 1")
        if policy.gate_step > num_steps:
            raise ValidationError(f"gate step {policy.gate_step} exceeds {num_steps} steps")
        lo, hi = policy.block_range
        if not 0 <= lo <= hi < layers:
            raise ValidationError(f"block range [{lo}, {hi}] outside [0, {layers})")
        return
    raise ValidationError(f"unknown policy type {type(policy).__name__}")


class DecisionTable:
    """Dense (step, layer, kind) -> source-step map.

    ``source[i, l, k] == i`` means Compute; an earlier value means Reuse from
    that step. ``delta_mode`` marks tables whose reuse bypasses whole layer
    pairs via cached residual deltas rather than per-site outputs.
    """

    def __init__(self, source: np.ndarray, delta_mode: bool = False):
        self.source = np.asarray(source, dtype=np.int32)
        if self.source.ndim != 3 or self.source.shape[2] != len(KINDS):
            raise ValidationError(f"decision table must be (steps, layers, {len(KINDS)})")
        self.num_steps, self.layers, _ = self.source.shape
        self.delta_mode = delta_mode
        self._site_stores = None
        self._delta_stores = None

    @classmethod
    def all_compute(cls, num_steps: int, layers: int) -> "DecisionTable":
        idx = np.arange(num_steps, dtype=np.int32)[:, None, None]
        return cls(np.broadcast_to(idx, (num_steps, layers, len(KINDS))).copy())

    def source_of(self, step: int, layer: int, kind: ComponentKind) -> int:
        return int(self.source[step, layer, KIND_INDEX[kind]])

    def is_compute(self, step: int, layer: int, kind: ComponentKind) -> bool:
        return self.source_of(step, layer, kind) == step

    def compute_steps(self, kind: ComponentKind, layer: int = 0) -> list[int]:
        col = self.source[:, layer, KIND_INDEX[kind]]
        return [i for i in range(self.num_steps) if col[i] == i]

    def validate(self) -> None:
        steps = np.arange(self.num_steps, dtype=np.int32)[:, None, None]
        if np.any(self.source[0] != 0):
            raise ValidationError("step 0 must compute every site")
        if np.any(self.source > steps) or np.any(self.source < 0):
            raise ValidationError("reuse sources must precede their step")
        for i, l, k in zip(*np.nonzero(self.source != steps)):
            src = self.source[i, l, k]
            if self.source[src, l, k] != src:
                raise ValidationError(
                    f"cell (step {i}, layer {l}, kind {KINDS[k].value}) reuses step {src},"
                    " which is not a compute step"
                )
        if self.delta_mode:
            for i in range(self.num_steps):
                for l in range(self.layers):
                    row = self.source[i, l]
                    if not (np.all(row == i) or (np.all(row == row[0]) and row[0] != i)):
                        raise ValidationError(
                            "delta-mode tables must compute or reuse whole layers"
                        )

    def _build_store_maps(self):
        site_stores: dict[tuple[int, ComponentKind], set[int]] = {}
        delta_stores: dict[int, set[int]] = {}
        steps = np.arange(self.num_steps, dtype=np.int32)[:, None, None]
        reused = self.source != steps
        for i, l, k in zip(*np.nonzero(reused)):
            src = int(self.source[i, l, k])
            if self.delta_mode:
                delta_stores.setdefault(int(l), set()).add(src)
            else:
                site_stores.setdefault((int(l), KINDS[k]), set()).add(src)
        self._site_stores = site_stores
        self._delta_stores = delta_stores

    def site_stores(self) -> dict:
        if self._site_stores is None:
            self._build_store_maps()
        return self._site_stores

    def delta_stores(self) -> dict:
        if self._delta_stores is None:
            self._build_store_maps()
        return self._delta_stores

    def reuse_sources_of(self, layer: int, kind: ComponentKind) -> dict[int, int]:
        """source step -> last step reusing it, for one (layer, kind) column."""
        col = self.source[:, layer, KIND_INDEX[kind]]
        last: dict[int, int] = {}
        for i in range(self.num_steps):
            if col[i] != i:
                last[int(col[i])] = i
        return last

    def slice(self, step: int) -> "StepDecisions":
        return StepDecisions(self, step)

    def equals(self, other: "DecisionTable") -> bool:
        return (
            self.delta_mode == other.delta_mode
            and self.source.shape == other.source.shape
            and np.array_equal(self.source, other.source)
        )


class StepDecisions:
    """One step's view of a decision table, consumed by forward_step."""

    def __init__(self, table: DecisionTable, step: int):
        self.table = table
        self.step = step
        self.delta_mode = table.delta_mode

    def source(self, layer: int, kind: ComponentKind) -> int:
        return self.table.source_of(self.step, layer, kind)

    def should_store(self, layer: int, kind: ComponentKind) -> bool:
        return self.step in self.table.site_stores().get((layer, kind), ())

    def should_store_delta(self, layer: int) -> bool:
        return self.step in self.table.delta_stores().get(layer, ())

    def layer_fully_reused(self, layer: int) -> bool:
        row = self.table.source[self.step, layer]
        return bool(np.all(row != self.step))


def _period(r: int, semantics: str) -> int:
    return r if semantics == "period" else r + 1


def _nearest_step(timesteps: np.ndarray, tau: float) -> int:
    # ties break toward the earlier step (larger timestep)
    return int(np.argmin(np.abs(timesteps - tau)))


def build_schedule(
    policy: PolicyConfig,
    schedule,
    layers: int,
    kinds: Sequence[ComponentKind] = KINDS,
    range_semantics: str = "period",
) -> DecisionTable:
    """Materialize a policy into a decision table for a timestep schedule.

    ``schedule`` may be a TimestepSchedule or any sequence of timesteps.
    ``kinds`` restricts which component kinds the policy may touch; excluded
    kinds stay all-Compute (used to disable one component at a time).
    """
    timesteps = np.asarray(getattr(schedule, "timesteps", schedule), dtype=np.float64)
    n = len(timesteps)
    if range_semantics not in RANGE_SEMANTICS:
        raise ValidationError(f"range_semantics must be one of {RANGE_SEMANTICS}")
    validate_policy(policy, n, layers)
    kinds = tuple(kinds)
    table = DecisionTable.all_compute(n, layers)
    src = table.source

    if isinstance(policy, PabPolicy):
        hi, lo = policy.window
        in_window = np.nonzero((timesteps >= lo) & (timesteps <= hi))[0]
        if len(in_window):
            first = int(in_window[0])
            for kind, r in policy.attention_ranges().items():
                if kind not in kinds:
                    continue
                period = _period(r, range_semantics)
                if period == 1:
                    continue
                k = KIND_INDEX[kind]
                last = first
                for i in map(int, in_window):
                    if (i - first) % period == 0:
                        last = i
                    else:
                        src[i, :, k] = last
        if policy.mlp is not None and ComponentKind.MLP in kinds:
            mlp = policy.mlp
            period = _period(mlp.range, range_semantics)
            trigger_steps = {_nearest_step(timesteps, tau) for tau in mlp.triggers}
            k = KIND_INDEX[ComponentKind.MLP]
            blocks = list(mlp.blocks)
            active = None
            remaining = 0
            for i in range(n):
                if i in trigger_steps:
                    active = i
                    remaining = period - 1
                elif remaining > 0:
                    src[i, blocks, k] = active
                    remaining -= 1
    elif isinstance(policy, TGatePolicy):
        m, k_int, w = policy.gate_step, policy.interval, policy.warmup
        ks = KIND_INDEX[ComponentKind.SPATIAL]
        kt = KIND_INDEX[ComponentKind.TEMPORAL]
        kc = KIND_INDEX[ComponentKind.CROSS]
        last_self = 0
        for i in range(n):
            if i < m:
                if i < w or (i - w) % k_int == 0:
                    last_self = i
                else:
                    if ComponentKind.SPATIAL in kinds:
                        src[i, :, ks] = last_self
                    if ComponentKind.TEMPORAL in kinds:
                        src[i, :, kt] = last_self
            elif ComponentKind.CROSS in kinds:
                src[i, :, kc] = m - 1
    elif isinstance(policy, DeltaDitPolicy):
        if tuple(kinds) != KINDS:
            raise ValidationError("whole-block delta policies cannot disable single kinds")
        b, k_int = policy.gate_step, policy.interval
        lo_blk, hi_blk = policy.block_range
        last = {l: 0 for l in range(lo_blk, hi_blk + 1)}
        for i in range(n):
            for l in range(lo_blk, hi_blk + 1):
                if i < b and i % k_int != 0:
                    src[i, l, :] = last[l]
                else:
                    last[l] = i
        table.delta_mode = True

    table.validate()
    return table


@dataclass
class CacheEntry:
    value: np.ndarray
    source_step: int
    object_kind: str  # outputs | scores | delta


class CacheStore:
    """Single-slot-per-site snapshot store backing Reuse decisions."""

    def __init__(self):
        self.entries: dict[tuple, CacheEntry] = {}

    def store(self, site: tuple, value: np.ndarray, step: int, object_kind: str = "outputs"):
        self.entries[site] = CacheEntry(value=value, source_step=step, object_kind=object_kind)

    def fetch(self, site: tuple, expect: str = "outputs") -> CacheEntry:
        entry = self.entries.get(site)
        if entry is None:
            raise PolicyError(f"fetch before store for site {site}")
        if entry.object_kind != expect:
            raise PolicyError(
                f"site {site} holds {entry.object_kind!r} but {expect!r} was requested"
            )
        return entry

    def __len__(self) -> int:
        return len(self.entries)


def _site_entry_elems(kind: Optional[ComponentKind], cfg: ModelConfig, broadcast_object: str) -> int:
    t, s, d = cfg.frames, cfg.spatial_tokens, cfg.hidden
    if kind is None:  # whole-layer residual delta
        return t * s * d
    if broadcast_object == "scores" and kind in (
        ComponentKind.SPATIAL,
        ComponentKind.TEMPORAL,
        ComponentKind.CROSS,
    ):
        h = cfg.heads
        if kind == ComponentKind.SPATIAL:
            return t * h * s * s
        if kind == ComponentKind.TEMPORAL:
            return s * h * t * t
        return h * t * s * cfg.text_tokens
    return t * s * d


def _site_multiplicity(kind: ComponentKind, cfg: ModelConfig) -> int:
    if kind == ComponentKind.MLP:
        return 2
    if kind == ComponentKind.CROSS:
        return 2 if cfg.cross_in_temporal else 1
    return 1


def memory_footprint(
    table: DecisionTable,
    cfg: ModelConfig,
    broadcast_object: str = "outputs",
    bytes_per_element: int = 4,
) -> int:
    """Peak bytes of simultaneously-live cache entries (single batch element).

    Caching is lazy: an output is stored only if a later step reuses it, and
    an entry stays live until its last reuse.
    """
    load = np.zeros(table.num_steps, dtype=np.int64)
    if table.delta_mode:
        for layer, stores in table.delta_stores().items():
            last_use = table.reuse_sources_of(layer, ComponentKind.SPATIAL)
            size = _site_entry_elems(None, cfg, broadcast_object) * bytes_per_element
            for s in stores:
                load[s : last_use[s] + 1] += size
    else:
        for (layer, kind), stores in table.site_stores().items():
            last_use = table.reuse_sources_of(layer, kind)
            size = (
                _site_entry_elems(kind, cfg, broadcast_object)
                * _site_multiplicity(kind, cfg)
                * bytes_per_element
            )
            for s in stores:
                load[s : last_use[s] + 1] += size
    return int(load.max()) if len(load) else 0


_PAB_FAMILIES = {
    "opensora": dict(
        window=(930.0, 450.0),
        mlp_triggers=(864.0, 788.0, 676.0),
        mlp_blocks=(0, 1, 2, 3, 4),
        mlp_range=2,
    ),
    "opensoraplan": dict(
        window=(850.0, 100.0),
        mlp_triggers=(
            738.0, 714.0, 690.0, 666.0, 642.0, 618.0, 594.0,
            570.0, 546.0, 522.0, 498.0, 474.0, 450.0, 426.0,
        ),
        mlp_blocks=(0, 1, 2, 3, 4, 5, 6),
        mlp_range=2,
    ),
    "latte": dict(
        window=(800.0, 100.0),
        mlp_triggers=(720.0, 640.0, 560.0, 480.0, 400.0),
        mlp_blocks=(0, 1, 2, 3, 4),
        mlp_range=2,
    ),
}

_PAB_RANGE_SETS = {
    "opensora": ("246", "357", "579"),
    "opensoraplan": ("246", "357", "579"),
    "latte": ("235", "347", "469"),
}

PRESET_NAMES = tuple(
    [f"{fam}-pab{digits}" for fam, sets in _PAB_RANGE_SETS.items() for digits in sets]
    + ["tgate-default", "deltadit-default", "none"]
)


def resolve_preset(name: str, layers: int) -> tuple[PolicyConfig, list[str]]:
    """Resolve a named preset against a model depth.

    Presets carry reference-model block lists deeper than the toy model, so
    block indices are clamped/filtered to [0, layers); every adaptation is
    returned as a note for the run manifest.
    """
    notes: list[str] = []
    if name == "none":
        return NonePolicy(), notes
    if name == "tgate-default":
        return TGatePolicy(gate_step=12, interval=2, warmup=2), notes
    if name == "deltadit-default":
        lo, hi = 0, 5
        if hi >= layers:
            hi = layers - 1
            notes.append(f"deltadit block range clamped to [0, {hi}] for {layers} layers")
        return DeltaDitPolicy(gate_step=25, interval=2, block_range=(lo, hi)), notes
    for fam, sets in _PAB_RANGE_SETS.items():
        for digits in sets:
            if name == f"{fam}-pab{digits}":
                family = _PAB_FAMILIES[fam]
                blocks = tuple(b for b in family["mlp_blocks"] if b < layers)
                if blocks != tuple(family["mlp_blocks"]):
                    notes.append(f"mlp blocks filtered to {list(blocks)} for {layers} layers")
                mlp = None
                if blocks:
                    mlp = MlpBroadcast(
                        triggers=tuple(family["mlp_triggers"]),
                        blocks=blocks,
                        range=family["mlp_range"],
                    )
                else:
                    notes.append("mlp broadcast dropped: no blocks left after filtering")
                return (
                    PabPolicy(
                        spatial_range=int(digits[0]),
                        temporal_range=int(digits[1]),
                        cross_range=int(digits[2]),
                        window=family["window"],
                        mlp=mlp,
                    ),
                    notes,
                )
    raise ValidationError(f"unknown preset {name!r}", kind="unknown-preset")


def policy_to_dict(policy: PolicyConfig) -> dict:
    if isinstance(policy, NonePolicy):
        return {"variant": "none"}
    if isinstance(policy, PabPolicy):
        out = {
            "variant": "pab",
            "spatial_range": policy.spatial_range,
            "temporal_range": policy.temporal_range,
            "cross_range": policy.cross_range,
            "window": list(policy.window),
            "mlp": None,
        }
        if policy.mlp is not None:
            out["mlp"] = {
                "triggers": list(policy.mlp.triggers),
                "blocks": list(policy.mlp.blocks),
                "range": policy.mlp.range,
            }
        return out
    if isinstance(policy, TGatePolicy):
        return {
            "variant": "tgate",
            "gate_step": policy.gate_step,
            "interval": policy.interval,
            "warmup": policy.warmup,
        }
    if isinstance(policy, DeltaDitPolicy):
        return {
            "variant": "deltadit",
            "gate_step": policy.gate_step,
            "interval": policy.interval,
            "block_range": list(policy.block_range),
        }
    raise ValidationError(f"unknown policy type {type(policy).__name__}")


def policy_from_dict(data: dict) -> PolicyConfig:
    if not isinstance(data, dict) or "variant" not in data:
        raise ValidationError("policy must be an object with a 'variant' field")
    variant = data["variant"]
    if variant == "none":
        return NonePolicy()
    if variant == "pab":
        mlp = None
        if data.get("mlp") is not None:
            m = data["mlp"]
            mlp = MlpBroadcast(
                triggers=tuple(float(x) for x in m["triggers"]),
                blocks=tuple(int(x) for x in m["blocks"]),
                range=int(m["range"]),
            )
        window = data.get("window", (930.0, 450.0))
        return PabPolicy(
            spatial_range=int(data.get("spatial_range", 2)),
            temporal_range=int(data.get("temporal_range", 4)),
            cross_range=int(data.get("cross_range", 6)),
            window=(float(window[0]), float(window[1])),
            mlp=mlp,
        )
    if variant == "tgate":
        return TGatePolicy(
            gate_step=int(data.get("gate_step", 12)),
            interval=int(data.get("interval", 2)),
            warmup=int(data.get("warmup", 2)),
        )
    if variant == "deltadit":
        br = data.get("block_range", (0, 1))
        return DeltaDitPolicy(
            gate_step=int(data.get("gate_step", 25)),
            interval=int(data.get("interval", 2)),
            block_range=(int(br[0]), int(br[1])),
        )
    raise ValidationError(f"unknown policy variant {variant!r}")


def disable_kind(policy: PabPolicy, kind: ComponentKind) -> tuple:
    """Kinds left enabled when one component's broadcast is switched off."""
    if not isinstance(policy, PabPolicy):
        raise ValidationError("component ablation requires a PAB policy")
    if kind not in KINDS:
        raise ValidationError(f"unknown component kind {kind!r}")
    return tuple(k for k in KINDS if k != kind)
