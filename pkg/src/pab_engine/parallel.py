"""Simulated sequence parallelism over logical workers, plus a closed-form
communication-volume model.

The residual stream lives frame-partitioned (each worker owns T/W frames);
temporal attention needs token-partitioned data, so a compute step wraps the
site in two all-to-all re-shards (frames -> tokens, tokens -> frames), each
moving B*T*S*D*(W-1)/W elements in aggregate. When the decision table reuses
temporal attention at a step, the cached shard-local outputs are replayed and
both re-shards are skipped, for every method: re-sharding exists only to
serve temporal attention.

Workers are logical: execution is sequential, and shard-local arithmetic uses
the same fixed reduction order as the serial sampler, so a gathered parallel
run reproduces the serial latent bit-for-bit.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffusion import (
    DEFAULT_NOISE,
    NoiseParams,
    TimestepSchedule,
    ddim_update,
    default_text_ids,
    initial_latent,
)
from .errors import PolicyError, ShapeError, ValidationError
from .model import (
    ComponentKind,
    ModelParams,
    _SinkHandle,
    _axis_attention_compute,
    _cross_attention_compute,
    _mlp_compute,
    embed_text,
    time_vector,
)
from .policies import (
    CacheStore,
    DecisionTable,
    PabPolicy,
    PolicyConfig,
    build_schedule,
)

METHOD_COSTS = {"megatron_sp": 16, "ds_ulysses": 4, "dsp": 2, "broadcast_sp": 2}
EXECUTABLE_METHODS = ("dsp", "broadcast_sp")


@dataclass(frozen=True)
class ShardPlan:
    workers: int
    frames: int
    spatial_tokens: int

    @property
    def frames_per_worker(self) -> int:
        return self.frames // self.workers

    @property
    def tokens_per_worker(self) -> int:
        return self.spatial_tokens // self.workers


def plan_shards(workers: int, cfg) -> ShardPlan:
    if workers < 1:
        raise ValidationError(f"worker count must be >= 1, got {workers}")
    if cfg.frames % workers != 0 or cfg.spatial_tokens % workers != 0:
        raise ValidationError(
            f"{workers} workers must divide frames ({cfg.frames}) and "
            f"spatial tokens ({cfg.spatial_tokens}); padding is unsupported"
        )
    return ShardPlan(workers=workers, frames=cfg.frames, spatial_tokens=cfg.spatial_tokens)


_AXIS_INDEX = {"frames": 1, "tokens": 2}


@dataclass
class CommEntry:
    step: int
    layer: int
    method: str
    elements: int
    bytes: int
    communicating: bool


@dataclass
class CommReport:
    method: str
    workers: int
    bytes_per_element: int
    cost_constant: int = 0  # relative per-method constant c used by the model
    entries: list[CommEntry] = field(default_factory=list)

    def total_elements(self) -> int:
        return sum(e.elements for e in self.entries)

    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    def grouped_elements(self) -> dict[tuple[int, int], int]:
        grouped: dict[tuple[int, int], int] = defaultdict(int)
        for e in self.entries:
            if e.elements:
                grouped[(e.step, e.layer)] += e.elements
        return dict(grouped)

    def event_count(self) -> int:
        return sum(1 for e in self.entries if e.communicating)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "layer", "method", "elements", "bytes", "communicating"])
            for e in self.entries:
                writer.writerow(
                    [e.step, e.layer, e.method, e.elements, e.bytes, int(e.communicating)]
                )


def _alltoall_elements(batch: int, cfg, workers: int) -> int:
    total = batch * cfg.frames * cfg.spatial_tokens * cfg.hidden
    assert total % workers == 0
    return total // workers * (workers - 1)


def split_shards(full: np.ndarray, axis: str, workers: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(s) for s in np.split(full, workers, axis=_AXIS_INDEX[axis])]


def reshard(
    shards: Sequence[np.ndarray],
    from_axis: str,
    to_axis: str,
    plan: ShardPlan,
    cfg,
    ledger: Optional[CommReport] = None,
    step: int = -1,
    layer: int = -1,
) -> list[np.ndarray]:
    """All-to-all: repartition worker shards from one axis to the other.

    Value-preserving: concatenating the output along ``to_axis`` reproduces
    the tensor concatenated from the input along ``from_axis``. Credits the
    ledger with the aggregate volume each worker must send.
    """
    if from_axis not in _AXIS_INDEX or to_axis not in _AXIS_INDEX:
        raise ValidationError(f"unknown layout axes {from_axis!r} -> {to_axis!r}")
    if from_axis == to_axis:
        raise ShapeError("reshard endpoints must differ")
    if len(shards) != plan.workers:
        raise ShapeError(f"expected {plan.workers} shards, got {len(shards)}")
    expect = plan.frames_per_worker if from_axis == "frames" else plan.tokens_per_worker
    for s in shards:
        if s.shape[_AXIS_INDEX[from_axis]] != expect:
            raise ShapeError(f"shard shape {s.shape} does not match the {from_axis} layout")
    full = np.concatenate(shards, axis=_AXIS_INDEX[from_axis])
    if ledger is not None:
        batch = shards[0].shape[0]
        elements = _alltoall_elements(batch, cfg, plan.workers)
        ledger.entries.append(
            CommEntry(
                step=step,
                layer=layer,
                method=ledger.method,
                elements=elements,
                bytes=elements * ledger.bytes_per_element,
                communicating=elements > 0,
            )
        )
    return split_shards(full, to_axis, plan.workers)


def comm_volume_model(
    method: str,
    cfg,
    schedule,
    table: DecisionTable,
    workers: int,
    bytes_per_element: int = 4,
    batch: int = 1,
    split_batch: bool = False,
) -> CommReport:
    """Closed-form communication accounting without executing the model.

    Per layer pair per communicating step the volume is c(method) * u with
    u = B*T*S*D*bytes*(W-1)/W; a step-layer communicates iff its temporal
    attention is computed under the table (for every method). The method
    constants (megatron_sp 16, ds_ulysses 4, dsp 2, broadcast_sp 2) are
    calibrated to the published 8 : 2 : 1 volume ratios.
    """
    if method not in METHOD_COSTS:
        raise ValidationError(f"unknown parallel method {method!r}")
    timesteps = getattr(schedule, "timesteps", schedule)
    num_steps = len(timesteps)
    if table.num_steps != num_steps:
        raise ValidationError("table does not match the schedule")
    report = CommReport(
        method=method,
        workers=workers,
        bytes_per_element=bytes_per_element,
        cost_constant=METHOD_COSTS[method],
    )
    groups = 2 if (split_batch and batch == 2 and workers >= 2 and workers % 2 == 0) else 1
    group_workers = workers // groups
    u_elements = 0
    if group_workers > 1:
        u_elements = groups * _alltoall_elements(batch // groups, cfg, group_workers)
    cost = METHOD_COSTS[method]
    for step in range(num_steps):
        for layer in range(table.layers):
            communicating = table.is_compute(step, layer, ComponentKind.TEMPORAL)
            elements = cost * u_elements if communicating else 0
            report.entries.append(
                CommEntry(
                    step=step,
                    layer=layer,
                    method=method,
                    elements=elements,
                    bytes=elements * bytes_per_element,
                    communicating=communicating and elements > 0,
                )
            )
    return report


@dataclass
class ParallelRunResult:
    latent: np.ndarray
    comm_report: CommReport
    plan: ShardPlan
    worker_caches: list[CacheStore]

    def gathered_cache(self) -> dict:
        """Reassemble per-worker cached shards into full-tensor snapshots."""
        merged: dict = {}
        if not self.worker_caches:
            return merged
        for site, entry in self.worker_caches[0].entries.items():
            parts = [cache.entries[site].value for cache in self.worker_caches]
            merged[site] = np.concatenate(parts, axis=1)
        return merged


def _run_site_on_shard(kind, block, compute_fn, x, decisions, cache, layer):
    source = decisions.source(layer, kind)
    site = (layer, kind, block)
    if source == decisions.step:
        o = compute_fn()
        if decisions.should_store(layer, kind):
            cache.store(site, o, decisions.step, "outputs")
    else:
        entry = cache.fetch(site, "outputs")
        if entry.source_step != source:
            raise PolicyError(
                f"cache for {site} holds step {entry.source_step}, table expects {source}"
            )
        o = entry.value
    return x + o


def _parallel_forward_step(
    params: ModelParams,
    shards: list[np.ndarray],
    t: float,
    text_emb: np.ndarray,
    decisions,
    caches: list[CacheStore],
    plan: ShardPlan,
    ledger: CommReport,
) -> list[np.ndarray]:
    cfg = params.cfg
    t_vec = time_vector(params, t)
    heads = cfg.heads
    workers = plan.workers
    null_sink = _SinkHandle(None, ComponentKind.SPATIAL)

    for li, lp in enumerate(params.layers):
        if decisions.delta_mode and decisions.layer_fully_reused(li):
            source = decisions.source(li, ComponentKind.SPATIAL)
            for w in range(workers):
                entry = caches[w].fetch((li, None, "delta"), "delta")
                if entry.source_step != source:
                    raise PolicyError(
                        f"delta cache for layer {li} holds step {entry.source_step},"
                        f" table expects {source}"
                    )
                shards[w] = shards[w] + entry.value
            continue

        delta_in = [s.copy() for s in shards] if decisions.delta_mode else None

        for w in range(workers):
            x = shards[w]
            x = _run_site_on_shard(
                ComponentKind.SPATIAL, "s", lambda: _axis_attention_compute(
                    lp.spatial, x, t_vec, heads, null_sink, False, False
                )[0],
                x, decisions, caches[w], li,
            )
            x = _run_site_on_shard(
                ComponentKind.CROSS, "s", lambda: _cross_attention_compute(
                    lp.cross_spatial, x, text_emb, heads, null_sink, False
                )[0],
                x, decisions, caches[w], li,
            )
            x = _run_site_on_shard(
                ComponentKind.MLP, "s", lambda: _mlp_compute(lp.mlp_spatial, x, t_vec, null_sink),
                x, decisions, caches[w], li,
            )
            shards[w] = x

        source = decisions.source(li, ComponentKind.TEMPORAL)
        if source == decisions.step:
            token_shards = reshard(
                shards, "frames", "tokens", plan, cfg, ledger, decisions.step, li
            )
            outputs = []
            for w in range(workers):
                xw = token_shards[w]
                h = _axis_attention_compute(lp.temporal, xw, t_vec, heads, null_sink, True, False)[0]
                outputs.append(h)
            frame_outputs = reshard(
                outputs, "tokens", "frames", plan, cfg, ledger, decisions.step, li
            )
            for w in range(workers):
                if decisions.should_store(li, ComponentKind.TEMPORAL):
                    caches[w].store(
                        (li, ComponentKind.TEMPORAL, "t"), frame_outputs[w], decisions.step, "outputs"
                    )
                shards[w] = shards[w] + frame_outputs[w]
        else:
            for w in range(workers):
                entry = caches[w].fetch((li, ComponentKind.TEMPORAL, "t"), "outputs")
                if entry.source_step != source:
                    raise PolicyError(
                        f"temporal cache holds step {entry.source_step}, table expects {source}"
                    )
                shards[w] = shards[w] + entry.value

        for w in range(workers):
            x = shards[w]
            if cfg.cross_in_temporal:
                x = _run_site_on_shard(
                    ComponentKind.CROSS, "t", lambda: _cross_attention_compute(
                        lp.cross_temporal, x, text_emb, heads, null_sink, False
                    )[0],
                    x, decisions, caches[w], li,
                )
            x = _run_site_on_shard(
                ComponentKind.MLP, "t", lambda: _mlp_compute(lp.mlp_temporal, x, t_vec, null_sink),
                x, decisions, caches[w], li,
            )
            shards[w] = x

        if delta_in is not None and decisions.should_store_delta(li):
            for w in range(workers):
                caches[w].store((li, None, "delta"), shards[w] - delta_in[w], decisions.step, "delta")

    return shards


def run_parallel(
    params: ModelParams,
    schedule: TimestepSchedule,
    policy: PolicyConfig,
    workers: int,
    method: str = "dsp",
    seed: int = 0,
    text_ids: Optional[Sequence[int]] = None,
    *,
    guidance: bool = False,
    guidance_scale: float = 4.0,
    split_batch: bool = False,
    range_semantics: str = "period",
    noise_params: NoiseParams = DEFAULT_NOISE,
    table: Optional[DecisionTable] = None,
    bytes_per_element: int = 4,
) -> ParallelRunResult:
    """Sharded sampler run; output matches the serial sampler bit-for-bit.

    Only the dsp-style all-to-all pattern is executable (``dsp`` and
    ``broadcast_sp``); the other methods exist in the closed-form volume
    model. With ``split_batch``, a guidance pair is split across two worker
    groups first and sequence parallelism is applied within each group.
    """
    cfg = params.cfg
    if method not in EXECUTABLE_METHODS:
        raise ValidationError(
            f"method {method!r} is not executable; use comm_volume_model for it"
        )
    if method == "broadcast_sp" and not isinstance(policy, PabPolicy):
        raise ValidationError("broadcast_sp requires a PAB policy")
    if table is None:
        table = build_schedule(policy, schedule, cfg.layers, range_semantics=range_semantics)
    if text_ids is None:
        text_ids = default_text_ids(params)
    text_ids = np.asarray(text_ids, dtype=np.int64)

    batch = 2 if guidance else 1
    use_split = bool(split_batch and guidance and workers >= 2 and workers % 2 == 0)
    groups = 2 if use_split else 1
    group_workers = workers // groups
    plan = plan_shards(group_workers, cfg)
    ledger = CommReport(
        method=method,
        workers=workers,
        bytes_per_element=bytes_per_element,
        cost_constant=METHOD_COSTS[method],
    )

    x_full = initial_latent(params, seed, batch)
    if guidance:
        ids = np.stack([text_ids, np.full_like(text_ids, -1)])
    else:
        ids = text_ids[None, :]

    group_shards = []
    group_caches = []
    group_text = []
    for g in range(groups):
        lo, hi = (g, g + 1) if use_split else (0, batch)
        group_shards.append(split_shards(x_full[lo:hi], "frames", group_workers))
        group_caches.append([CacheStore() for _ in range(group_workers)])
        group_text.append(embed_text(params, ids[lo:hi], hi - lo).astype(params.dtype))

    timesteps = schedule.timesteps
    for i, t in enumerate(timesteps):
        decisions = table.slice(i)
        group_eps = []
        for g in range(groups):
            shards = list(group_shards[g])
            shards = _parallel_forward_step(
                params, shards, t, group_text[g], decisions, group_caches[g], plan, ledger
            )
            group_eps.append(shards)
        a_cur = noise_params.alpha_bar(t)
        a_next = noise_params.alpha_bar(timesteps[i + 1]) if i + 1 < len(timesteps) else 1.0
        for w in range(group_workers):
            if guidance:
                if use_split:
                    eps_c, eps_u = group_eps[0][w], group_eps[1][w]
                else:
                    eps = group_eps[0][w]
                    eps_c, eps_u = eps[0:1], eps[1:2]
                eps_hat = eps_u + float(guidance_scale) * (eps_c - eps_u)
            else:
                eps_hat = group_eps[0][w]
            for g in range(groups):
                group_shards[g][w] = ddim_update(group_shards[g][w], eps_hat, a_cur, a_next)

    halves = [np.concatenate(group_shards[g], axis=1) for g in range(groups)]
    latent = np.concatenate(halves, axis=0) if use_split else halves[0]
    caches = [c for group in group_caches for c in group]
    return ParallelRunResult(latent=latent, comm_report=ledger, plan=plan, worker_caches=caches)
