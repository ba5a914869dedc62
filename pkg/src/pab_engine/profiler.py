"""Redundancy analysis, analytic FLOP accounting, and runtime breakdown.

FLOPs are counted as 2 per multiply-accumulate. Elementwise work uses fixed
per-element constants (layer norm 8, modulate 2 plus its 2*D*2D projection,
softmax 5, GELU 10); residual adds and the timestep/text embedding paths are
not counted. The same constants drive both the instrumented counter that the
model reports into and the closed-form report here, so the two must agree
exactly when the shape arithmetic is right.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
import numpy as np

from .errors import MetricError, ShapeError, ValidationError
from .model import (
    CAT_MLP,
    CAT_NORM_MOD,
    CAT_OUT,
    CAT_QKV,
    CAT_SCORE,
    CAT_VALUE,
    FLOP_CATEGORIES,
    GELU_FLOPS_PER_ELEM,
    KINDS,
    LN_FLOPS_PER_ELEM,
    MODULATE_FLOPS_PER_ELEM,
    SOFTMAX_FLOPS_PER_ELEM,
    ComponentKind,
    ComponentTrace,
    ModelConfig,
)
from .policies import DecisionTable

FLOP_CONSTANTS_NOTE = (
    "flops=2*MAC; layer_norm=8/elem; modulate=2/elem + 2*D*(2D) projection; "
    "softmax=5/elem; gelu=10/elem; residual adds and embedding paths uncounted"
)

METRICS = ("mse", "relative_l2", "one_minus_cosine")


class FlopCounter:
    """Instrumented multiply counter fed by the model's kernel call sites."""

    def __init__(self):
        self.counts: dict[tuple[ComponentKind, str], int] = defaultdict(int)

    def add(self, kind: ComponentKind, category: str, flops: int):
        self.counts[(kind, category)] += int(flops)

    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict:
        return {k: v for k, v in self.counts.items() if v}


def diff_metric(a: np.ndarray, b: np.ndarray, metric: str = "mse") -> float:
    """Difference between two snapshots, computed in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"snapshots differ in shape: {a.shape} vs {b.shape}")
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}, expected one of {METRICS}")
    av = a.astype(np.float64).ravel()
    bv = b.astype(np.float64).ravel()
    if metric == "mse":
        d = av - bv
        return float(np.mean(d * d))
    nb = float(np.linalg.norm(bv))
    if metric == "relative_l2":
        if nb == 0.0:
            raise MetricError("relative_l2 undefined for zero-norm reference")
        return float(np.linalg.norm(av - bv) / nb)
    na = float(np.linalg.norm(av))
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine distance undefined for zero-norm operand")
    return float(1.0 - np.dot(av, bv) / (na * nb))


@dataclass
class RedundancyEntry:
    step: int
    timestep: float
    kind: ComponentKind
    layer: int
    block: str
    value: float


@dataclass
class RedundancyReport:
    """Per-step output differences between consecutive diffusion steps."""

    metric: str
    num_steps: int
    layers: int
    entries: list[RedundancyEntry]

    def per_layer_rows(self) -> list[tuple]:
        """(step, timestep, kind, layer, metric, value); MLP pools its two sites."""
        grouped: dict[tuple, list[RedundancyEntry]] = defaultdict(list)
        for e in self.entries:
            grouped[(e.step, e.kind, e.layer)].append(e)
        rows = []
        for (step, kind, layer), group in sorted(
            grouped.items(), key=lambda kv: (kv[0][0], KINDS.index(kv[0][1]), kv[0][2])
        ):
            value = float(np.mean([e.value for e in group]))
            rows.append((step, group[0].timestep, kind.value, layer, self.metric, value))
        return rows

    def average_rows(self) -> list[tuple]:
        """Across-layer averages per kind, plus split spatial/temporal MLP curves."""
        pooled: dict[tuple[int, str], list[float]] = defaultdict(list)
        timestep: dict[int, float] = {}
        for e in self.entries:
            pooled[(e.step, e.kind.value)].append(e.value)
            timestep[e.step] = e.timestep
            if e.kind == ComponentKind.MLP:
                pooled[(e.step, f"mlp_{'spatial' if e.block == 's' else 'temporal'}")].append(e.value)
        rows = []
        for (step, label), values in sorted(pooled.items()):
            rows.append((step, timestep[step], label, "all", self.metric, float(np.mean(values))))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "timestep", "kind", "layer", "metric", "value"])
            for row in self.per_layer_rows() + self.average_rows():
                writer.writerow(row)


def redundancy_scan(trace: ComponentTrace, metric: str = "mse") -> RedundancyReport:
    """Differences between each site's outputs at consecutive steps.

    Requires an all-Compute trace recorded with snapshots: scanning a
    broadcast run would only rediscover the zeros its reuse injected.
    """
    if trace.has_reuse():
        raise ValidationError("redundancy scan requires an all-Compute trace")
    if not trace.records:
        raise ValidationError("trace is empty")
    if any(r.snapshot is None for r in trace.records):
        raise ValidationError("redundancy scan requires snapshots (snapshot_mode='snapshot')")

    by_site: dict[tuple, list] = defaultdict(list)
    for r in trace.records:
        by_site[(r.layer, r.kind, r.block)].append(r)
    entries = []
    layers = 0
    num_steps = trace.num_steps()
    for (layer, kind, block), records in by_site.items():
        layers = max(layers, layer + 1)
        records.sort(key=lambda r: r.step)
        for prev, cur in zip(records, records[1:]):
            entries.append(
                RedundancyEntry(
                    step=cur.step,
                    timestep=cur.timestep,
                    kind=kind,
                    layer=layer,
                    block=block,
                    value=diff_metric(cur.snapshot, prev.snapshot, metric),
                )
            )
    return RedundancyReport(metric=metric, num_steps=num_steps, layers=layers, entries=entries)


def _site_cost(kind: ComponentKind, cfg: ModelConfig, decision: str, mode: str, batch: int):
    """Analytic per-site flops by category for one step of one layer."""
    b, t, s, d = batch, cfg.frames, cfg.spatial_tokens, cfg.hidden
    h, m, r = cfg.heads, cfg.text_tokens, cfg.mlp_hidden
    tokens = t * s
    cost: dict[str, int] = defaultdict(int)
    if decision in ("reuse_outputs", "delta"):
        return cost

    norm_mod = (
        LN_FLOPS_PER_ELEM * b * tokens * d
        + 2 * d * (2 * d)
        + MODULATE_FLOPS_PER_ELEM * b * tokens * d
    )
    if kind == ComponentKind.MLP:
        cost[CAT_NORM_MOD] = norm_mod
        cost[CAT_MLP] = 2 * b * tokens * d * r + GELU_FLOPS_PER_ELEM * b * tokens * r + 2 * b * tokens * r * d
        return cost

    if kind == ComponentKind.SPATIAL:
        score = 2 * b * t * s * s * d + SOFTMAX_FLOPS_PER_ELEM * b * t * h * s * s
        value = 2 * b * t * s * s * d
        v_proj = 2 * b * tokens * d * d
        qkv_full = 3 * v_proj
        norm = norm_mod
    elif kind == ComponentKind.TEMPORAL:
        score = 2 * b * s * t * t * d + SOFTMAX_FLOPS_PER_ELEM * b * s * h * t * t
        value = 2 * b * s * t * t * d
        v_proj = 2 * b * tokens * d * d
        qkv_full = 3 * v_proj
        norm = norm_mod
    else:  # cross: no layer norm or modulation on the query path
        score = 2 * b * tokens * m * d + SOFTMAX_FLOPS_PER_ELEM * b * h * tokens * m
        value = 2 * b * tokens * m * d
        v_proj = 2 * b * m * d * d
        qkv_full = 2 * b * tokens * d * d + 2 * v_proj
        norm = 0

    cost[CAT_OUT] = 2 * b * tokens * d * d
    if decision == "compute":
        cost[CAT_NORM_MOD] = norm
        cost[CAT_QKV] = qkv_full
        cost[CAT_SCORE] = score
        cost[CAT_VALUE] = value
    elif decision == "reuse_scores":
        cost[CAT_NORM_MOD] = norm
        cost[CAT_QKV] = v_proj
        cost[CAT_VALUE] = value
    else:
        raise ValidationError(f"unknown decision {decision!r}")
    return cost


@dataclass
class FlopReport:
    """Analytic multiply-add counts per kind and category."""

    mode: str
    batch: int
    baseline: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)

    def baseline_total(self) -> int:
        return sum(self.baseline.values())

    def policy_total(self) -> int:
        return sum(self.policy.values())

    def ratio(self) -> float:
        base = self.baseline_total()
        return self.policy_total() / base if base else 1.0

    def rows(self) -> list[tuple]:
        rows = []
        for kind in KINDS:
            for cat in FLOP_CATEGORIES:
                base = self.baseline.get((kind, cat), 0)
                pol = self.policy.get((kind, cat), 0)
                if base == 0 and pol == 0:
                    continue
                rows.append((kind.value, cat, base, pol, pol / base if base else 1.0))
        rows.append(("total", "all", self.baseline_total(), self.policy_total(), self.ratio()))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {FLOP_CONSTANTS_NOTE}\n")
            writer = csv.writer(fh)
            writer.writerow(["kind", "category", "baseline", "policy", "ratio"])
            for row in self.rows():
                writer.writerow(row)


def flop_report(
    cfg: ModelConfig,
    table: DecisionTable,
    mode: str = "outputs",
    batch: int = 1,
) -> FlopReport:
    """Closed-form FLOP totals for a decision table, without running the model."""
    if mode not in ("outputs", "scores"):
        raise ValidationError(f"unknown broadcast object {mode!r}")
    if table.layers != cfg.layers:
        raise ValidationError("table layer count does not match the model config")
    report = FlopReport(mode=mode, batch=batch)
    baseline: dict = defaultdict(int)
    policy: dict = defaultdict(int)
    site_multiplicity = {
        ComponentKind.SPATIAL: 1,
        ComponentKind.TEMPORAL: 1,
        ComponentKind.CROSS: 2 if cfg.cross_in_temporal else 1,
        ComponentKind.MLP: 2,
    }
    for step in range(table.num_steps):
        for layer in range(cfg.layers):
            for kind in KINDS:
                mult = site_multiplicity[kind]
                for cat, flops in _site_cost(kind, cfg, "compute", mode, batch).items():
                    baseline[(kind, cat)] += mult * flops
                if table.is_compute(step, layer, kind):
                    decision = "compute"
                elif table.delta_mode:
                    decision = "delta"
                elif mode == "scores" and kind != ComponentKind.MLP:
                    decision = "reuse_scores"
                else:
                    decision = "reuse_outputs"
                for cat, flops in _site_cost(kind, cfg, decision, mode, batch).items():
                    policy[(kind, cat)] += mult * flops
    report.baseline = {k: v for k, v in baseline.items() if v}
    report.policy = {k: v for k, v in policy.items() if v}
    return report


BREAKDOWN_CATEGORIES = ("attn", "attn_related", "mlp", "other")


@dataclass
class BreakdownReport:
    seconds: dict[str, float]

    def total(self) -> float:
        return sum(self.seconds.values())

    def percentages(self) -> dict[str, float]:
        total = self.total()
        if total <= 0:
            raise ValidationError("trace carries no timing information")
        return {cat: 100.0 * v / total for cat, v in self.seconds.items()}

    def rows(self) -> list[tuple]:
        pct = self.percentages()
        return [(cat, self.seconds[cat], pct[cat]) for cat in BREAKDOWN_CATEGORIES]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "seconds", "percent"])
            for row in self.rows():
                writer.writerow(row)


def runtime_breakdown(trace: ComponentTrace) -> BreakdownReport:
    """Wall-time by category; absolute values are hardware-dependent and only
    the structure (categories, percentages summing to 100) is contractual."""
    seconds = {cat: 0.0 for cat in BREAKDOWN_CATEGORIES}
    for r in trace.records:
        if r.kind == ComponentKind.MLP:
            seconds["mlp"] += r.seconds
        else:
            seconds["attn"] += r.attn_seconds
            seconds["attn_related"] += max(r.seconds - r.attn_seconds, 0.0)
    accounted = sum(seconds.values())
    if trace.total_seconds > accounted:
        seconds["other"] = trace.total_seconds - accounted
    return BreakdownReport(seconds=seconds)
