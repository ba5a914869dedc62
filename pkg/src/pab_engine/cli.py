"""Command-line surface: generate, compare, profile, simulate-parallel, ablate.

Every command takes ``--config PATH`` (JSON, see config module) plus flag
overrides, writes machine-readable artifacts into ``--out``, and exits
nonzero with an error JSON on stderr when validation or artifacts fail.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, config_from_dict, load_config
from .diffusion import make_schedule, sample
from .errors import EngineError, ValidationError
from .io import (
    LATENT_FILENAME,
    MANIFEST_FILENAME,
    read_run_latent,
    write_json,
    write_tensor,
)
from .metrics import mse_video, psnr, ssim, write_quality_csv
from .model import KINDS, ComponentKind, ComponentTrace, init_model
from .parallel import METHOD_COSTS, comm_volume_model
from .policies import (
    NonePolicy,
    PabPolicy,
    build_schedule,
    disable_kind,
    memory_footprint,
)
from .profiler import FlopCounter, flop_report, redundancy_scan, runtime_breakdown

ARTIFACT_EXIT_KINDS = ("missing-artifact", "malformed-artifact", "shape-mismatch")


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("PAB_ENGINE_THREADS", "1")))
    except ValueError:
        return 1


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    return apply_overrides(
        cfg,
        preset=getattr(args, "preset", None),
        seed=getattr(args, "seed", None),
        output_dir=getattr(args, "out", None),
        precision=getattr(args, "precision", None),
        range_semantics=getattr(args, "range_semantics", None),
        broadcast_object=getattr(args, "broadcast_object", None),
    )


def _out_dir(cfg: RunConfig, args) -> Path:
    out = getattr(args, "out", None) or cfg.output_dir
    if not out:
        raise ValidationError("an output directory is required (--out or output_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.precision == "f32" else np.float64


def _notes(cfg: RunConfig) -> list[str]:
    notes = list(cfg.preset_notes)
    if cfg.scheme == "linear":
        notes.append(
            "linear timestep map stands in for model-specific schedulers at this scale"
        )
    return notes


def _manifest(cfg: RunConfig, extra: dict) -> dict:
    return {
        "engine": {"name": "pab-engine", "version": __version__},
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "defaults_filled": list(cfg.defaults_filled),
        "notes": _notes(cfg),
        **extra,
    }


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg, args)
    params = init_model(cfg.model, cfg.model_seed, dtype=_dtype(cfg))
    schedule = make_schedule(cfg.steps, cfg.scheme)
    table = build_schedule(
        cfg.policy, schedule, cfg.model.layers, range_semantics=cfg.range_semantics
    )
    trace = ComponentTrace(snapshot_mode="digest")
    sink = FlopCounter()
    result = sample(
        params,
        schedule,
        cfg.policy,
        cfg.seed,
        text_ids=cfg.text,
        guidance=cfg.guidance,
        guidance_scale=cfg.guidance_scale,
        broadcast_object=cfg.broadcast_object,
        range_semantics=cfg.range_semantics,
        table=table,
        trace=trace,
        flop_sink=sink,
    )
    write_tensor(out / LATENT_FILENAME, result.latent)
    report = flop_report(
        cfg.model, table, mode=cfg.broadcast_object, batch=2 if cfg.guidance else 1
    )
    per_kind = {kind.value: {"compute": 0, "reuse": 0, "delta": 0} for kind in KINDS}
    for rec in trace.records:
        per_kind[rec.kind.value][rec.decision] += 1
    summary = {
        "records": len(trace.records),
        "per_kind": per_kind,
        "flops": {
            "baseline": report.baseline_total(),
            "policy": report.policy_total(),
            "ratio": report.ratio(),
        },
        "cache_peak_bytes": memory_footprint(table, cfg.model, cfg.broadcast_object),
        "total_seconds": trace.total_seconds,
    }
    write_json(out / "trace_summary.json", summary)
    write_json(out / MANIFEST_FILENAME, _manifest(cfg, result.manifest))
    print(f"wrote {out / LATENT_FILENAME} digest={result.manifest['digests']['latent']}")
    return 0


def _parse_metrics(raw: str) -> list[str]:
    metrics = [m.strip() for m in raw.split(",") if m.strip()]
    for m in metrics:
        if m not in ("mse", "psnr", "ssim"):
            raise ValidationError(f"unknown metric {m!r} (expected mse, psnr, ssim)")
    if not metrics:
        raise ValidationError("at least one metric is required")
    return metrics


def cmd_compare(args) -> int:
    a = read_run_latent(args.run_a)
    b = read_run_latent(args.run_b)
    if a.shape != b.shape:
        from .errors import ShapeError

        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    frames_a, frames_b = a[0], b[0]
    results = []
    for metric in _parse_metrics(args.metrics):
        if metric == "mse":
            results.append(mse_video(frames_a, frames_b))
        elif metric == "psnr":
            results.append(psnr(frames_a, frames_b))
        else:
            results.append(ssim(frames_a, frames_b))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_quality_csv(results, out / "quality.csv")
    for result in results:
        print(f"{result.metric} mean = {result.mean}")
    return 0


def cmd_profile(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg, args)
    params = init_model(cfg.model, cfg.model_seed, dtype=_dtype(cfg))
    schedule = make_schedule(cfg.steps, cfg.scheme)
    trace = ComponentTrace(snapshot_mode="snapshot")
    sample(
        params,
        schedule,
        NonePolicy(),
        cfg.seed,
        text_ids=cfg.text,
        guidance=cfg.guidance,
        guidance_scale=cfg.guidance_scale,
        trace=trace,
    )
    redundancy_scan(trace, metric=args.metric).write_csv(out / "redundancy.csv")
    runtime_breakdown(trace).write_csv(out / "breakdown.csv")
    table = build_schedule(
        cfg.policy, schedule, cfg.model.layers, range_semantics=cfg.range_semantics
    )
    report = flop_report(
        cfg.model, table, mode=cfg.broadcast_object, batch=2 if cfg.guidance else 1
    )
    report.write_csv(out / "flops.csv")
    print(f"flops ratio = {report.ratio():.6f}")
    return 0


def cmd_simulate_parallel(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg, args)
    worker_list = [int(w) for w in str(args.workers or cfg.workers).split(",")]
    if args.method in (None, "all"):
        methods = list(METHOD_COSTS)
    else:
        methods = [m.strip() for m in args.method.split(",")]
    schedule = make_schedule(cfg.steps, cfg.scheme)
    table = build_schedule(
        cfg.policy, schedule, cfg.model.layers, range_semantics=cfg.range_semantics
    )
    batch = 2 if cfg.guidance else 1
    computing = len(table.compute_steps(ComponentKind.TEMPORAL))
    fraction = computing / table.num_steps

    summary: dict = {
        "temporal_computing_steps": computing,
        "num_steps": table.num_steps,
        "computing_fraction": fraction,
        "workers": {},
    }
    first_reports = []
    for workers in worker_list:
        per_method = {}
        for method in methods:
            report = comm_volume_model(
                method,
                cfg.model,
                schedule,
                table,
                workers,
                batch=batch,
                split_batch=cfg.split_batch,
            )
            per_method[method] = {
                "elements": report.total_elements(),
                "bytes": report.total_bytes(),
            }
            if workers == worker_list[0]:
                first_reports.append(report)
        summary["workers"][str(workers)] = per_method

    comm_path = out / "comm.csv"
    with open(comm_path, "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["step", "layer", "method", "elements", "bytes", "communicating"])
        for report in first_reports:
            for e in report.entries:
                writer.writerow(
                    [e.step, e.layer, e.method, e.elements, e.bytes, int(e.communicating)]
                )

    baseline = summary["workers"][str(worker_list[0])]
    if all(m in baseline for m in ("megatron_sp", "ds_ulysses", "dsp")) and baseline["dsp"]["elements"]:
        dsp = baseline["dsp"]["elements"]
        ratios = [
            baseline["megatron_sp"]["elements"] / dsp,
            baseline["ds_ulysses"]["elements"] / dsp,
            1.0,
        ]
        summary["ratio_megatron_ulysses_dsp"] = ratios
        print(f"ratio megatron:ulysses:dsp = {ratios[0]:.3f} : {ratios[1]:.3f} : {ratios[2]:.3f}")
    print(f"temporal computing-step fraction = {fraction:.4f}")
    write_json(out / "summary.json", summary)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg, args)
    if not isinstance(cfg.policy, PabPolicy):
        raise ValidationError("component ablation requires a PAB policy")
    if args.disable:
        names = [k.strip() for k in args.disable.split(",") if k.strip()]
    else:
        names = [kind.value for kind in KINDS]
    kinds = []
    for name in names:
        try:
            kinds.append(ComponentKind(name))
        except ValueError:
            raise ValidationError(
                f"unknown component kind {name!r}; expected one of "
                f"{[k.value for k in KINDS]}"
            ) from None

    params = init_model(cfg.model, cfg.model_seed, dtype=_dtype(cfg))
    schedule = make_schedule(cfg.steps, cfg.scheme)
    batch = 2 if cfg.guidance else 1

    def run_with(kinds_enabled):
        table = build_schedule(
            cfg.policy,
            schedule,
            cfg.model.layers,
            kinds=kinds_enabled,
            range_semantics=cfg.range_semantics,
        )
        result = sample(
            params,
            schedule,
            cfg.policy,
            cfg.seed,
            text_ids=cfg.text,
            guidance=cfg.guidance,
            guidance_scale=cfg.guidance_scale,
            broadcast_object=cfg.broadcast_object,
            table=table,
        )
        ratio = flop_report(cfg.model, table, cfg.broadcast_object, batch=batch).ratio()
        return result.latent, ratio

    full_latent, full_ratio = run_with(KINDS)
    rows = [("none", full_ratio, 0.0)]

    def one_kind(kind):
        latent, ratio = run_with(disable_kind(cfg.policy, kind))
        return kind.value, ratio, mse_video(latent[0], full_latent[0]).mean

    cap = thread_cap()
    if cap > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            rows.extend(pool.map(one_kind, kinds))
    else:
        rows.extend(one_kind(kind) for kind in kinds)

    import csv as _csv

    with open(out / "ablate.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["disabled", "flops_ratio", "mse_vs_full_pab"])
        for row in rows:
            writer.writerow(row)
    for disabled, ratio, mse in rows:
        print(f"disabled={disabled:<9} flops_ratio={ratio:.6f} mse_vs_full_pab={mse:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pab-engine",
        description="Toy video DiT engine with per-kind attention-output broadcasting",
    )
    parser.add_argument("--version", action="version", version=f"pab-engine {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", type=Path, help="run config JSON")
        sp.add_argument("--preset", help="policy preset name")
        sp.add_argument("--seed", type=int, help="sampler seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--precision", choices=["f32", "f64"])
        sp.add_argument("--range-semantics", dest="range_semantics", choices=["period", "reuse-count"])
        sp.add_argument("--broadcast-object", dest="broadcast_object", choices=["outputs", "scores"])

    gen = sub.add_parser("generate", help="run the sampler, write latent + manifest")
    add_common(gen)
    gen.set_defaults(func=cmd_generate)

    cmp_ = sub.add_parser("compare", help="quality metrics between two run directories")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--metrics", default="mse,psnr,ssim")
    cmp_.add_argument("--out", help="output directory (default .)")
    cmp_.set_defaults(func=cmd_compare)

    prof = sub.add_parser("profile", help="redundancy, flops, and runtime breakdown CSVs")
    add_common(prof)
    prof.add_argument("--metric", default="mse", choices=["mse", "relative_l2", "one_minus_cosine"])
    prof.set_defaults(func=cmd_profile)

    sim = sub.add_parser("simulate-parallel", help="closed-form communication volumes")
    add_common(sim)
    sim.add_argument("--workers", help="worker count or comma list (e.g. 8 or 1,2,4,8)")
    sim.add_argument("--method", help="method name, comma list, or 'all'")
    sim.set_defaults(func=cmd_simulate_parallel)

    abl = sub.add_parser("ablate", help="disable one broadcast component at a time")
    add_common(abl)
    abl.add_argument("--disable", help="comma list of kinds (default: all four)")
    abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        payload = {"error": {"kind": exc.kind, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 3 if exc.kind in ARTIFACT_EXIT_KINDS else 2


def entry() -> None:
    sys.exit(main())
