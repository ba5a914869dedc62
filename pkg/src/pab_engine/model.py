"""Seeded toy video diffusion transformer with interceptable component sites.

The latent is a (batch, frames, spatial_tokens, hidden) grid. Each of the
`layers` layer pairs runs a spatial block followed by a temporal block:

    spatial block:  spatial attention -> cross attention -> MLP
    temporal block: temporal attention -> [cross attention] -> MLP

Spatial attention mixes tokens within a frame, temporal attention mixes
frames at a fixed token index, cross attention queries the latent against
text-token keys/values (present in the temporal block only when
``cross_in_temporal`` is set). Attention and MLP sites apply layer norm and
a timestep-conditioned shift/scale before their projections; cross attention
projects the residual stream directly. Every site is a cacheable unit: its
post-projection, pre-residual output can be stored and replayed in a later
step instead of being recomputed, in which case all interior work (norms,
modulation, projections, attention) is bypassed. In score-replay mode the
softmaxed score matrix is cached instead, and replay recomputes the value
projection, the score-value product, and the output projection.

The residual stream after the last block is the noise prediction; an
untrained head would only add another random projection.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import PolicyError, ShapeError, ValidationError
from .numerics import RandomStream, gelu, layer_norm, matmul, scaled_dot_attention

TEXT_VOCAB = 256

# flop-accounting categories shared by the instrumented kernels and the
# analytic model; elementwise constants are documented in report headers
CAT_QKV = "qkv_proj"
CAT_SCORE = "score_matmul"
CAT_VALUE = "value_matmul"
CAT_OUT = "output_projection"
CAT_MLP = "mlp"
CAT_NORM_MOD = "norm_modulate"
FLOP_CATEGORIES = (CAT_QKV, CAT_SCORE, CAT_VALUE, CAT_OUT, CAT_MLP, CAT_NORM_MOD)

LN_FLOPS_PER_ELEM = 8
MODULATE_FLOPS_PER_ELEM = 2
SOFTMAX_FLOPS_PER_ELEM = 5
GELU_FLOPS_PER_ELEM = 10


class ComponentKind(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    CROSS = "cross"
    MLP = "mlp"


KINDS = tuple(ComponentKind)
KIND_INDEX = {kind: i for i, kind in enumerate(KINDS)}
ATTENTION_KINDS = (ComponentKind.SPATIAL, ComponentKind.TEMPORAL, ComponentKind.CROSS)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    frames: int = 8
    spatial_tokens: int = 64
    text_tokens: int = 16
    mlp_ratio: float = 4.0
    cross_in_temporal: bool = False

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "frames", "spatial_tokens", "text_tokens"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ValidationError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.hidden % 2 != 0:
            raise ValidationError("hidden must be even (sinusoidal embedding splits in half)")
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be positive")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.hidden))

    def sites_per_layer(self) -> int:
        return 6 if self.cross_in_temporal else 5

    def latent_shape(self, batch: int = 1) -> tuple[int, int, int, int]:
        return (batch, self.frames, self.spatial_tokens, self.hidden)


@dataclass
class AttnParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w_mod: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class CrossParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class MlpParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w_mod: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class LayerParams:
    spatial: AttnParams
    cross_spatial: CrossParams
    mlp_spatial: MlpParams
    temporal: AttnParams
    cross_temporal: Optional[CrossParams]
    mlp_temporal: MlpParams


@dataclass
class ModelParams:
    cfg: ModelConfig
    seed: int
    dtype: np.dtype
    text_table: np.ndarray
    w_time: np.ndarray
    layers: list[LayerParams]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in iter_param_arrays(self):
            h.update(arr.tobytes())
        return h.hexdigest()


def iter_param_arrays(params: ModelParams):
    yield params.text_table
    yield params.w_time
    for lp in params.layers:
        for attn in (lp.spatial, lp.temporal):
            yield from (attn.ln_gamma, attn.ln_beta, attn.w_mod, attn.wq, attn.wk, attn.wv, attn.wo)
        for cross in (lp.cross_spatial, lp.cross_temporal):
            if cross is not None:
                yield from (cross.wq, cross.wk, cross.wv, cross.wo)
        for mlp in (lp.mlp_spatial, lp.mlp_temporal):
            yield from (mlp.ln_gamma, mlp.ln_beta, mlp.w_mod, mlp.w1, mlp.w2)


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic uniform(-1/sqrt(D), 1/sqrt(D)) parameters from one stream.

    Draw order is fixed (text table, time projection, then per layer:
    spatial attn, cross, MLP, temporal attn, [cross], MLP) so two calls with
    the same (cfg, seed) are bit-identical regardless of precision.
    """
    dtype = np.dtype(dtype)
    rng = RandomStream(seed)
    d = cfg.hidden
    bound = 1.0 / np.sqrt(d)

    def draw(*shape):
        n = int(np.prod(shape))
        return rng.uniform(n, -bound, bound).reshape(shape).astype(dtype)

    def attn():
        return AttnParams(
            ln_gamma=np.ones(d, dtype=dtype),
            ln_beta=np.zeros(d, dtype=dtype),
            w_mod=draw(d, 2 * d),
            wq=draw(d, d),
            wk=draw(d, d),
            wv=draw(d, d),
            wo=draw(d, d),
        )

    def cross():
        return CrossParams(wq=draw(d, d), wk=draw(d, d), wv=draw(d, d), wo=draw(d, d))

    def mlp():
        r = cfg.mlp_hidden
        return MlpParams(
            ln_gamma=np.ones(d, dtype=dtype),
            ln_beta=np.zeros(d, dtype=dtype),
            w_mod=draw(d, 2 * d),
            w1=draw(d, r),
            w2=draw(r, d),
        )

    text_table = draw(TEXT_VOCAB, d)
    w_time = draw(d, d)
    layers = []
    for _ in range(cfg.layers):
        layers.append(
            LayerParams(
                spatial=attn(),
                cross_spatial=cross(),
                mlp_spatial=mlp(),
                temporal=attn(),
                cross_temporal=cross() if cfg.cross_in_temporal else None,
                mlp_temporal=mlp(),
            )
        )
    return ModelParams(cfg=cfg, seed=seed, dtype=dtype, text_table=text_table, w_time=w_time, layers=layers)


def timestep_embedding(t: float, hidden: int) -> np.ndarray:
    """Sinusoidal embedding, frequencies geometric from 1 down to 1e-4."""
    if not 0 <= t <= 1000:
        raise ValidationError(f"timestep must lie in [0, 1000], got {t}")
    half = hidden // 2
    if half > 1:
        freqs = 10.0 ** (-4.0 * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def array_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class TraceRecord:
    step: int
    timestep: float
    layer: int
    kind: ComponentKind
    block: str
    decision: str
    source_step: int
    flops: int = 0
    seconds: float = 0.0
    attn_seconds: float = 0.0
    digest: Optional[str] = None
    snapshot: Optional[np.ndarray] = None


@dataclass
class ComponentTrace:
    """One record per component site per step, in execution order."""

    snapshot_mode: str = "digest"  # none | digest | snapshot
    snapshot_dtype: np.dtype = np.float16
    records: list[TraceRecord] = field(default_factory=list)
    total_seconds: float = 0.0

    def observe(self, record: TraceRecord, output: Optional[np.ndarray]):
        if output is not None:
            if self.snapshot_mode in ("digest", "snapshot"):
                record.digest = array_digest(output)
            if self.snapshot_mode == "snapshot":
                record.snapshot = output.astype(self.snapshot_dtype)
        self.records.append(record)

    def has_reuse(self) -> bool:
        return any(r.decision != "compute" for r in self.records)

    def num_steps(self) -> int:
        return 1 + max((r.step for r in self.records), default=-1)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (..., n, D) -> (..., H, n, D/H)
    *lead, n, d = x.shape
    out = x.reshape(*lead, n, heads, d // heads)
    return np.moveaxis(out, -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (..., H, n, dh) -> (..., n, H*dh)
    moved = np.moveaxis(x, -3, -2)
    *lead, n, heads, dh = moved.shape
    return moved.reshape(*lead, n, heads * dh)


class _SinkHandle:
    """Optional flop sink adapter; counts 2*MAC for matmuls at call sites."""

    def __init__(self, sink, kind: ComponentKind):
        self.sink = sink
        self.kind = kind

    def add(self, category: str, flops: int):
        if self.sink is not None:
            self.sink.add(self.kind, category, flops)

    def matmul(self, a: np.ndarray, b: np.ndarray, category: str) -> np.ndarray:
        out = matmul(a, b)
        self.add(category, 2 * out.size * a.shape[-1])
        return out


def _modulated_norm(x: np.ndarray, ln_gamma, ln_beta, w_mod, t_vec, sh: _SinkHandle) -> np.ndarray:
    d = x.shape[-1]
    h = layer_norm(x, ln_gamma, ln_beta)
    sh.add(CAT_NORM_MOD, LN_FLOPS_PER_ELEM * x.size)
    mod = sh.matmul(t_vec[None, :], w_mod, CAT_NORM_MOD)[0]  # batch-independent
    h = h * (1.0 + mod[d:]) + mod[:d]
    sh.add(CAT_NORM_MOD, MODULATE_FLOPS_PER_ELEM * x.size)
    return h


def _attention_core(sh: _SinkHandle, q, k, v, capture: bool):
    t0 = time.perf_counter()
    out, scores = scaled_dot_attention(q, k, v, capture_scores=capture)
    elapsed = time.perf_counter() - t0
    d = q.shape[-1]
    score_elems = int(np.prod(q.shape[:-1])) * k.shape[-2]
    sh.add(CAT_SCORE, 2 * score_elems * d + SOFTMAX_FLOPS_PER_ELEM * score_elems)
    sh.add(CAT_VALUE, 2 * out.size * k.shape[-2])
    return out, scores, elapsed


def _replay_core(sh: _SinkHandle, scores, v):
    t0 = time.perf_counter()
    out = matmul(scores, v)
    elapsed = time.perf_counter() - t0
    sh.add(CAT_VALUE, 2 * out.size * scores.shape[-1])
    return out, elapsed


def _axis_attention_compute(p: AttnParams, x, t_vec, heads, sh, temporal_axis: bool, capture: bool):
    h = _modulated_norm(x, p.ln_gamma, p.ln_beta, p.w_mod, t_vec, sh)
    q = sh.matmul(h, p.wq, CAT_QKV)
    k = sh.matmul(h, p.wk, CAT_QKV)
    v = sh.matmul(h, p.wv, CAT_QKV)
    if temporal_axis:
        q, k, v = (a.transpose(0, 2, 1, 3) for a in (q, k, v))
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    out_h, scores, attn_secs = _attention_core(sh, qh, kh, vh, capture)
    out = _merge_heads(out_h)
    if temporal_axis:
        out = out.transpose(0, 2, 1, 3)
    o = sh.matmul(out, p.wo, CAT_OUT)
    return o, scores, attn_secs


def _axis_attention_replay(p: AttnParams, x, t_vec, heads, sh, temporal_axis: bool, scores):
    h = _modulated_norm(x, p.ln_gamma, p.ln_beta, p.w_mod, t_vec, sh)
    v = sh.matmul(h, p.wv, CAT_QKV)
    if temporal_axis:
        v = v.transpose(0, 2, 1, 3)
    vh = _split_heads(v, heads)
    out_h, attn_secs = _replay_core(sh, scores, vh)
    out = _merge_heads(out_h)
    if temporal_axis:
        out = out.transpose(0, 2, 1, 3)
    o = sh.matmul(out, p.wo, CAT_OUT)
    return o, attn_secs


def _cross_attention_compute(p: CrossParams, x, text_emb, heads, sh, capture: bool):
    b, t, s, d = x.shape
    q = sh.matmul(x, p.wq, CAT_QKV).reshape(b, t * s, d)
    k = sh.matmul(text_emb, p.wk, CAT_QKV)
    v = sh.matmul(text_emb, p.wv, CAT_QKV)
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    out_h, scores, attn_secs = _attention_core(sh, qh, kh, vh, capture)
    out = _merge_heads(out_h).reshape(b, t, s, d)
    o = sh.matmul(out, p.wo, CAT_OUT)
    return o, scores, attn_secs


def _cross_attention_replay(p: CrossParams, x, text_emb, heads, sh, scores):
    b, t, s, d = x.shape
    v = sh.matmul(text_emb, p.wv, CAT_QKV)
    vh = _split_heads(v, heads)
    out_h, attn_secs = _replay_core(sh, scores, vh)
    out = _merge_heads(out_h).reshape(b, t, s, d)
    o = sh.matmul(out, p.wo, CAT_OUT)
    return o, attn_secs


def _mlp_compute(p: MlpParams, x, t_vec, sh):
    h = _modulated_norm(x, p.ln_gamma, p.ln_beta, p.w_mod, t_vec, sh)
    a = sh.matmul(h, p.w1, CAT_MLP)
    g = gelu(a)
    sh.add(CAT_MLP, GELU_FLOPS_PER_ELEM * a.size)
    return sh.matmul(g, p.w2, CAT_MLP)


def embed_text(params: ModelParams, text_ids: np.ndarray, batch: int) -> np.ndarray:
    """Token ids -> embeddings; id -1 is the null (zero) token for guidance."""
    ids = np.asarray(text_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.tile(ids[None, :], (batch, 1))
    if ids.shape != (batch, params.cfg.text_tokens):
        raise ShapeError(f"text ids shape {ids.shape} != ({batch}, {params.cfg.text_tokens})")
    if np.any(ids >= TEXT_VOCAB):
        raise ValidationError(f"text ids must be < {TEXT_VOCAB}")
    emb = params.text_table[np.where(ids < 0, 0, ids)]
    emb[ids < 0] = 0.0
    return emb


def time_vector(params: ModelParams, t: float) -> np.ndarray:
    emb = timestep_embedding(t, params.cfg.hidden).astype(params.dtype)
    return matmul(emb[None, :], params.w_time)[0]


def forward_step(
    params: ModelParams,
    x: np.ndarray,
    t: float,
    text_ids,
    decisions,
    cache,
    trace: Optional[ComponentTrace] = None,
    broadcast_object: str = "outputs",
    flop_sink=None,
) -> np.ndarray:
    """One denoising forward pass under a per-step decision slice.

    ``decisions`` is a step slice of a decision table (see policies): it maps
    (layer, kind) to a source step, knows which computed outputs must be
    cached, and flags whole-layer residual-delta reuse. ``cache`` holds the
    replayable snapshots.
    """
    cfg = params.cfg
    if x.shape[1:] != (cfg.frames, cfg.spatial_tokens, cfg.hidden):
        raise ShapeError(f"latent shape {x.shape} does not match config {cfg}")
    if broadcast_object not in ("outputs", "scores"):
        raise ValidationError(f"unknown broadcast object {broadcast_object!r}")
    step = decisions.step
    t_vec = time_vector(params, t)
    text_emb = embed_text(params, text_ids, x.shape[0]).astype(x.dtype)
    scores_mode = broadcast_object == "scores"

    def record_site(kind, block, decision, source, output, flops, seconds, attn_seconds):
        if trace is not None:
            rec = TraceRecord(
                step=step,
                timestep=t,
                layer=li,
                kind=kind,
                block=block,
                decision=decision,
                source_step=source,
                flops=flops,
                seconds=seconds,
                attn_seconds=attn_seconds,
            )
            trace.observe(rec, output)

    def run_site(kind, block, compute_fn, replay_fn):
        # closures read the enclosing x, which is the pre-site residual stream
        source = decisions.source(li, kind)
        site = (li, kind, block)
        sink_before = flop_sink.total() if flop_sink is not None else 0
        t0 = time.perf_counter()
        if source == step:
            capture = scores_mode and kind in ATTENTION_KINDS and decisions.should_store(li, kind)
            o, scores, attn_secs = compute_fn(capture)
            if decisions.should_store(li, kind):
                if capture:
                    cache.store(site, scores, step, "scores")
                else:
                    cache.store(site, o, step, "outputs")
            decision = "compute"
        else:
            decision = "reuse"
            if scores_mode and kind in ATTENTION_KINDS:
                entry = cache.fetch(site, "scores")
                if entry.source_step != source:
                    raise PolicyError(
                        f"cache for {site} holds step {entry.source_step}, table expects {source}"
                    )
                o, attn_secs = replay_fn(entry.value)
            else:
                entry = cache.fetch(site, "outputs")
                if entry.source_step != source:
                    raise PolicyError(
                        f"cache for {site} holds step {entry.source_step}, table expects {source}"
                    )
                o, attn_secs = entry.value, 0.0
        seconds = time.perf_counter() - t0
        flops = (flop_sink.total() - sink_before) if flop_sink is not None else 0
        record_site(kind, block, decision, source, o, flops, seconds, attn_secs)
        return x + o

    for li, lp in enumerate(params.layers):
        if getattr(decisions, "delta_mode", False) and decisions.layer_fully_reused(li):
            source = decisions.source(li, ComponentKind.SPATIAL)
            t0 = time.perf_counter()
            entry = cache.fetch((li, None, "delta"), "delta")
            if entry.source_step != source:
                raise PolicyError(
                    f"delta cache for layer {li} holds step {entry.source_step}, table expects {source}"
                )
            x = x + entry.value
            seconds = time.perf_counter() - t0
            sites = [(ComponentKind.SPATIAL, "s"), (ComponentKind.CROSS, "s"), (ComponentKind.MLP, "s"),
                     (ComponentKind.TEMPORAL, "t"), (ComponentKind.MLP, "t")]
            if cfg.cross_in_temporal:
                sites.insert(4, (ComponentKind.CROSS, "t"))
            for kind, block in sites:
                record_site(kind, block, "delta", decisions.source(li, kind), None, 0,
                            seconds / len(sites), 0.0)
            continue

        x_layer_in = x if getattr(decisions, "delta_mode", False) else None

        sh_sp = _SinkHandle(flop_sink, ComponentKind.SPATIAL)
        x = run_site(
            ComponentKind.SPATIAL, "s",
            lambda cap: _axis_attention_compute(lp.spatial, x, t_vec, cfg.heads, sh_sp, False, cap),
            lambda scores: _axis_attention_replay(lp.spatial, x, t_vec, cfg.heads, sh_sp, False, scores),
        )
        sh_cr = _SinkHandle(flop_sink, ComponentKind.CROSS)
        x = run_site(
            ComponentKind.CROSS, "s",
            lambda cap: _cross_attention_compute(lp.cross_spatial, x, text_emb, cfg.heads, sh_cr, cap),
            lambda scores: _cross_attention_replay(lp.cross_spatial, x, text_emb, cfg.heads, sh_cr, scores),
        )
        sh_ml = _SinkHandle(flop_sink, ComponentKind.MLP)
        x = run_site(
            ComponentKind.MLP, "s",
            lambda cap: (_mlp_compute(lp.mlp_spatial, x, t_vec, sh_ml), None, 0.0),
            None,
        )
        sh_tm = _SinkHandle(flop_sink, ComponentKind.TEMPORAL)
        x = run_site(
            ComponentKind.TEMPORAL, "t",
            lambda cap: _axis_attention_compute(lp.temporal, x, t_vec, cfg.heads, sh_tm, True, cap),
            lambda scores: _axis_attention_replay(lp.temporal, x, t_vec, cfg.heads, sh_tm, True, scores),
        )
        if cfg.cross_in_temporal:
            sh_ct = _SinkHandle(flop_sink, ComponentKind.CROSS)
            x = run_site(
                ComponentKind.CROSS, "t",
                lambda cap: _cross_attention_compute(lp.cross_temporal, x, text_emb, cfg.heads, sh_ct, cap),
                lambda scores: _cross_attention_replay(lp.cross_temporal, x, text_emb, cfg.heads, sh_ct, scores),
            )
        sh_m2 = _SinkHandle(flop_sink, ComponentKind.MLP)
        x = run_site(
            ComponentKind.MLP, "t",
            lambda cap: (_mlp_compute(lp.mlp_temporal, x, t_vec, sh_m2), None, 0.0),
            None,
        )

        if x_layer_in is not None and decisions.should_store_delta(li):
            cache.store((li, None, "delta"), x - x_layer_in, step, "delta")

    return x
