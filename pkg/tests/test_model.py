import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pab_engine.numerics as nm
from pab_engine.diffusion import initial_latent
from pab_engine.errors import PolicyError, ValidationError
from pab_engine.model import (
    ComponentKind,
    ComponentTrace,
    ModelConfig,
    forward_step,
    init_model,
    iter_param_arrays,
    timestep_embedding,
)
from pab_engine.policies import CacheStore, DecisionTable

SMALL = ModelConfig(layers=2, hidden=32, heads=4, frames=4, spatial_tokens=16, text_tokens=8)


def straight_line_forward(params, x, t, text_ids):
    """Uninstrumented re-implementation of the all-Compute forward pass."""
    cfg = params.cfg
    d = cfg.hidden
    heads = cfg.heads
    temb = timestep_embedding(t, d).astype(x.dtype)
    tvec = nm.matmul(temb[None, :], params.w_time)[0]
    text = params.text_table[np.asarray(text_ids)][None, :, :]

    def modnorm(h, p):
        out = nm.layer_norm(h, p.ln_gamma, p.ln_beta)
        mod = nm.matmul(tvec[None, :], p.w_mod)[0]
        return out * (1.0 + mod[d:]) + mod[:d]

    def split(a):
        *lead, n, dd = a.shape
        return np.moveaxis(a.reshape(*lead, n, heads, dd // heads), -2, -3)

    def merge(a):
        m = np.moveaxis(a, -3, -2)
        *lead, n, h, dh = m.shape
        return m.reshape(*lead, n, h * dh)

    def self_attention(h, p, temporal):
        q, k, v = (nm.matmul(h, w) for w in (p.wq, p.wk, p.wv))
        if temporal:
            q, k, v = (a.transpose(0, 2, 1, 3) for a in (q, k, v))
        o, _ = nm.scaled_dot_attention(split(q), split(k), split(v))
        o = merge(o)
        if temporal:
            o = o.transpose(0, 2, 1, 3)
        return nm.matmul(o, p.wo)

    for lp in params.layers:
        b, tt, s, _ = x.shape
        x = x + self_attention(modnorm(x, lp.spatial), lp.spatial, temporal=False)
        q = nm.matmul(x, lp.cross_spatial.wq).reshape(b, tt * s, d)
        kk = nm.matmul(text, lp.cross_spatial.wk)
        vv = nm.matmul(text, lp.cross_spatial.wv)
        o, _ = nm.scaled_dot_attention(split(q), split(kk), split(vv))
        x = x + nm.matmul(merge(o).reshape(b, tt, s, d), lp.cross_spatial.wo)
        h = modnorm(x, lp.mlp_spatial)
        x = x + nm.matmul(nm.gelu(nm.matmul(h, lp.mlp_spatial.w1)), lp.mlp_spatial.w2)
        x = x + self_attention(modnorm(x, lp.temporal), lp.temporal, temporal=True)
        h = modnorm(x, lp.mlp_temporal)
        x = x + nm.matmul(nm.gelu(nm.matmul(h, lp.mlp_temporal.w1)), lp.mlp_temporal.w2)
    return x


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_model(SMALL, seed=7)
        b = init_model(SMALL, seed=7)
        assert a.digest() == b.digest()
        assert a.digest() != init_model(SMALL, seed=8).digest()

    def test_zero_layers_forbidden(self):
        with pytest.raises(ValidationError):
            ModelConfig(layers=0)

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValidationError):
            ModelConfig(hidden=30, heads=4)

    def test_drawn_params_within_uniform_bound(self):
        params = init_model(SMALL, seed=5)
        bound = 1.0 / np.sqrt(SMALL.hidden)
        for arr in iter_param_arrays(params):
            drawn = arr[(arr != 0.0) & (arr != 1.0)]  # skip identity LN affines
            assert drawn.size == 0 or (drawn.min() > -bound and drawn.max() < bound)


class TestTimestepEmbedding:
    def test_zero_timestep(self):
        emb = timestep_embedding(0.0, 16)
        assert np.all(emb[:8] == 0.0) and np.all(emb[8:] == 1.0)

    def test_deterministic_and_distinct(self):
        assert np.array_equal(timestep_embedding(400.0, 32), timestep_embedding(400.0, 32))
        delta = timestep_embedding(400.0, 32) - timestep_embedding(401.0, 32)
        assert np.linalg.norm(delta) > 0

    def test_range_validation(self):
        with pytest.raises(ValidationError):
            timestep_embedding(1001.0, 16)


def run_one_step(params, x, table, step=0, cache=None, trace=None, mode="outputs"):
    cache = cache if cache is not None else CacheStore()
    ids = np.arange(params.cfg.text_tokens, dtype=np.int64)
    return forward_step(
        params, x, 500.0, ids, table.slice(step), cache, trace=trace, broadcast_object=mode
    ), cache


class TestForwardStep:
    def test_matches_straight_line_oracle(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=9, batch=1)
        table = DecisionTable.all_compute(1, SMALL.layers)
        got, _ = run_one_step(params, x, table)
        expected = straight_line_forward(params, x, 500.0, np.arange(SMALL.text_tokens))
        assert np.array_equal(got, expected)

    def test_cache_replay_identity(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        src = np.zeros((2, SMALL.layers, 4), dtype=np.int32)
        src[1] = 0  # step 1 reuses everything from step 0
        table = DecisionTable(src)
        cache = CacheStore()
        computed, _ = run_one_step(params, x, table, step=0, cache=cache)
        replayed, _ = run_one_step(params, x, table, step=1, cache=cache)
        assert np.array_equal(computed, replayed)

    def test_scores_mode_matches_outputs_mode_on_stationary_input(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=2, batch=1)
        src = np.zeros((2, SMALL.layers, 4), dtype=np.int32)
        src[1] = 0
        table = DecisionTable(src)
        results = {}
        for mode in ("outputs", "scores"):
            cache = CacheStore()
            computed, _ = run_one_step(params, x, table, step=0, cache=cache, mode=mode)
            replayed, _ = run_one_step(params, x, table, step=1, cache=cache, mode=mode)
            results[mode] = (computed, replayed)
            assert np.array_equal(computed, replayed)
        assert np.array_equal(results["outputs"][1], results["scores"][1])

    def test_single_frame_temporal_attention_is_value_path(self):
        cfg = ModelConfig(layers=1, hidden=16, heads=2, frames=1, spatial_tokens=4, text_tokens=2)
        params = init_model(cfg, seed=4)
        x = initial_latent(params, seed=6, batch=1)
        from pab_engine.model import _SinkHandle, _axis_attention_compute

        sh = _SinkHandle(None, ComponentKind.TEMPORAL)
        p = params.layers[0].temporal
        o, _, _ = _axis_attention_compute(p, x, np.zeros(16, np.float32), cfg.heads, sh, True, False)
        h = nm.layer_norm(x, p.ln_gamma, p.ln_beta)
        mod = nm.matmul(np.zeros((1, 16), np.float32), p.w_mod)[0]
        h = h * (1.0 + mod[16:]) + mod[:16]
        expected = nm.matmul(nm.matmul(h, p.wv), p.wo)
        np.testing.assert_allclose(o, expected, atol=1e-6)

    def test_missing_cache_entry_raises_policy_error(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        src = np.zeros((2, SMALL.layers, 4), dtype=np.int32)
        src[1] = 0
        table = DecisionTable(src)
        with pytest.raises(PolicyError):
            run_one_step(params, x, table, step=1, cache=CacheStore())

    def test_scores_replay_from_outputs_cache_raises_policy_error(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        src = np.zeros((2, SMALL.layers, 4), dtype=np.int32)
        src[1] = 0
        table = DecisionTable(src)
        cache = CacheStore()
        run_one_step(params, x, table, step=0, cache=cache, mode="outputs")
        with pytest.raises(PolicyError):
            run_one_step(params, x, table, step=1, cache=cache, mode="scores")

    def test_unknown_broadcast_object(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        table = DecisionTable.all_compute(1, SMALL.layers)
        with pytest.raises(ValidationError):
            run_one_step(params, x, table, mode="weights")

    def test_deterministic(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        table = DecisionTable.all_compute(1, SMALL.layers)
        a, _ = run_one_step(params, x, table)
        b, _ = run_one_step(params, x, table)
        assert np.array_equal(a, b)

    @settings(max_examples=8, deadline=None)
    @given(
        layers=st.integers(1, 2),
        heads=st.sampled_from([1, 2]),
        frames=st.integers(1, 3),
        tokens=st.integers(1, 4),
        text=st.integers(1, 3),
        cross_in_temporal=st.booleans(),
        batch=st.integers(1, 2),
    )
    def test_shape_preservation(self, layers, heads, frames, tokens, text, cross_in_temporal, batch):
        cfg = ModelConfig(
            layers=layers,
            hidden=8,
            heads=heads,
            frames=frames,
            spatial_tokens=tokens,
            text_tokens=text,
            cross_in_temporal=cross_in_temporal,
        )
        params = init_model(cfg, seed=1)
        x = initial_latent(params, seed=2, batch=batch)
        table = DecisionTable.all_compute(1, layers)
        out, _ = run_one_step(params, x, table)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out))


class TestTraceCoverage:
    @pytest.mark.parametrize("cross_in_temporal", [False, True])
    def test_site_counts_per_step(self, cross_in_temporal):
        cfg = ModelConfig(
            layers=3, hidden=16, heads=2, frames=2, spatial_tokens=4,
            text_tokens=2, cross_in_temporal=cross_in_temporal,
        )
        params = init_model(cfg, seed=1)
        x = initial_latent(params, seed=2, batch=1)
        table = DecisionTable.all_compute(1, cfg.layers)
        trace = ComponentTrace()
        run_one_step(params, x, table, trace=trace)
        attn = [r for r in trace.records if r.kind != ComponentKind.MLP]
        mlp = [r for r in trace.records if r.kind == ComponentKind.MLP]
        assert len(attn) == cfg.layers * (4 if cross_in_temporal else 3)
        assert len(mlp) == 2 * cfg.layers
        assert len(trace.records) == cfg.layers * cfg.sites_per_layer()

    def test_reuse_records_reference_earlier_compute(self):
        params = init_model(SMALL, seed=3)
        x = initial_latent(params, seed=1, batch=1)
        src = np.zeros((2, SMALL.layers, 4), dtype=np.int32)
        src[1] = 0
        table = DecisionTable(src)
        cache = CacheStore()
        trace = ComponentTrace()
        run_one_step(params, x, table, step=0, cache=cache, trace=trace)
        run_one_step(params, x, table, step=1, cache=cache, trace=trace)
        step1 = [r for r in trace.records if r.step == 1]
        computes = {(r.layer, r.kind, r.block) for r in trace.records if r.decision == "compute"}
        for rec in step1:
            assert rec.decision == "reuse"
            assert rec.source_step == 0
            assert (rec.layer, rec.kind, rec.block) in computes
