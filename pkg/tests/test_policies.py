import random

import numpy as np
import pytest
from oracles import brute_force_table, linear_timesteps, random_policy

from pab_engine.errors import PolicyError, ValidationError
from pab_engine.model import KIND_INDEX, KINDS, ComponentKind, ModelConfig
from pab_engine.policies import (
    CacheStore,
    DecisionTable,
    DeltaDitPolicy,
    MlpBroadcast,
    NonePolicy,
    PabPolicy,
    TGatePolicy,
    build_schedule,
    disable_kind,
    memory_footprint,
    resolve_preset,
    validate_policy,
)

SP, TM, CR, ML = (
    ComponentKind.SPATIAL,
    ComponentKind.TEMPORAL,
    ComponentKind.CROSS,
    ComponentKind.MLP,
)


class TestPabSchedules:
    def test_range_one_is_all_compute(self):
        policy = PabPolicy(1, 1, 1, window=(930.0, 450.0))
        table = build_schedule(policy, linear_timesteps(30), layers=2)
        assert table.equals(DecisionTable.all_compute(30, 2))

    def test_pab246_hand_enumeration(self):
        policy = PabPolicy(2, 4, 6, window=(930.0, 450.0))
        table = build_schedule(policy, linear_timesteps(30), layers=3)
        assert table.compute_steps(SP) == [0, 1, 2] + [3, 5, 7, 9, 11, 13, 15] + list(range(17, 30))
        assert table.compute_steps(TM) == [0, 1, 2] + [3, 7, 11, 15] + list(range(17, 30))
        assert table.compute_steps(CR) == [0, 1, 2] + [3, 9, 15] + list(range(17, 30))
        # every in-window non-compute step reuses the latest compute
        assert table.source_of(16, 0, TM) == 15
        assert table.source_of(14, 2, CR) == 9
        for layer in range(3):
            assert table.compute_steps(SP, layer) == table.compute_steps(SP, 0)

    def test_reuse_count_semantics_uses_longer_period(self):
        policy = PabPolicy(2, 2, 2, window=(1000.0, 1.0))
        period_table = build_schedule(policy, linear_timesteps(12), 1, range_semantics="period")
        reuse_table = build_schedule(policy, linear_timesteps(12), 1, range_semantics="reuse-count")
        assert period_table.compute_steps(SP) == [0, 2, 4, 6, 8, 10]
        assert reuse_table.compute_steps(SP) == [0, 3, 6, 9]

    def test_mlp_triggers_match_nearest_schedule_point(self):
        ts = linear_timesteps(30)  # t_4 = 866.67, t_6 = 800.0
        policy = PabPolicy(
            1, 1, 1,
            window=(930.0, 450.0),
            mlp=MlpBroadcast(triggers=(864.0, 799.0), blocks=(0,), range=3),
        )
        table = build_schedule(policy, ts, layers=2)
        col = [table.source_of(i, 0, ML) for i in range(30)]
        assert col[4] == 4 and col[5] == 4 and col[6] == 6 and col[7] == 6 and col[8] == 6
        assert col[9] == 9
        # unlisted block always computes
        assert all(table.is_compute(i, 1, ML) for i in range(30))

    def test_empty_window_is_all_compute(self):
        policy = PabPolicy(3, 3, 3, window=(450.0, 430.0))
        table = build_schedule(policy, [1000.0, 900.0, 800.0], layers=1)
        assert table.equals(DecisionTable.all_compute(3, 1))


class TestTGateSchedules:
    def test_tgate_enumeration(self):
        table = build_schedule(TGatePolicy(12, 2, 2), linear_timesteps(30), layers=2)
        cross_reuse = [i for i in range(30) if not table.is_compute(i, 0, CR)]
        assert cross_reuse == list(range(12, 30))
        assert all(table.source_of(i, 0, CR) == 11 for i in cross_reuse)
        self_reuse = [i for i in range(30) if not table.is_compute(i, 0, SP)]
        assert self_reuse == [3, 5, 7, 9, 11]
        assert table.compute_steps(TM) == [0, 1, 2, 4, 6, 8, 10] + list(range(12, 30))
        assert all(table.is_compute(i, 0, ML) for i in range(30))


class TestDeltaDitSchedules:
    def test_outline_stage_skips(self):
        policy = DeltaDitPolicy(gate_step=5, interval=2, block_range=(0, 1))
        table = build_schedule(policy, linear_timesteps(8), layers=3)
        assert table.delta_mode
        for l in (0, 1):
            assert table.compute_steps(SP, l) == [0, 2, 4, 5, 6, 7]
            assert table.source_of(3, l, ML) == 2
        assert table.compute_steps(SP, 2) == list(range(8))

    def test_whole_layer_consistency_enforced(self):
        table = build_schedule(
            DeltaDitPolicy(5, 2, (0, 0)), linear_timesteps(8), layers=1
        )
        table.source[1, 0, 0] = 1  # break the all-or-nothing invariant
        with pytest.raises(ValidationError):
            table.validate()


class TestWalkerEquivalence:
    def test_100_random_configs_match_walker(self):
        rng = random.Random(20240811)
        for _ in range(100):
            n = rng.randint(1, 60)
            layers = rng.randint(1, 6)
            semantics = rng.choice(["period", "reuse-count"])
            policy = random_policy(rng, n, layers)
            ts = linear_timesteps(n)
            table = build_schedule(policy, ts, layers, range_semantics=semantics)
            expected = brute_force_table(policy, ts, layers, semantics)
            assert np.array_equal(table.source, expected), (policy, n, layers, semantics)
            table.validate()  # reuse-source validity holds structurally


class TestDisableAndReduce:
    def test_disable_one_kind_clears_only_that_column(self):
        policy, _ = resolve_preset("opensora-pab246", layers=4)
        ts = linear_timesteps(30)
        full = build_schedule(policy, ts, 4)
        for kind in KINDS:
            partial = build_schedule(policy, ts, 4, kinds=disable_kind(policy, kind))
            ki = KIND_INDEX[kind]
            assert np.all(partial.source[:, :, ki] == np.arange(30)[:, None])
            others = [KIND_INDEX[k] for k in KINDS if k != kind]
            assert np.array_equal(partial.source[:, :, others], full.source[:, :, others])

    def test_disable_all_kinds_matches_none_policy(self):
        policy, _ = resolve_preset("opensora-pab246", layers=4)
        ts = linear_timesteps(30)
        stripped = build_schedule(policy, ts, 4, kinds=())
        none = build_schedule(NonePolicy(), ts, 4)
        assert stripped.equals(none)

    def test_period_one_ranges_reduce_every_policy_to_none(self):
        ts = linear_timesteps(20)
        none = build_schedule(NonePolicy(), ts, 2)
        pab = PabPolicy(1, 1, 1, window=(990.0, 10.0), mlp=MlpBroadcast((500.0,), (0,), 1))
        assert build_schedule(pab, ts, 2).equals(none)


class TestValidation:
    def test_window_bounds(self):
        with pytest.raises(ValidationError):
            build_schedule(PabPolicy(window=(1200.0, 450.0)), linear_timesteps(10), 1)
        with pytest.raises(ValidationError):
            build_schedule(PabPolicy(window=(450.0, 450.0)), linear_timesteps(10), 1)

    def test_gate_beyond_steps(self):
        with pytest.raises(ValidationError):
            build_schedule(TGatePolicy(gate_step=11), linear_timesteps(10), 1)
        with pytest.raises(ValidationError):
            build_schedule(DeltaDitPolicy(gate_step=11, block_range=(0, 0)), linear_timesteps(10), 1)

    def test_empty_mlp_triggers(self):
        policy = PabPolicy(mlp=MlpBroadcast(triggers=(), blocks=(0,), range=2))
        with pytest.raises(ValidationError):
            validate_policy(policy, 10, 4)

    def test_block_range_outside_layers(self):
        with pytest.raises(ValidationError):
            validate_policy(DeltaDitPolicy(block_range=(0, 4)), 30, 4)
        bad_mlp = PabPolicy(mlp=MlpBroadcast(triggers=(500.0,), blocks=(7,), range=2))
        with pytest.raises(ValidationError):
            validate_policy(bad_mlp, 30, 4)

    def test_ranges_must_be_positive(self):
        with pytest.raises(ValidationError):
            validate_policy(PabPolicy(spatial_range=0), 30, 4)


class TestCacheStore:
    def test_store_fetch_roundtrip(self):
        cache = CacheStore()
        value = np.arange(6, dtype=np.float32).reshape(2, 3)
        cache.store((0, SP, "s"), value, step=4)
        entry = cache.fetch((0, SP, "s"))
        assert entry.source_step == 4
        assert np.array_equal(entry.value, value)

    def test_fetch_before_store(self):
        with pytest.raises(PolicyError):
            CacheStore().fetch((0, SP, "s"))

    def test_overwrite_returns_newest(self):
        cache = CacheStore()
        cache.store((0, SP, "s"), np.zeros(2), step=1)
        cache.store((0, SP, "s"), np.ones(2), step=5)
        entry = cache.fetch((0, SP, "s"))
        assert entry.source_step == 5
        assert np.array_equal(entry.value, np.ones(2))

    def test_object_kind_mismatch(self):
        cache = CacheStore()
        cache.store((0, SP, "s"), np.zeros(2), step=1, object_kind="outputs")
        with pytest.raises(PolicyError):
            cache.fetch((0, SP, "s"), expect="scores")


class TestMemoryFootprint:
    cfg = ModelConfig(layers=2, hidden=16, heads=2, frames=4, spatial_tokens=8, text_tokens=4)

    def test_all_compute_is_zero(self):
        table = DecisionTable.all_compute(10, 2)
        assert memory_footprint(table, self.cfg) == 0

    def test_single_temporal_entry_size(self):
        policy = PabPolicy(1, 2, 1, window=(1000.0, 1.0))
        table = build_schedule(policy, linear_timesteps(4), 2)
        expected = 2 * self.cfg.frames * self.cfg.spatial_tokens * self.cfg.hidden * 4
        assert memory_footprint(table, self.cfg) == expected

    def test_full_pab_exceeds_cross_only(self):
        ts = linear_timesteps(30)
        full = build_schedule(PabPolicy(2, 4, 6, window=(930.0, 450.0)), ts, 2)
        cross_only = build_schedule(PabPolicy(1, 1, 6, window=(930.0, 450.0)), ts, 2)
        assert memory_footprint(full, self.cfg) > memory_footprint(cross_only, self.cfg)


class TestPresets:
    def test_opensora_pab246_values(self):
        policy, notes = resolve_preset("opensora-pab246", layers=4)
        assert (policy.spatial_range, policy.temporal_range, policy.cross_range) == (2, 4, 6)
        assert policy.window == (930.0, 450.0)
        assert policy.mlp.blocks == (0, 1, 2, 3)  # block 4 filtered at depth 4
        assert any("filtered" in n for n in notes)

    def test_unknown_preset_kind(self):
        with pytest.raises(ValidationError) as exc_info:
            resolve_preset("nope", layers=4)
        assert exc_info.value.kind == "unknown-preset"

    def test_deltadit_clamps_block_range(self):
        policy, notes = resolve_preset("deltadit-default", layers=4)
        assert policy.block_range == (0, 3)
        assert notes
        deep, notes_deep = resolve_preset("deltadit-default", layers=8)
        assert deep.block_range == (0, 5)
        assert not notes_deep

    def test_all_presets_build_on_desk_schedule(self):
        from pab_engine.policies import PRESET_NAMES

        ts = linear_timesteps(30)
        for name in PRESET_NAMES:
            policy, _ = resolve_preset(name, layers=4)
            table = build_schedule(policy, ts, 4)
            table.validate()
