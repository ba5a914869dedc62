import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pab_engine.cli import main
from pab_engine.config import config_from_dict
from pab_engine.errors import ArtifactError
from pab_engine.io import read_tensor, write_tensor

SMALL_CONFIG = {
    "model": {
        "layers": 2,
        "hidden": 16,
        "heads": 2,
        "frames": 4,
        "spatial_tokens": 8,
        "text_tokens": 4,
        "seed": 3,
    },
    "schedule": {"steps": 8},
    "policy": {"preset": "opensora-pab246"},
    "seed": 5,
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


class TestTensorDump:
    @settings(max_examples=25, deadline=None)
    @given(
        arrays(
            np.float32,
            st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
            elements=st.floats(-1e6, 1e6, width=32),
        )
    )
    def test_roundtrip_lossless(self, arr):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.pabt"
            write_tensor(path, arr)
            back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_layout(self, tmp_path):
        path = tmp_path / "t.pabt"
        write_tensor(path, np.array([[1.0, 2.0]], dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"PABT"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:20], "little") == 1
        assert int.from_bytes(raw[20:28], "little") == 2
        assert len(raw) == 28 + 2 * 4

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ArtifactError):
            read_tensor(tmp_path / "absent.pabt")
        bad = tmp_path / "bad.pabt"
        bad.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(ArtifactError):
            read_tensor(bad)


class TestGenerate:
    def test_idempotent_latents(self, cfg_path, tmp_path):
        assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "latent.pabt").read_bytes()
        b = (tmp_path / "b" / "latent.pabt").read_bytes()
        assert a == b

    def test_manifests_identical_modulo_timestamp(self, cfg_path, tmp_path):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b")])
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        for manifest in (ma, mb):
            manifest.pop("created_at")
            manifest["config"].pop("output_dir")
        assert ma == mb

    def test_preset_resolves_ranges_and_window(self, cfg_path, tmp_path):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        policy = manifest["config"]["policy"]
        assert [policy["spatial_range"], policy["temporal_range"], policy["cross_range"]] == [2, 4, 6]
        assert policy["window"] == [930.0, 450.0]
        assert manifest["config"]["preset"] == "opensora-pab246"

    def test_unknown_preset_exit_code(self, cfg_path, tmp_path, capsys):
        rc = main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "x"),
                   "--preset", "mystery"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["kind"] == "unknown-preset"

    def test_seed_override_changes_latent(self, cfg_path, tmp_path):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "6"])
        a = read_tensor(tmp_path / "a" / "latent.pabt")
        b = read_tensor(tmp_path / "b" / "latent.pabt")
        assert not np.array_equal(a, b)

    def test_missing_out_dir_is_invalid(self, cfg_path, capsys):
        rc = main(["generate", "--config", str(cfg_path)])
        assert rc == 2
        assert json.loads(capsys.readouterr().err)["error"]["kind"] == "invalid-config"


class TestCompare:
    def _generate_pair(self, cfg_path, tmp_path):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b")])

    def test_identical_runs(self, cfg_path, tmp_path):
        self._generate_pair(cfg_path, tmp_path)
        rc = main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path)])
        assert rc == 0
        rows = read_csv(tmp_path / "quality.csv")
        by_metric = {}
        for row in rows:
            by_metric.setdefault(row["metric"], []).append(row)
        assert all(float(r["mean"]) == 0.0 for r in by_metric["mse"])
        assert all(math.isinf(float(r["mean"])) for r in by_metric["psnr"])
        assert all(abs(float(r["mean"]) - 1.0) <= 1e-9 for r in by_metric["ssim"])

    def test_missing_artifact_exit_code(self, cfg_path, tmp_path, capsys):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        rc = main(["compare", str(tmp_path / "a"), str(tmp_path / "nope"), "--out", str(tmp_path)])
        assert rc == 3
        assert json.loads(capsys.readouterr().err)["error"]["kind"] == "missing-artifact"

    def test_shape_mismatch_exit_code(self, cfg_path, tmp_path, capsys):
        main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        other = dict(SMALL_CONFIG)
        other["model"] = dict(SMALL_CONFIG["model"], frames=2)
        other_path = tmp_path / "other.json"
        other_path.write_text(json.dumps(other))
        main(["generate", "--config", str(other_path), "--out", str(tmp_path / "b")])
        rc = main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path)])
        assert rc == 3
        assert json.loads(capsys.readouterr().err)["error"]["kind"] == "shape-mismatch"


class TestProfile:
    def test_all_compute_ratio_is_one(self, cfg_path, tmp_path, capsys):
        rc = main(["profile", "--config", str(cfg_path), "--out", str(tmp_path / "p"),
                   "--preset", "none"])
        assert rc == 0
        assert "flops ratio = 1.000000" in capsys.readouterr().out
        rows = read_csv(tmp_path / "p" / "flops.csv")
        assert all(float(r["ratio"]) == 1.0 for r in rows)

    def test_pab_ratio_below_one_and_redundancy_rows(self, cfg_path, tmp_path):
        rc = main(["profile", "--config", str(cfg_path), "--out", str(tmp_path / "p")])
        assert rc == 0
        flops = read_csv(tmp_path / "p" / "flops.csv")
        total = [r for r in flops if r["kind"] == "total"][0]
        assert float(total["ratio"]) < 1.0
        red = read_csv(tmp_path / "p" / "redundancy.csv")
        n, layers = SMALL_CONFIG["schedule"]["steps"], SMALL_CONFIG["model"]["layers"]
        per_layer = [r for r in red if r["layer"] != "all"]
        averages = [r for r in red if r["layer"] == "all"]
        assert len(per_layer) == (n - 1) * 4 * layers
        assert len(averages) == (n - 1) * 6
        breakdown = read_csv(tmp_path / "p" / "breakdown.csv")
        assert sum(float(r["percent"]) for r in breakdown) == pytest.approx(100.0, abs=0.1)


class TestSimulateParallel:
    def test_ratio_line_and_summary(self, cfg_path, tmp_path, capsys):
        rc = main(["simulate-parallel", "--config", str(cfg_path), "--out", str(tmp_path / "s"),
                   "--preset", "none", "--workers", "8,1", "--method", "all"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "ratio megatron:ulysses:dsp = 8.000 : 2.000 : 1.000" in out
        assert "fraction = 1.0000" in out
        summary = json.loads((tmp_path / "s" / "summary.json").read_text())
        w1 = summary["workers"]["1"]
        assert all(v["elements"] == 0 for v in w1.values())
        w8 = summary["workers"]["8"]
        assert w8["megatron_sp"]["elements"] == 8 * w8["dsp"]["elements"]

    def test_pab_fraction_printed_to_four_decimals(self, cfg_path, tmp_path, capsys):
        rc = main(["simulate-parallel", "--config", str(cfg_path), "--out", str(tmp_path / "s"),
                   "--workers", "4", "--method", "broadcast_sp"])
        assert rc == 0
        out = capsys.readouterr().out
        # N=8 linear: window [930, 450] covers steps 1..4, temporal range 4
        # computes at step 1 and reuses 2..4, so 5 of 8 steps compute
        assert "temporal computing-step fraction = 0.6250" in out
        rows = read_csv(tmp_path / "s" / "comm.csv")
        assert set(rows[0].keys()) == {"step", "layer", "method", "elements", "bytes", "communicating"}


class TestAblate:
    def test_structure_and_ratios(self, cfg_path, tmp_path):
        rc = main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "abl")])
        assert rc == 0
        rows = read_csv(tmp_path / "abl" / "ablate.csv")
        assert [r["disabled"] for r in rows] == ["none", "spatial", "temporal", "cross", "mlp"]
        full_ratio = float(rows[0]["flops_ratio"])
        for row in rows[1:]:
            assert full_ratio < float(row["flops_ratio"]) < 1.0
            assert float(row["mse_vs_full_pab"]) >= 0.0

    def test_unknown_kind_rejected(self, cfg_path, tmp_path, capsys):
        rc = main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "abl"),
                   "--disable", "selfattn"])
        assert rc == 2

    def test_requires_pab_policy(self, cfg_path, tmp_path):
        rc = main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "abl"),
                   "--preset", "tgate-default"])
        assert rc == 2

    def test_thread_cap_env(self, cfg_path, tmp_path, monkeypatch):
        monkeypatch.setenv("PAB_ENGINE_THREADS", "2")
        rc = main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "abl2"),
                   "--disable", "spatial,cross"])
        assert rc == 0
        rows = read_csv(tmp_path / "abl2" / "ablate.csv")
        assert [r["disabled"] for r in rows] == ["none", "spatial", "cross"]


class TestConfigRoundTrip:
    def test_parse_serialize_parse_identical(self):
        cfg = config_from_dict(SMALL_CONFIG)
        again = config_from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_defaults_recorded(self):
        cfg = config_from_dict({})
        assert "seed" in cfg.defaults_filled
        assert "model.layers" in cfg.defaults_filled

    def test_unknown_fields_rejected(self):
        from pab_engine.errors import ValidationError

        with pytest.raises(ValidationError):
            config_from_dict({"modle": {}})
        with pytest.raises(ValidationError):
            config_from_dict({"model": {"hiden": 3}})

    def test_cross_field_validation(self):
        from pab_engine.errors import ValidationError

        with pytest.raises(ValidationError):
            config_from_dict({"parallel": {"workers": 3}})  # 3 does not divide 8/64
        with pytest.raises(ValidationError):
            config_from_dict({"parallel": {"method": "broadcast_sp"}})  # none policy
