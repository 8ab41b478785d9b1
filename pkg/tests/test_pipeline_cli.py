import json
from dataclasses import replace

import numpy as np
import pytest

from curvreg import io
from curvreg.cli import main
from curvreg.config import (RunConfig, config_to_dict, load_config,
                            save_config)
from curvreg.errors import ConfigError
from curvreg.pipeline import run_case, run_pipeline


def fast_cfg(out_dir, **kw):
    cfg = RunConfig(out_dir=str(out_dir), case_kind="identity")
    cfg.pullback = replace(cfg.pullback, n_frames=24)
    cfg.gen.length_mm = 18.0
    cfg.optimizer.max_iters = 8
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = fast_cfg(tmp_path / "out", seed=5)
        path = tmp_path / "cfg.json"
        save_config(path, cfg)
        loaded = load_config(path)
        assert config_to_dict(loaded) == config_to_dict(cfg)

    def test_defaults_materialized(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"out_dir": str(tmp_path), "seed": 1}))
        cfg = load_config(path)
        assert cfg.polar.n_r == 64
        assert cfg.optimizer.alpha == 1000.0

    def test_validation_errors(self):
        cfg = RunConfig(stages=["phantom", "nope"])
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = RunConfig(seed=None)
        with pytest.raises(ConfigError):
            cfg.validate()


class TestStages:
    def test_phantom_stage_only(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        run_pipeline(cfg, stages=["phantom"])
        case_dir = tmp_path / "case_0000"
        for name in ("volume.json", "volume.raw", "centerline.json",
                     "fixed_polar.json", "gt_params.json", "gt_labels.json",
                     "reference_centerline.json"):
            assert (case_dir / name).exists(), name
        assert not (case_dir / "fixed_fm.json").exists()
        assert not (case_dir / "report.json").exists()

    def test_full_pipeline_deterministic(self, tmp_path):
        cfg1 = fast_cfg(tmp_path / "a", seed=7)
        run_pipeline(cfg1)
        cfg2 = fast_cfg(tmp_path / "b", seed=7)
        run_pipeline(cfg2)
        rep1 = (tmp_path / "a/case_0007/report.json").read_text()
        rep2 = (tmp_path / "b/case_0007/report.json").read_text()
        assert rep1 == rep2

    def test_artifact_round_trips(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        bundle = run_case(cfg, 0, stages=["phantom"])
        case_dir = tmp_path / "case_0000"
        vol = io.load_volume(case_dir / "volume.json")
        assert np.allclose(vol.data, bundle.volume.data, atol=1e-6)
        c = io.load_centerline(case_dir / "centerline.json")
        assert np.allclose(c.points, bundle.centerline.points)
        polar = io.load_polar(case_dir / "fixed_polar.json")
        assert np.allclose(polar.data, bundle.fixed_polar.data, atol=1e-6)
        params = io.load_params(case_dir / "gt_params.json")
        assert params.s_z == bundle.gt.params.s_z

    def test_no_writes_outside_out_dir(self, tmp_path, monkeypatch):
        out = tmp_path / "sandboxed"
        cfg = fast_cfg(out)
        monkeypatch.chdir(tmp_path)
        before = {p for p in tmp_path.rglob("*")}
        run_pipeline(cfg)
        created = {p for p in tmp_path.rglob("*")} - before
        assert created
        assert all(str(p).startswith(str(out)) for p in created)

    def test_stage_error_writes_error_json(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        # register without its inputs: the stage must fail loudly
        with pytest.raises(Exception):
            run_case(cfg, 0, stages=["register"])
        assert (tmp_path / "case_0000" / "error.json").exists()
        payload = json.loads((tmp_path / "case_0000" / "error.json").read_text())
        assert payload["stage"] == "register"

    def test_sweep_rows_match_seeds(self, tmp_path):
        cfg = fast_cfg(tmp_path, seeds=list(range(3)), jobs=1)
        summary = run_pipeline(cfg)
        csv_lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 1 + 3
        assert summary["n_cases"] == 3
        assert not summary["failures"]


class TestCli:
    def test_init_config_and_sweep(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        assert main(["init-config", "--out", str(cfg_path)]) == 0
        cfg = fast_cfg(tmp_path / "run")
        save_config(cfg_path, cfg)
        code = main(["sweep", "--config", str(cfg_path), "--seed", "3",
                     "--out", str(tmp_path / "run")])
        assert code == 0
        assert (tmp_path / "run/case_0003/report.json").exists()

    def test_stage_gating_flag(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg_path, fast_cfg(tmp_path / "run"))
        main(["sweep", "--config", str(cfg_path), "--seed", "0",
              "--stages", "phantom", "--out", str(tmp_path / "run")])
        assert (tmp_path / "run/case_0000/volume.json").exists()
        assert not (tmp_path / "run/case_0000/params.json").exists()

    def test_features_cli(self, tmp_path):
        cfg = fast_cfg(tmp_path / "run")
        run_pipeline(cfg, stages=["phantom"])
        polar_path = tmp_path / "run/case_0000/fixed_polar.json"
        out_path = tmp_path / "fm.json"
        code = main(["features", "--in", str(polar_path), "--modality", "ivus",
                     "--out", str(out_path)])
        assert code == 0
        fm = io.load_feature_map(out_path)
        assert fm.classes == ("G", "B", "C")

    def test_register_eval_report_cli(self, tmp_path):
        cfg = fast_cfg(tmp_path / "run", seed=2)
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg_path, cfg)
        run_pipeline(cfg, stages=["phantom", "features"])
        case_dir = tmp_path / "run/case_0002"
        assert main(["register", "--fixed", str(case_dir), "--config",
                     str(cfg_path), "--out", str(case_dir)]) == 0
        assert main(["eval", "--result", str(case_dir), "--gt",
                     str(case_dir / "reference_centerline.json"), "--out",
                     str(case_dir / "report.json"), "--config", str(cfg_path)]) == 0
        assert main(["report", "--glob", str(tmp_path / "run/*/report.json"),
                     "--out", str(tmp_path / "summary.csv"),
                     "--plot", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "summary.csv").exists()
        assert list((tmp_path / "plots").glob("*_trace.png"))
        report = io.load_report(case_dir / "report.json")
        assert report.f1 > 0.99

    def test_cli_error_is_machine_readable(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"stages": ["bogus"], "seed": 0}))
        code = main(["sweep", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 2
        err = capsys.readouterr().err
        assert json.loads(err.strip())["error"] == "ConfigError"
