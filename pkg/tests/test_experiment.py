"""Config round-trips, seeded pipeline runs, sweeps, reports and the CLI."""

import json

import numpy as np
import pytest

from warplab.cli import main
from warplab.experiment import (AttackConfig, DatasetConfig, ExperimentConfig, ModelConfig,
                                TheoryConfig, build_scenario, correlate_norm_vs_risk,
                                load_manifest, materialize, recon_comparison, report,
                                run_scenario, set_field, sweep)
from warplab.recon import ReconConfig
from warplab.io import load_checkpoint, read_table
from warplab.nn import TrainConfig
from warplab.seeding import derive_seed


def tiny(**attack):
    return ExperimentConfig(
        dataset=DatasetConfig(n_per_class=25, d=6, K=3, spread=0.5, forget_frac=0.1,
                              n_test_per_class=10),
        model=ModelConfig((6, 8, 3), "relu", 0),
        train=TrainConfig(20, 0.1, 16, 0),
        attack=AttackConfig(**{"n_shadows": 3, "ggd_m": 60, "n_targets": 2, "probe_m": 6, **attack}))


class TestConfig:
    def test_json_roundtrip(self):
        cfg = set_field(tiny(), "theory", TheoryConfig())
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg and back.config_hash() == cfg.config_hash()

    def test_unknown_key_rejected(self):
        doc = tiny().to_dict()
        doc["train"]["momentum"] = 0.9
        with pytest.raises(ValueError, match="momentum"):
            ExperimentConfig.from_dict(doc)

    def test_set_field(self):
        cfg = set_field(tiny(), "warp.eta_tel", 0.5)
        assert cfg.warp.eta_tel == 0.5 and tiny().warp.eta_tel != 0.5
        with pytest.raises(KeyError):
            set_field(tiny(), "nope.x", 1)

    def test_materialize_derives_seeds(self):
        cfg = materialize(tiny(), 11)
        assert cfg.train.seed == derive_seed(11, "train")
        assert cfg.dataset.seed != cfg.dataset.test_seed
        assert materialize(tiny(), None) == tiny()

    def test_derive_seed_stable(self):
        assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")


class TestPipeline:
    def test_same_seed_same_artifacts(self, tmp_path):
        cfg = tiny(kind="ggd")
        a = run_scenario(cfg, tmp_path / "a", stages=("attack",))
        b = run_scenario(cfg, tmp_path / "b", stages=("attack",))
        assert a.ok and b.ok
        assert a.artifacts == b.artifacts
        assert "attack/ggd_summary.tsv" in a.artifacts

    def test_master_seed_changes_run(self, tmp_path):
        a = run_scenario(materialize(tiny(), 1), tmp_path / "a", stages=("train",))
        b = run_scenario(materialize(tiny(), 2), tmp_path / "b", stages=("train",))
        assert a.artifacts["train/theta_org.json"] != b.artifacts["train/theta_org.json"]

    def test_checkpoint_readable(self, tmp_path):
        run_scenario(tiny(), tmp_path, stages=("unlearn",))
        spec, theta = load_checkpoint(tmp_path / "unlearn" / "theta_u.json")
        assert spec.layer_dims == (6, 8, 3) and np.all(np.isfinite(theta.values))
        header, rows = read_table(tmp_path / "unlearn" / "trace.tsv")
        assert header[0] == "step" and len(rows) == tiny().unlearn.ngp.steps

    def test_ulira_outputs(self, tmp_path):
        man = run_scenario(tiny(kind="ulira"), tmp_path, stages=("attack",))
        assert man.ok, man.error
        for rel in ("attack/ulira_roc.tsv", "attack/norm_vs_risk.tsv", "attack/shadows/unlearned_000.json"):
            assert rel in man.artifacts

    def test_recon_outputs(self, tmp_path):
        man = run_scenario(tiny(kind="recon"), tmp_path, stages=("attack",))
        assert man.ok, man.error
        header, rows = read_table(tmp_path / "attack" / "recon_summary.tsv")
        assert {r[0] for r in rows} >= {"filtered", "naive"}

    def test_failure_names_stage(self, tmp_path):
        bad = set_field(tiny(), "model.layer_dims", (5, 8, 3))
        man = run_scenario(bad, tmp_path, stages=("unlearn",))
        assert man.failed_stage == "train" and "unlearn" not in man.timings
        assert load_manifest(tmp_path / "manifest.json").failed_stage == "train"

    def test_theory_stage(self, tmp_path):
        cfg = set_field(tiny(), "theory", TheoryConfig(n_mc=2000))
        man = run_scenario(cfg, tmp_path, stages=("theory",))
        assert man.ok and "theory/bounds.tsv" in man.artifacts

    def test_sweep_and_report(self, tmp_path):
        mans, rows = sweep(tiny(), "warp.enabled", [False, True], tmp_path, stages=("unlearn",))
        assert len(mans) == 2 and all(m.ok for m in mans)
        assert [r[0] for r in rows] == ["false", "true"]
        assert len(report(tmp_path)) == 2


@pytest.fixture(scope="module")
def sc():
    cfg = tiny()
    return build_scenario(cfg.dataset, cfg.model, cfg.train)


class TestReconComparison:
    def test_matched_equals_fixed_at_defender_sigma(self, sc):
        kw = dict(n_targets=2, probe_m=6, methods=(), attacker_sigmas=(0.8,), cob_sigma=0.8,
                  adaptive_cfg=ReconConfig(iters=5, step=0.1), seed=3)
        a = recon_comparison(sc, match_defender=True, **kw)
        b = recon_comparison(sc, match_defender=False, **kw)
        np.testing.assert_array_equal(a.x_hat["adaptive@0.8"], b.x_hat["adaptive@0.8"])

    def test_matched_zero_faces_plain_update(self, sc):
        kw = dict(n_targets=2, probe_m=6, methods=(), attacker_sigmas=(0.0,),
                  adaptive_cfg=ReconConfig(iters=5, step=0.1), seed=3)
        a = recon_comparison(sc, match_defender=True, **kw)
        b = recon_comparison(sc, match_defender=False, **kw)
        assert not np.allclose(a.mse["adaptive@0"], b.mse["adaptive@0"])


class TestCorrelate:
    def test_perfect_rank(self):
        rho, table = correlate_norm_vs_risk([1.0, 2.0, 3.0], [0.1, 0.5, 0.9])
        assert rho == pytest.approx(1.0) and len(table) == 3

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError):
            correlate_norm_vs_risk([1.0, 2.0], [0.1, 0.2], [0, 1], [1, 0])


class TestCLI:
    def _cfg(self, tmp_path, cfg=None):
        p = tmp_path / "cfg.json"
        (cfg or tiny()).save(p)
        return str(p)

    def test_train(self, tmp_path, capsys):
        assert main(["train", "--config", self._cfg(tmp_path), "--out", str(tmp_path / "o")]) == 0
        assert "ok:" in capsys.readouterr().out

    def test_attack_ggd_with_master_seed(self, tmp_path):
        out = tmp_path / "o"
        rc = main(["attack-ggd", "--config", self._cfg(tmp_path), "--out", str(out),
                   "--master-seed", "5"])
        assert rc == 0
        assert json.loads((out / "config.json").read_text())["master_seed"] == 5

    def test_failure_exit_code(self, tmp_path, capsys):
        cfg = set_field(tiny(), "model.layer_dims", (5, 8, 3))
        rc = main(["unlearn", "--config", self._cfg(tmp_path, cfg), "--out", str(tmp_path / "o")])
        assert rc != 0 and "failed stage: train" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
        assert "failed stage: config" in capsys.readouterr().err

    def test_theory_needs_block(self, tmp_path):
        assert main(["theory-bounds", "--config", self._cfg(tmp_path), "--out", str(tmp_path / "o")]) == 2

    def test_sweep_and_report(self, tmp_path):
        out = str(tmp_path / "sw")
        assert main(["sweep", "--config", self._cfg(tmp_path), "--out", out, "--axis",
                     "unlearn.ngp.eta", "--values", "0.0", "0.02", "--stages", "data,train,unlearn"]) == 0
        assert main(["report", "--out", out]) == 0

    def test_bad_workers(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--workers", "0"]) == 2
