import json

import pandas as pd
import pytest

import cau
from cau_utils import DivergenceError, StalenessError
from conftest import write_config
from run_manifest import load_manifest, manifest_path


def run_stages(config_path, *stages):
    return [cau.main([stage, "--config", str(config_path)]) for stage in stages]


@pytest.fixture
def run_dir(tmp_path):
    out_dir = tmp_path / "run"
    return write_config(tmp_path / "config.json", out_dir), out_dir


def test_full_chain(run_dir):
    config_path, out_dir = run_dir
    assert run_stages(config_path, "prep", "train", "unlearn", "eval") == [0, 0, 0, 0]
    for name in ("train.txt", "valid.txt", "test.txt", "unlearn.txt", "model_rec.bin", "model_rec.json",
                 "model_app.bin", "alpha_trace.csv", "loss_trace.csv", "difficulty.csv", "metrics.csv",
                 "metrics.json", "train_history.csv", "unlearn_timings.json"):
        assert (out_dir / name).exists(), name
    metrics = pd.read_csv(out_dir / "metrics.csv")
    assert set(metrics["metric"]) == {"recall", "ndcg", "hit_u", "u_beta"}
    assert list(pd.read_csv(out_dir / "alpha_trace.csv").columns) == ["epoch", "step", "alpha1", "alpha2", "alpha3"]
    assert len(pd.read_csv(out_dir / "loss_trace.csv")) == 2
    assert json.loads((out_dir / "metrics.json").read_text())[0]["extra"]["popularity_recall@10"] >= 0.0


def test_prep_rerun_is_identical(run_dir):
    config_path, out_dir = run_dir
    assert cau.main(["prep", "--config", str(config_path)]) == 0
    before = manifest_path(out_dir, "prep").read_bytes()
    assert cau.main(["prep", "--config", str(config_path)]) == 0
    assert manifest_path(out_dir, "prep").read_bytes() == before
    assert "seconds" in json.loads((out_dir / "prep_timings.json").read_text())


def test_two_directories_agree(tmp_path):
    outputs = []
    for name in ("a", "b"):
        config_path = write_config(tmp_path / f"{name}.json", tmp_path / name)
        assert run_stages(config_path, "prep", "train", "unlearn", "eval") == [0, 0, 0, 0]
        outputs.append(tmp_path / name)
    for file_name in ("model_app.bin", "metrics.csv", "alpha_trace.csv", "unlearn.manifest.json"):
        assert (outputs[0] / file_name).read_bytes() == (outputs[1] / file_name).read_bytes(), file_name


def test_synth_chain_is_bitwise_repeatable(tmp_path, monkeypatch):
    outputs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        out_dir.mkdir()
        # a relative dataset path keeps the two prep configs equal
        monkeypatch.chdir(out_dir)
        synth_config = write_config(tmp_path / f"{name}-synth.json", out_dir)
        assert cau.main(["synth", "--config", str(synth_config)]) == 0
        config_path = write_config(tmp_path / f"{name}.json", out_dir,
                                   dataset={"synth": None, "path": "synth_corpus.txt", "format": "corpus"})
        assert run_stages(config_path, "prep", "train", "unlearn", "eval") == [0, 0, 0, 0]
        outputs.append(out_dir)

    names = sorted(p.name for p in outputs[0].iterdir() if not p.name.endswith("_timings.json"))
    assert names == sorted(p.name for p in outputs[1].iterdir() if not p.name.endswith("_timings.json"))
    assert "metrics.csv" in names and "synth.manifest.json" in names
    for file_name in names:
        assert (outputs[0] / file_name).read_bytes() == (outputs[1] / file_name).read_bytes(), file_name


def test_zero_ratio_has_no_forgetting_metrics(tmp_path):
    config_path = write_config(tmp_path / "config.json", tmp_path / "run", dataset={"unlearn_ratio": 0.0},
                               eval={"model": "rec"})
    assert run_stages(config_path, "prep", "train", "eval") == [0, 0, 0]
    assert (tmp_path / "run" / "unlearn.txt").read_text() == ""
    metrics = pd.read_csv(tmp_path / "run" / "metrics.csv")
    assert set(metrics["metric"]) == {"recall", "ndcg"}


def test_seed_override(tmp_path):
    config_path = write_config(tmp_path / "config.json", tmp_path / "run")
    assert cau.main(["prep", "--config", str(config_path), "--seed", "9", "--out", str(tmp_path / "other")]) == 0
    manifest = json.loads(manifest_path(tmp_path / "other", "prep").read_text())
    assert manifest["config"]["dataset"]["split_seed"] == 9
    assert not (tmp_path / "run").exists()


def test_synth_command(tmp_path):
    assert cau.main(["synth", "--out", str(tmp_path), "--seed", "3"]) == 0
    assert (tmp_path / "synth_corpus.txt").exists()
    assert manifest_path(tmp_path, "synth").exists()


class TestExitCodes:
    def test_missing_upstream(self, run_dir):
        config_path, _ = run_dir
        assert cau.main(["train", "--config", str(config_path)]) == 3

    def test_stale_upstream(self, tmp_path):
        out_dir = tmp_path / "run"
        config_path = write_config(tmp_path / "config.json", out_dir)
        assert run_stages(config_path, "prep", "train") == [0, 0]
        changed = write_config(tmp_path / "changed.json", out_dir, dataset={"min_count": 3})
        assert cau.main(["prep", "--config", str(changed)]) == 0
        assert cau.main(["unlearn", "--config", str(changed)]) == 3

    def test_train_on_prep_with_other_dataset_config(self, tmp_path):
        out_dir = tmp_path / "run"
        config_path = write_config(tmp_path / "config.json", out_dir)
        assert cau.main(["prep", "--config", str(config_path)]) == 0
        changed = write_config(tmp_path / "changed.json", out_dir, dataset={"min_count": 3, "unlearn_ratio": 0.3})
        assert cau.main(["train", "--config", str(changed)]) == 3
        assert not manifest_path(out_dir, "train").exists()

    def test_unlearn_and_eval_with_other_model_config(self, tmp_path):
        out_dir = tmp_path / "run"
        config_path = write_config(tmp_path / "config.json", out_dir)
        assert run_stages(config_path, "prep", "train", "unlearn") == [0, 0, 0]
        changed = write_config(tmp_path / "changed.json", out_dir, model={"learn_rate": 0.5, "unlearn_batch": 2})
        before = manifest_path(out_dir, "unlearn").read_bytes()
        assert cau.main(["unlearn", "--config", str(changed)]) == 3
        assert cau.main(["eval", "--config", str(changed)]) == 3
        assert manifest_path(out_dir, "unlearn").read_bytes() == before
        assert not manifest_path(out_dir, "eval").exists()

    def test_eval_with_other_unlearn_config(self, run_dir, tmp_path):
        config_path, out_dir = run_dir
        assert run_stages(config_path, "prep", "train", "unlearn") == [0, 0, 0]
        changed = write_config(tmp_path / "changed.json", out_dir, unlearn={"epochs": 3})
        assert cau.main(["eval", "--config", str(changed)]) == 3

    def test_checkpoint_with_other_hyperparameters(self, run_dir, mocker):
        config_path, out_dir = run_dir
        assert run_stages(config_path, "prep", "train") == [0, 0]
        config = cau.load_config(config_path)
        params, hp = cau.load_checkpoint(out_dir / "model_rec.bin")
        mocker.patch("cau.load_checkpoint", return_value=(params, hp.model_copy(update={"learn_rate": 0.5})))
        with pytest.raises(StalenessError):
            cau.load_model(out_dir, load_manifest(out_dir, "train"), config)

    def test_unknown_config_key(self, tmp_path):
        config_path = write_config(tmp_path / "config.json", tmp_path / "run", unlearn={"epochz": 2})
        assert cau.main(["prep", "--config", str(config_path)]) == 2

    def test_invalid_synth_spec(self, tmp_path):
        config_path = write_config(tmp_path / "config.json", tmp_path / "run", dataset={"synth": {"n_sessions": 99}})
        assert cau.main(["prep", "--config", str(config_path)]) == 2

    def test_missing_config(self, tmp_path):
        assert cau.main(["prep"]) == 2
        assert cau.main(["prep", "--config", str(tmp_path / "absent.json")]) == 2

    def test_bad_arguments(self):
        assert cau.main(["bogus"]) == 2
        assert cau.main(["prep", "--threads", "0"]) == 2

    def test_bad_log_level(self, run_dir, monkeypatch):
        config_path, _ = run_dir
        monkeypatch.setenv("CAU_LOG", "loud")
        assert cau.main(["prep", "--config", str(config_path)]) == 2

    def test_missing_dataset_file(self, tmp_path):
        config_path = write_config(tmp_path / "config.json", tmp_path / "run",
                                   dataset={"synth": None, "path": str(tmp_path / "absent.tsv")})
        assert cau.main(["prep", "--config", str(config_path)]) == 3

    def test_divergence(self, run_dir, mocker):
        config_path, _ = run_dir
        assert run_stages(config_path, "prep", "train") == [0, 0]
        mocker.patch("cau.run_mode", side_effect=DivergenceError("normal loss exploded"))
        assert cau.main(["unlearn", "--config", str(config_path)]) == 4

    def test_unlearning_empty_forget_set(self, tmp_path):
        config_path = write_config(tmp_path / "config.json", tmp_path / "run", dataset={"unlearn_ratio": 0.0})
        assert run_stages(config_path, "prep", "train", "unlearn") == [0, 0, 1]


def test_ablate(tmp_path):
    config_path = write_config(
        tmp_path / "config.json", tmp_path / "run",
        ablation={"modes": ["cau", "ga_only", "original", "retrain"],
                  "cau_variants": ["gradient-hard", "embedding-soft"], "batch_sizes": [4]},
    )
    assert run_stages(config_path, "prep", "train", "ablate") == [0, 0, 0]
    out_dir = tmp_path / "run"
    table = pd.read_csv(out_dir / "ablation.csv")
    assert len(table) == 5 * 2
    assert list(table["setting"].unique()) == ["base", "batch=4"]
    assert set(table["run"]) == {"cau-gradient-hard", "cau-embedding-soft", "ga_only", "original", "retrain"}
    assert {"recall@10", "hit_u@1", "u_beta", "status", "seconds", "speedup_vs_retrain"} <= set(table.columns)
    assert (table["seconds"] >= 0).all()
    assert (table.loc[table["run"] == "retrain", "speedup_vs_retrain"] == 1.0).all()
    assert not (out_dir / "ablation_timings.csv").exists()

    # wall-clock columns differ between reruns; the manifest does not
    before = manifest_path(out_dir, "ablate").read_bytes()
    assert cau.main(["ablate", "--config", str(config_path)]) == 0
    assert manifest_path(out_dir, "ablate").read_bytes() == before
    again = pd.read_csv(out_dir / "ablation.csv").drop(columns=list(cau.TIMING_COLUMNS))
    pd.testing.assert_frame_equal(again, table.drop(columns=list(cau.TIMING_COLUMNS)))


def test_ablate_needs_forget_set(tmp_path, mocker):
    config_path = write_config(tmp_path / "config.json", tmp_path / "run", dataset={"unlearn_ratio": 0.0},
                               ablation={"modes": ["cau", "original"]})
    assert run_stages(config_path, "prep", "train") == [0, 0]
    pool = mocker.patch("cau.ProcessPoolExecutor")
    assert cau.main(["ablate", "--config", str(config_path), "--threads", "2"]) == 2
    pool.assert_not_called()
    assert not (tmp_path / "run" / "ablation.csv").exists()
