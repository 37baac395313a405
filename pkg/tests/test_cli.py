"""Tests for experiment configs and the command-line entry point."""

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

import patchrec.cli as cli
from patchrec.checkpoint import checkpoints_equal
from patchrec.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, VOCAB_FILE, EvalEntry, load_experiment, main
from patchrec.context import LabContext
from patchrec.layout_types import LayoutMode
from patchrec.report import read_rows
from patchrec.tokenizer import Vocabulary
from patchrec.trainer import FINAL_DIR
from patchrec.utils import ConfigError, VocabMismatchError, read_json


@pytest.fixture
def experiment_file(tmp_path, experiment_dict):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(experiment_dict), encoding="utf-8")
    return path


def write_variant(tmp_path, experiment_dict, **changes):
    data = json.loads(json.dumps(experiment_dict))
    data.update(changes)
    path = tmp_path / "variant.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


class TestExperimentConfig:
    """Tests for parsing and validating experiment files."""

    @pytest.mark.unit
    def test_parse(self, experiment_file, tmp_path):
        """Plans, links and the synthetic seed are resolved."""
        config = load_experiment(experiment_file)
        assert [p.name for p in config.plans] == ["pretrain", "pft_i"]
        assert config.init_from == {"pft_i": "pretrain"}
        assert config.dataset.synthetic.seed == 0
        assert config.out_dir == tmp_path / "run"
        assert config.plan("pft_i").layout.mode == LayoutMode.PFT_I

    @pytest.mark.unit
    def test_seed_override(self, experiment_file):
        """--seed reaches every plan and the generator."""
        config = load_experiment(experiment_file, seed=5)
        assert config.seed == 5
        assert all(p.seed == 5 for p in config.plans)
        assert config.dataset.synthetic.seed == 5

    @pytest.mark.unit
    def test_no_pretrain_drops_stage(self, experiment_file, tmp_path):
        """--no-pretrain removes pre-training plans, their links and evals, and moves the output."""
        config = load_experiment(experiment_file, no_pretrain=True)
        assert [p.name for p in config.plans] == ["pft_i"]
        assert config.init_from == {}
        assert config.name == "smoke_no_pretrain"
        assert config.out_dir == tmp_path / "run_no_pretrain"
        assert len(config.eval) == 2

    @pytest.mark.unit
    def test_resolved_dict_round_trips_names(self, experiment_file):
        """to_dict records every plan with its init_from."""
        data = load_experiment(experiment_file).to_dict()
        assert [p["init_from"] for p in data["plans"]] == [None, "pretrain"]
        assert data["dataset"]["synthetic"]["users"] == 12

    @pytest.mark.unit
    @pytest.mark.parametrize("changes, message", [
        ({"model": {"d": 8, "depth": 2}}, "unknown model keys"),
        ({"eval": [{"name": "x", "plan": "missing", "mode": "text"}]}, "unknown plan"),
        ({"plans": [{"name": "a", "stage": "finetune_pft_i", "init_from": "b"},
                    {"name": "b", "stage": "pretrain_patch"}]}, "not an earlier plan"),
        ({"plans": [{"name": "a", "stage": "warp_speed"}]}, "warp_speed"),
        ({"plans": [{"name": "a", "stage": "baseline_text"}, {"name": "a", "stage": "pure_item"}]}, "duplicate"),
    ])
    def test_invalid_configs(self, tmp_path, experiment_dict, changes, message):
        """Bad experiment files raise ConfigError naming the problem."""
        path = write_variant(tmp_path, experiment_dict, **changes)
        with pytest.raises(ConfigError, match=message):
            load_experiment(path)

    @pytest.mark.unit
    def test_eval_grid(self):
        """PFT-I entries sweep K x M with M capped at K; text entries sweep K only."""
        pft = EvalEntry(name="p", plan="x", mode=LayoutMode.PFT_I, k_list=[3, 6], m_list=[2, 5])
        assert [(s.k, s.m) for s in pft.specs()] == [(3, 2), (3, 3), (6, 2), (6, 5)]
        text = EvalEntry(name="t", plan="x", mode=LayoutMode.TEXT, k_list=[3, 6], m_list=[2, 5])
        assert [s.k for s in text.specs()] == [3, 6]


class TestMain:
    """Tests for exit codes and command dispatch."""

    @pytest.mark.unit
    def test_missing_config_file(self, tmp_path):
        """A missing experiment file exits with the configuration code."""
        assert main(["ingest", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    @pytest.mark.integration
    def test_missing_dependency_stops_before_training(self, experiment_file, mocker):
        """Training a fine-tune plan without its pre-trained parent exits 2 and trains nothing."""
        pretrain = mocker.patch.object(cli, "run_pretrain")
        finetune = mocker.patch.object(cli, "run_finetune")
        assert main(["train", "--config", str(experiment_file), "--only", "pft_i"]) == EXIT_CONFIG
        pretrain.assert_not_called()
        finetune.assert_not_called()

    @pytest.mark.integration
    def test_eval_without_checkpoints(self, experiment_file):
        """Evaluating before training is a configuration error."""
        assert main(["eval", "--config", str(experiment_file)]) == EXIT_CONFIG

    @pytest.mark.integration
    def test_unknown_only_plan(self, experiment_file):
        """--only with an unknown plan name is rejected."""
        assert main(["train", "--config", str(experiment_file), "--only", "ghost"]) == EXIT_CONFIG

    @pytest.mark.integration
    def test_gen_data_and_ingest(self, experiment_file, tmp_path):
        """gen-data writes the TSVs; ingest writes stats and the vocabulary."""
        assert main(["gen-data", "--config", str(experiment_file)]) == EXIT_OK
        data_dir = tmp_path / "run" / "data"
        assert (data_dir / "catalog.tsv").exists()
        assert (data_dir / "provenance.json").exists()
        assert main(["ingest", "--config", str(experiment_file)]) == EXIT_OK
        stats = read_json(data_dir / "stats.json")
        assert stats["users"] == 12
        assert (data_dir / "vocab.tsv").exists()
        assert read_json(tmp_path / "run" / "resolved_config.json")["name"] == "smoke"

    @pytest.mark.integration
    def test_aggregate_seed_runs(self, experiment_file, tmp_path, seed_run_writer):
        """aggregate summarizes the seed directories and adds them to the report."""
        run = seed_run_writer(tmp_path / "run")
        assert main(["aggregate", "--config", str(experiment_file)]) == EXIT_OK
        criteria = read_json(run / "criteria.json")
        assert [c["verdict"] for c in criteria["criteria"]] == ["PASS"] * 4
        assert "Across Seeds" in (run / "report.md").read_text(encoding="utf-8")

    @pytest.mark.integration
    def test_aggregate_without_seed_runs(self, experiment_file):
        """Nothing to aggregate is a runtime failure."""
        assert main(["aggregate", "--config", str(experiment_file)]) == EXIT_RUNTIME

    @pytest.mark.integration
    def test_aggregate_refuses_no_pretrain(self, experiment_file):
        """Both arms live under the base directory, so --no-pretrain is rejected."""
        assert main(["aggregate", "--config", str(experiment_file), "--no-pretrain"]) == EXIT_CONFIG


class TestEndToEnd:
    """The whole pipeline on a smoke-scale experiment."""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_pipeline(self, experiment_file, tmp_path):
        """gen-data, train, eval and report all succeed and leave their outputs."""
        for command in ("gen-data", "train", "eval", "report"):
            assert main([command, "--config", str(experiment_file)]) == EXIT_OK, command

        run = tmp_path / "run"
        assert (run / "plans" / "pretrain" / FINAL_DIR / "params.bin").exists()
        assert (run / "plans" / "pft_i" / FINAL_DIR / "params.bin").exists()
        summary = read_json(run / "plans" / "pft_i" / "summary.json")
        assert summary["steps"] == summary["total_steps"] == 3

        rows = read_rows(run / "eval" / "sweep.csv")
        assert [(r["entry"], r["k"]) for r in rows] == [("patchrec_i", "6"), ("text", "3"), ("text", "6")]
        assert float(rows[1]["cr"]) == 1.0
        pairs = read_rows(run / "eval" / "equal_token_pairs.csv")
        assert len(pairs) == 1
        assert pairs[0]["entry"] == "patchrec_i"

        report = (run / "report.md").read_text(encoding="utf-8")
        assert "Equal-Token Comparison" in report
        assert "pretrain_patch" in report

    @pytest.mark.slow
    @pytest.mark.integration
    def test_no_pretrain_arm(self, experiment_file, tmp_path):
        """The no-pretrain arm trains from scratch into its own directory."""
        assert main(["train", "--config", str(experiment_file), "--no-pretrain"]) == EXIT_OK
        run = tmp_path / "run_no_pretrain"
        assert (run / "plans" / "pft_i" / FINAL_DIR).exists()
        assert not (run / "plans" / "pretrain").exists()

    @pytest.mark.slow
    @pytest.mark.integration
    def test_repeat_run_is_byte_identical(self, experiment_file, tmp_path):
        """Two runs of train and eval from one config give equal checkpoints and equal reports."""
        runs = [tmp_path / "first", tmp_path / "second"]
        for run in runs:
            for command in ("train", "eval"):
                assert main([command, "--config", str(experiment_file), "--out", str(run)]) == EXIT_OK, command

        first, second = runs
        for plan in ("pretrain", "pft_i"):
            assert checkpoints_equal(first / "plans" / plan / FINAL_DIR, second / "plans" / plan / FINAL_DIR), plan
        reports = sorted(p.name for p in (first / "eval").glob("*.json"))
        assert len(reports) == 3
        assert reports == sorted(p.name for p in (second / "eval").glob("*.json"))
        for name in reports + ["sweep.csv", "equal_token_pairs.csv"]:
            assert (first / "eval" / name).read_bytes() == (second / "eval" / name).read_bytes(), name


class TestVocabularyCheck:
    """Evaluation refuses data whose vocabulary changed since ingest."""

    @pytest.fixture
    def ingested(self, experiment_file):
        assert main(["ingest", "--config", str(experiment_file)]) == EXIT_OK
        config = load_experiment(experiment_file)
        return config, LabContext.from_dataset(cli.load_dataset(config))

    @staticmethod
    def tamper(config):
        path = config.data_dir / VOCAB_FILE
        count = len(path.read_text(encoding="utf-8").splitlines())
        with open(path, "a", encoding="utf-8") as f:
            f.write(f"{count}\tintruder\n")

    @pytest.mark.integration
    def test_fresh_vocab_passes(self, ingested):
        """The file written by ingest matches the rebuilt vocabulary."""
        config, context = ingested
        assert Vocabulary.load(config.data_dir / VOCAB_FILE) == context.vocab
        cli.check_dumped_vocab(config, context)

    @pytest.mark.integration
    def test_tampered_vocab_rejected(self, ingested):
        """An extra token in the dumped vocabulary is a mismatch."""
        config, context = ingested
        self.tamper(config)
        with pytest.raises(VocabMismatchError, match="rerun ingest"):
            cli.check_dumped_vocab(config, context)

    @pytest.mark.integration
    def test_eval_stops_on_stale_vocab(self, ingested, experiment_file, mocker):
        """eval exits with the runtime code before loading any checkpoint."""
        config, _ = ingested
        for entry in config.eval:
            (config.plan_dir(entry.plan) / FINAL_DIR).mkdir(parents=True, exist_ok=True)
        self.tamper(config)
        loader = mocker.patch.object(cli, "load_checkpoint")
        assert main(["eval", "--config", str(experiment_file)]) == EXIT_RUNTIME
        loader.assert_not_called()
