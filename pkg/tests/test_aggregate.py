"""Tests for the multi-seed aggregation and its checks."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from patchrec.aggregate import (
    CRITERIA_FILE, NO_PRETRAIN_ARM, PRETRAIN_ARM, SUMMARY_FILE, aggregate_seeds, baseline_beats_random,
    bootstrap_interval, compressed_parity, find_seed_runs, load_sweeps, long_history, pretrain_ablation,
    summarize,
)
from patchrec.report import read_rows, render_report
from patchrec.utils import DataError, read_json


def verdicts(result):
    return {c.name: c.verdict for c in result.criteria}


class TestLoading:
    """Tests for finding and reading seed sweeps."""

    @pytest.mark.integration
    def test_finds_both_arms(self, seed_runs):
        """seed_<n> is the pre-trained arm, seed_<n>_no_pretrain the other."""
        runs = find_seed_runs(seed_runs)
        assert [(seed, arm) for seed, arm, _ in runs] == [
            (0, PRETRAIN_ARM), (0, NO_PRETRAIN_ARM), (1, PRETRAIN_ARM), (1, NO_PRETRAIN_ARM),
            (2, PRETRAIN_ARM), (2, NO_PRETRAIN_ARM),
        ]

    @pytest.mark.integration
    def test_skips_unfinished_and_unrelated_dirs(self, seed_runs):
        """Directories without a sweep or with another name are ignored."""
        (seed_runs / "seed_7" / "plans").mkdir(parents=True)
        (seed_runs / "data").mkdir()
        (seed_runs / "seed_x").mkdir()
        assert {seed for seed, _, _ in find_seed_runs(seed_runs)} == {0, 1, 2}

    @pytest.mark.integration
    def test_rows_tagged_with_arm_and_seed(self, seed_runs):
        """Every sweep row carries its arm and seed."""
        sweeps = load_sweeps(seed_runs)
        assert len(sweeps) == 3 * 8
        assert set(sweeps["seed"]) == {0, 1, 2}
        assert set(sweeps["arm"]) == {PRETRAIN_ARM, NO_PRETRAIN_ARM}

    @pytest.mark.unit
    def test_no_runs_is_a_data_error(self, tmp_path):
        """An experiment directory with no seed sweeps cannot be aggregated."""
        with pytest.raises(DataError, match="seed_"):
            load_sweeps(tmp_path)


class TestStatistics:
    """Tests for medians and bootstrap intervals."""

    @pytest.mark.unit
    def test_single_value_interval(self):
        """One seed gives a zero-width interval at that value."""
        assert bootstrap_interval([0.4]) == (0.4, 0.4)

    @pytest.mark.unit
    def test_interval_brackets_median(self, rng):
        """The interval is ordered, holds the sample median and is reproducible."""
        values = rng.normal(0.3, 0.05, size=9)
        low, high = bootstrap_interval(values)
        assert low <= np.median(values) <= high
        assert (low, high) == bootstrap_interval(values)
        assert values.min() <= low and high <= values.max()

    @pytest.mark.unit
    def test_empty_rejected(self):
        """An interval over nothing is a data error."""
        with pytest.raises(DataError):
            bootstrap_interval([])

    @pytest.mark.integration
    def test_summary_medians(self, seed_runs):
        """Each (arm, entry, mode, k, m, l) row holds the median over its three seeds."""
        summary = summarize(load_sweeps(seed_runs))
        assert len(summary) == 8
        assert (summary["seeds"] == 3).all()
        row = summary[(summary["arm"] == PRETRAIN_ARM) & (summary["mode"] == "pft_i") & (summary["k"] == 40)].iloc[0]
        assert row["hr@20_median"] == pytest.approx(0.30)
        assert row["hr@20_ci_low"] == pytest.approx(0.29)
        assert row["hr@20_ci_high"] == pytest.approx(0.31)
        assert row["cr_median"] == pytest.approx(3.0)


class TestCriteria:
    """Tests for the four checks."""

    @pytest.mark.integration
    def test_all_pass(self, seed_runs):
        """The default fake runs satisfy every check."""
        sweeps = load_sweeps(seed_runs)
        summary = summarize(sweeps)
        assert baseline_beats_random(summary).passed is True
        assert compressed_parity(summary).passed is True
        assert long_history(summary).passed is True
        assert pretrain_ablation(sweeps).passed is True

    @pytest.mark.integration
    def test_weak_baseline_fails(self, tmp_path, seed_run_writer):
        """Text HR@20 of 0.31 against a random 0.07 is under five times."""
        summary = summarize(load_sweeps(seed_run_writer(tmp_path / "run", random_hr=0.07)))
        result = baseline_beats_random(summary)
        assert result.passed is False
        assert result.values[0]["k"] == 40

    @pytest.mark.integration
    def test_parity_uses_only_compressed_rows(self, tmp_path, seed_run_writer):
        """0.25 against text 0.31 fails parity at K=40; the CR 1 row at K=5 is not judged."""
        base = seed_run_writer(tmp_path / "run", hr={("pretrain", "patchrec_i", "pft_i", 40, 5): 0.25})
        result = compressed_parity(summarize(load_sweeps(base)))
        assert result.passed is False
        assert [v["k"] for v in result.values] == [40]
        assert result.values[0]["text_hr@20"] == pytest.approx(0.31)

    @pytest.mark.integration
    def test_shorter_history_winning_fails(self, tmp_path, seed_run_writer):
        """PFT-I doing better at K=5 than at K=40 fails the long-history check."""
        base = seed_run_writer(tmp_path / "run", hr={("pretrain", "patchrec_i", "pft_i", 40, 5): 0.15})
        result = long_history(summarize(load_sweeps(base)))
        assert result.passed is False
        assert (result.values[0]["short_k"], result.values[0]["long_k"]) == (5, 40)

    @pytest.mark.integration
    def test_ablation_difference_and_interval(self, seed_runs):
        """Per-seed differences of 0.04 at K=40 give a median and interval of 0.04."""
        result = pretrain_ablation(load_sweeps(seed_runs))
        row = next(v for v in result.values if v["k"] == 40)
        assert row["seeds"] == 3
        assert row["diff_median"] == pytest.approx(0.04)
        assert row["diff_ci_low"] == pytest.approx(0.04)
        assert row["diff_ci_high"] == pytest.approx(0.04)

    @pytest.mark.integration
    def test_scratch_winning_fails_ablation(self, tmp_path, seed_run_writer):
        """Training from scratch ahead of pre-training fails the directional check."""
        base = seed_run_writer(tmp_path / "run", hr={("no_pretrain", "patchrec_i", "pft_i", 40, 5): 0.40})
        assert pretrain_ablation(load_sweeps(base)).passed is False

    @pytest.mark.integration
    def test_missing_arm_skips_ablation(self, tmp_path, seed_run_writer):
        """Without the no-pretrain arm the ablation is skipped, not failed."""
        base = seed_run_writer(tmp_path / "run", arms=("pretrain",))
        result = pretrain_ablation(load_sweeps(base))
        assert result.passed is None
        assert result.verdict == "SKIP"


class TestAggregateSeeds:
    """Tests for the files written by aggregate_seeds."""

    @pytest.mark.integration
    def test_writes_summary_and_criteria(self, seed_runs):
        """seed_summary.csv and criteria.json land in the base directory."""
        result = aggregate_seeds(seed_runs)
        assert result.seeds == [0, 1, 2]
        assert verdicts(result) == {
            "baseline_beats_random": "PASS", "compressed_parity": "PASS",
            "long_history": "PASS", "pretrain_ablation": "PASS",
        }
        assert len(read_rows(seed_runs / SUMMARY_FILE)) == 8
        criteria = read_json(seed_runs / CRITERIA_FILE)
        assert criteria["seeds"] == [0, 1, 2]
        assert criteria["arms"] == [NO_PRETRAIN_ARM, PRETRAIN_ARM]
        assert [c["verdict"] for c in criteria["criteria"]] == ["PASS"] * 4

    @pytest.mark.integration
    def test_report_section(self, seed_runs):
        """The markdown report shows the seed table, the verdicts and the ablation interval."""
        aggregate_seeds(seed_runs)
        report = render_report(seed_runs, "smoke")
        assert "Across Seeds" in report
        assert "| patchrec_i | pft_i | 40 | 5 | 1 | 3 |" in report
        assert "✅ PASS" in report
        assert "with pre-training" in report

    @pytest.mark.unit
    def test_report_without_seeds(self, tmp_path):
        """A single-run directory gets the placeholder instead of a table."""
        assert "No multi-seed summary found" in render_report(tmp_path, "smoke")
