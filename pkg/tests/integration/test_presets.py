"""Preset execution: run directories, comparison tables and threshold hand-off."""

from pathlib import Path

import pandas as pd
import pytest

from adapt_asr.errors import DependencyError
from adapt_asr.harness import COMPARISON_CSV, get_run_dir, load_report, run_preset
from adapt_asr.models import Algorithm, RunStatus
from adapt_asr.synthgen import Corpus
from tests.conftest import tiny_experiment

BASELINE_ROWS = ["sup_md_src", "apc_md_src"]


class TestRunPreset:
    def test_writes_reports_and_comparison(self, corpus: Corpus, tmp_path: Path) -> None:
        reports = run_preset(
            "table2", corpus, runs_dir=tmp_path, base=tiny_experiment(), only=BASELINE_ROWS
        )
        assert [r.name for r in reports] == BASELINE_ROWS
        assert all(r.status == RunStatus.COMPLETED for r in reports)
        for report in reports:
            run_dir = get_run_dir("table2", report.name, runs_dir=tmp_path)
            assert load_report(run_dir) == report
        apc_dir = get_run_dir("table2", "apc_md_src", runs_dir=tmp_path)
        assert (apc_dir / "pretrain.npz").exists()
        frame = pd.read_csv(tmp_path / "table2" / "seed-0" / COMPARISON_CSV)
        assert list(frame["name"]) == BASELINE_ROWS
        assert reports[0].scale_factors["n_blocks"] == pytest.approx(4.25)

    def test_rerun_gives_identical_table(self, corpus: Corpus, tmp_path: Path) -> None:
        tables = []
        for attempt in ("first", "second"):
            runs_dir = tmp_path / attempt
            run_preset(
                "table2", corpus, runs_dir=runs_dir, base=tiny_experiment(), only=BASELINE_ROWS
            )
            tables.append((runs_dir / "table2" / "seed-0" / COMPARISON_CSV).read_bytes())
        assert tables[0] == tables[1]

    def test_seed_selects_run_directory(self, corpus: Corpus, tmp_path: Path) -> None:
        run_preset(
            "table2", corpus, runs_dir=tmp_path, seed=3, base=tiny_experiment(), only=["sup_md"]
        )
        report = load_report(get_run_dir("table2", "sup_md", seed=3, runs_dir=tmp_path))
        assert report.seed == 3

    def test_self_plus_semi_ground_truth_control(self, corpus: Corpus, tmp_path: Path) -> None:
        (report,) = run_preset(
            "table3",
            corpus,
            runs_dir=tmp_path,
            base=tiny_experiment(),
            only=["self_semi_md_3p_oracle"],
        )
        assert report.algorithm == Algorithm.SELF_PLUS_SEMI
        assert report.status == RunStatus.COMPLETED
        assert report.filter_stats is not None
        assert report.filter_stats.all_label_wer == 0.0


class TestThresholdHandOff:
    def test_threshold_from_same_invocation(self, corpus: Corpus, tmp_path: Path) -> None:
        sup, joint = run_preset(
            "convergence",
            corpus,
            runs_dir=tmp_path,
            base=tiny_experiment(),
            only=["sup_md_src", "joint_w2v_md_src"],
        )
        assert sup.wer_threshold is None
        assert joint.wer_threshold == sup.wer_target

    def test_threshold_from_earlier_run(self, corpus: Corpus, tmp_path: Path) -> None:
        base = tiny_experiment()
        (sup,) = run_preset(
            "convergence", corpus, runs_dir=tmp_path, base=base, only=["sup_md_src"]
        )
        (joint,) = run_preset(
            "convergence", corpus, runs_dir=tmp_path, base=base, only=["joint_w2v_md_src"]
        )
        assert joint.wer_threshold == sup.wer_target

    def test_missing_threshold_source(self, corpus: Corpus, tmp_path: Path) -> None:
        with pytest.raises(DependencyError, match="run that row first"):
            run_preset(
                "convergence",
                corpus,
                runs_dir=tmp_path,
                base=tiny_experiment(),
                only=["joint_w2v_md_src"],
            )
