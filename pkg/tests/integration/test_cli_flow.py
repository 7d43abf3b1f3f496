"""The command-line stages chained through files on disk."""

import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

from adapt_asr.cli import app
from adapt_asr.harness import load_report
from adapt_asr.models import Algorithm, DataSplit, ExperimentSpec
from adapt_asr.pipeline import AUDIT_FILENAME
from adapt_asr.synthgen import Corpus, write_corpus
from tests.conftest import tiny_experiment

runner = CliRunner()


def _write_spec(spec: ExperimentSpec, path: Path) -> Path:
    path.write_text(json.dumps(spec.model_dump(mode="json", by_alias=True), indent=2))
    return path


@pytest.fixture(scope="module")
def corpus_dir(corpus: Corpus, tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(corpus, out)
    return out


class TestSupervisedFlow:
    def test_train_then_eval(self, corpus_dir: Path, tmp_path: Path) -> None:
        spec = _write_spec(tiny_experiment(), tmp_path / "spec.json")
        run = tmp_path / "run"
        result = runner.invoke(
            app, ["train", "--corpus", str(corpus_dir), "--out", str(run), "--spec", str(spec)]
        )
        assert result.exit_code == 0, result.output
        assert "WER_target" in result.output
        assert load_report(run).train_steps == 3

        result = runner.invoke(
            app, ["eval", "--ckpt", str(run / "model.npz"), "--corpus", str(corpus_dir)]
        )
        assert result.exit_code == 0, result.output
        assert '"n_ref_tokens"' in result.output

    def test_pretrain_then_finetune(self, corpus_dir: Path, tmp_path: Path) -> None:
        spec = _write_spec(tiny_experiment(), tmp_path / "spec.json")
        ckpt = tmp_path / "pre.npz"
        args = ["pretrain", "--corpus", str(corpus_dir), "--out", str(ckpt), "--spec", str(spec)]
        result = runner.invoke(app, [*args, "--kind", "apc"])
        assert result.exit_code == 0, result.output
        assert ckpt.exists()

        run = tmp_path / "run"
        args = ["train", "--corpus", str(corpus_dir), "--out", str(run), "--spec", str(spec)]
        result = runner.invoke(app, [*args, "--init", str(ckpt)])
        assert result.exit_code == 0, result.output
        report = load_report(run)
        assert report.pretrain_steps == 2
        assert report.total_steps == 5


class TestNoisyStudentFlow:
    def test_teacher_pseudo_label_student(self, corpus_dir: Path, tmp_path: Path) -> None:
        nst = tiny_experiment(algorithm=Algorithm.SEMISUP_NST, data_split=DataSplit.MD_3P)
        spec = _write_spec(nst, tmp_path / "nst.json")
        teacher_dir = tmp_path / "teacher"
        args = ["train", "--corpus", str(corpus_dir), "--spec", str(spec)]
        result = runner.invoke(app, [*args, "--out", str(teacher_dir), "--teacher"])
        assert result.exit_code == 0, result.output
        assert (teacher_dir / "teacher.npz").exists()

        manifest = tmp_path / "pseudo.jsonl"
        result = runner.invoke(
            app,
            [
                "pseudo-label",
                "--ckpt",
                str(teacher_dir / "teacher.npz"),
                "--corpus",
                str(corpus_dir),
                "--out",
                str(manifest),
                "--threshold",
                "0.0",
                "--beam",
                "2",
            ],
        )
        assert result.exit_code == 0, result.output
        assert "Kept" in result.output
        assert manifest.exists()

        student_dir = tmp_path / "student"
        result = runner.invoke(app, [*args, "--out", str(student_dir), "--manifest", str(manifest)])
        assert result.exit_code == 0, result.output
        audit = json.loads((student_dir / AUDIT_FILENAME).read_text())
        assert audit["pooled_pseudo"] == audit["kept"]
        assert set(audit["trained_pseudo"]) <= set(audit["kept"])
        assert (student_dir / "model.npz").exists()

    def test_strict_threshold_fails_cleanly(self, corpus_dir: Path, tmp_path: Path) -> None:
        nst = tiny_experiment(algorithm=Algorithm.SEMISUP_NST, data_split=DataSplit.MD_3P)
        spec = _write_spec(nst, tmp_path / "nst.json")
        args = ["train", "--corpus", str(corpus_dir), "--spec", str(spec)]
        result = runner.invoke(app, [*args, "--out", str(tmp_path), "--teacher"])
        assert result.exit_code == 0, result.output

        ckpt = tmp_path / "teacher.npz"
        out = tmp_path / "pseudo.jsonl"
        args = ["pseudo-label", "--ckpt", str(ckpt), "--corpus", str(corpus_dir), "--out", str(out)]
        result = runner.invoke(app, [*args, "--threshold", "1.0"])
        assert result.exit_code == 1
        assert "EmptySelectionError" in result.output
