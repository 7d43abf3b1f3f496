"""CLI for generating corpora, training recipes, pseudo-labeling and evaluation."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING

import typer

from adapt_asr.errors import AdaptAsrError

if TYPE_CHECKING:
    from adapt_asr.models import ExperimentSpec

app = typer.Typer(help="Self- and semi-supervised domain adaptation for streaming transducer ASR")


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level"),
) -> None:
    from rich.logging import RichHandler

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(name)s: %(message)s",
        handlers=[RichHandler(show_path=False, show_time=False)],
        force=True,
    )


@contextmanager
def _exit_on_error() -> Iterator[None]:
    """Map every deliberate error to one stderr line and exit code 1."""
    try:
        yield
    except AdaptAsrError as e:
        typer.echo(f"{type(e).__name__}: {e}", err=True)
        raise typer.Exit(1) from e


def _load_spec(spec_path: Path | None, name: str) -> ExperimentSpec:
    from adapt_asr.config import default_experiment, load_experiment_spec

    if spec_path is not None:
        return load_experiment_spec(spec_path)
    return default_experiment(name)


@app.command()
def info() -> None:
    """Show the resolved defaults, scale factors and presets."""
    from adapt_asr.config import load_corpus_spec, load_model_defaults, load_presets

    corpus = load_corpus_spec()
    model = load_model_defaults()
    full = load_model_defaults(full_size=True)
    presets = load_presets()

    typer.echo(
        f"Corpus: vocab {corpus.vocab_size}, {corpus.feat_dim} features x {corpus.stack} stacked, "
        f"{corpus.n_domains} domain ids"
    )
    for label, defaults in (("desk", model), ("full size", full)):
        s = defaults.student
        typer.echo(
            f"Student ({label}): {s.n_blocks} blocks, dim {s.model_dim}, {s.n_heads} heads, "
            f"left context {s.left_context}, kernel {s.conv_kernel}"
        )
    typer.echo(f"Teacher right context: {model.teacher.right_context}")
    typer.echo("Scale factors (full size / desk):")
    for key, value in model.scale_factors.items():
        typer.echo(f"  {key}: {value:g}")
    typer.echo(f"Presets: {len(presets)}")
    for name, preset in presets.items():
        typer.echo(f"  {name} ({len(preset.rows)} rows): {preset.description}")


@app.command("gen-data")
def gen_data(
    out: Path = typer.Option(..., help="Directory to write the corpus into"),
    spec_path: Path | None = typer.Option(None, "--spec", help="CorpusSpec JSON"),
    seed: int | None = typer.Option(None, help="Corpus seed (overrides the spec)"),
) -> None:
    """Generate the synthetic two-domain corpus."""
    from adapt_asr.config import load_corpus_spec, load_corpus_spec_file
    from adapt_asr.synthgen import generate, write_corpus

    with _exit_on_error():
        spec = load_corpus_spec() if spec_path is None else load_corpus_spec_file(spec_path)
        if seed is not None:
            spec = spec.model_copy(update={"seed": seed})
        corpus = generate(spec)
        write_corpus(corpus, out)
    typer.echo(f"Wrote {len(corpus.utterances)} utterances to {out}")
    for key, value in corpus.stats.items():
        typer.echo(f"  {key}: {value:.3f}")


@app.command()
def pretrain(
    corpus_dir: Path = typer.Option(..., "--corpus", help="Corpus directory"),
    out: Path = typer.Option(..., help="Checkpoint file to write"),
    spec_path: Path | None = typer.Option(None, "--spec", help="ExperimentSpec JSON"),
    kind: str | None = typer.Option(None, help="wav2vec, wav2vec2 or apc"),
    seed: int = typer.Option(0, help="Run seed"),
) -> None:
    """Self-supervised pre-training of the encoder on MD features."""
    from adapt_asr.models import Algorithm, SelfSupKind
    from adapt_asr.pipeline import pretrain_selfsup, save_model
    from adapt_asr.synthgen import read_corpus

    with _exit_on_error():
        spec = _load_spec(spec_path, "pretrain")
        selfsup = spec.selfsup
        if kind is not None:
            selfsup = selfsup.model_copy(update={"kind": SelfSupKind(kind)})
        spec = spec.model_copy(
            update={
                "algorithm": Algorithm.SELFSUP_PRETRAIN_FINETUNE,
                "selfsup": selfsup,
                "seed": seed,
            }
        )
        stage = pretrain_selfsup(spec, read_corpus(corpus_dir))
        save_model(stage.params, stage.config, out, stage="pretrain", steps=stage.train.steps_run)
    final = stage.train.losses[-1] if stage.train.losses else float("nan")
    typer.echo(f"Pre-trained {stage.train.steps_run} steps, final loss {final:.4f} -> {out}")
    if stage.train.diverged:
        typer.echo("Pre-training diverged", err=True)
        raise typer.Exit(1)


@app.command()
def train(
    corpus_dir: Path = typer.Option(..., "--corpus", help="Corpus directory"),
    out: Path = typer.Option(..., help="Run directory for report and checkpoints"),
    spec_path: Path | None = typer.Option(None, "--spec", help="ExperimentSpec JSON"),
    init: Path | None = typer.Option(None, help="Pre-trained encoder checkpoint"),
    manifest: Path | None = typer.Option(None, help="Pseudo-label manifest for NST"),
    teacher: bool = typer.Option(False, "--teacher", help="Train only the NST teacher"),
    seed: int | None = typer.Option(None, help="Override the spec seed"),
) -> None:
    """Run a recipe; with --init or --manifest run only its final stage."""
    from adapt_asr.confidence import read_manifest
    from adapt_asr.harness import save_report
    from adapt_asr.pipeline import (
        load_model,
        run_recipe,
        save_model,
        train_student_nst,
        train_supervised,
        train_teacher,
    )
    from adapt_asr.synthgen import read_corpus

    with _exit_on_error():
        spec = _load_spec(spec_path, "train")
        if seed is not None:
            spec = spec.model_copy(update={"seed": seed})
        corpus = read_corpus(corpus_dir)
        if teacher:
            stage = train_teacher(spec, corpus)
            path = save_model(stage.params, stage.config, out / "teacher.npz", stage="teacher")
            typer.echo(f"Teacher trained {stage.train.steps_run} steps -> {path}")
            if stage.train.diverged:
                raise typer.Exit(1)
            return
        init_params = None
        pretrain_steps = 0
        if init is not None:
            init_params, _, meta = load_model(init)
            pretrain_steps = int(meta.get("steps", 0))
        if manifest is not None:
            outcome = train_student_nst(
                spec,
                corpus,
                read_manifest(manifest),
                init=init_params,
                pretrain_steps=pretrain_steps,
                out_dir=out,
            )
        elif init_params is not None:
            outcome = train_supervised(
                spec, corpus, init=init_params, pretrain_steps=pretrain_steps
            )
        else:
            outcome = run_recipe(spec, corpus, out_dir=out)
        save_model(outcome.params, outcome.config, out / "model.npz", stage="final")
        report_path = save_report(outcome.report, out)
    report = outcome.report
    typer.echo(
        f"{report.name}: WER_target {report.wer_target:.4f}, "
        f"WER_source {report.wer_source:.4f}"
    )
    typer.echo(f"Report: {report_path}")
    if report.status.value != "completed":
        typer.echo(f"Run {report.status.value}", err=True)
        raise typer.Exit(1)


@app.command("pseudo-label")
def pseudo_label_cmd(
    ckpt: Path = typer.Option(..., help="Teacher checkpoint"),
    corpus_dir: Path = typer.Option(..., "--corpus", help="Corpus directory"),
    out: Path = typer.Option(..., help="Manifest file (JSON lines) to write"),
    split: str = typer.Option("MF_unlabeled", help="Split to pseudo-label"),
    threshold: float = typer.Option(0.9, help="Confidence threshold"),
    beam: int = typer.Option(4, help="Beam size"),
) -> None:
    """Decode a split with the teacher, score confidence and filter."""
    from adapt_asr.confidence import write_manifest
    from adapt_asr.pipeline import load_model, pseudo_label
    from adapt_asr.synthgen import read_corpus

    with _exit_on_error():
        params, config, _ = load_model(ckpt)
        corpus = read_corpus(corpus_dir)
        result = pseudo_label(
            params, config, corpus.split(split), threshold=threshold, beam_size=beam
        )
        write_manifest(result.records, out)
    stats = result.stats
    typer.echo(
        f"Kept {stats.n_kept}/{stats.n_total} "
        f"(dropped {stats.dropped_fraction:.1%}) -> {out}"
    )


@app.command("eval")
def eval_cmd(
    ckpt: Path = typer.Option(..., help="Model checkpoint"),
    corpus_dir: Path = typer.Option(..., "--corpus", help="Corpus directory"),
    split: str = typer.Option("eval_MF", help="Split to score"),
    beam: int | None = typer.Option(None, help="Beam size (greedy when omitted)"),
) -> None:
    """Print the split's WER breakdown as JSON."""
    from adapt_asr.models import DecodeMode
    from adapt_asr.pipeline import load_model
    from adapt_asr.scoring import corpus_wer
    from adapt_asr.synthgen import read_corpus

    with _exit_on_error():
        params, config, _ = load_model(ckpt)
        corpus = read_corpus(corpus_dir)
        mode = DecodeMode.GREEDY if beam is None else DecodeMode.BEAM
        breakdown = corpus_wer(
            params, config, corpus.split(split), decode=mode, beam_size=beam or 1
        )
    typer.echo(json.dumps(breakdown.model_dump(mode="json"), indent=2))


@app.command()
def experiment(
    preset: str = typer.Option(..., help="Preset name from presets.yaml"),
    corpus_dir: Path = typer.Option(..., "--corpus", help="Corpus directory"),
    out: Path = typer.Option(Path("runs"), help="Runs directory"),
    seed: int = typer.Option(0, help="Run seed"),
    rows: list[str] | None = typer.Option(None, "--row", help="Run only these rows"),
) -> None:
    """Run every row of a preset and write the comparison table."""
    from adapt_asr.harness import COMPARISON_CSV, run_preset
    from adapt_asr.synthgen import read_corpus

    with _exit_on_error():
        reports = run_preset(preset, read_corpus(corpus_dir), runs_dir=out, seed=seed, only=rows)
    for r in reports:
        typer.echo(
            f"  {r.name:28s} WER_target {r.wer_target:.4f}  WER_source {r.wer_source:.4f}  "
            f"{r.status.value}"
        )
    typer.echo(f"Comparison: {out / preset / f'seed-{seed}' / COMPARISON_CSV}")
    if any(r.status.value != "completed" for r in reports):
        raise typer.Exit(1)
