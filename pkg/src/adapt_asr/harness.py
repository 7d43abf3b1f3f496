"""Run directories, preset execution and comparison tables."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd

from adapt_asr.config import DEFAULT_CONFIG_DIR, load_model_defaults, load_presets, spec_for_row
from adapt_asr.errors import ConfigError, DependencyError
from adapt_asr.models import ExperimentSpec, Preset, PresetRow, RunReport
from adapt_asr.pipeline import run_recipe
from adapt_asr.synthgen import Corpus

logger = logging.getLogger(__name__)

DEFAULT_RUNS_DIR = Path(__file__).parent.parent.parent / "runs"
REPORT_FILENAME = "report.json"
COMPARISON_CSV = "comparison.csv"
COMPARISON_JSON = "comparison.json"

COMPARISON_COLUMNS = [
    "name",
    "algorithm",
    "data_split",
    "label_fraction",
    "selfsup_kind",
    "seed",
    "status",
    "wer_target",
    "wer_source",
    "teacher_wer_target",
    "kept_fraction",
    "kept_label_wer",
    "all_label_wer",
    "steps_to_threshold",
    "total_steps",
]


# --- Run directories ---


def get_run_dir(
    preset: str, row: str, *, seed: int = 0, runs_dir: Path = DEFAULT_RUNS_DIR
) -> Path:
    """Return the directory holding one preset row's artifacts for ``seed``."""
    return runs_dir / preset / f"seed-{seed}" / row


def save_report(report: RunReport, run_dir: Path) -> Path:
    """Write report.json into the run directory, creating parents."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / REPORT_FILENAME
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2))
    return path


def load_report(run_dir: Path) -> RunReport:
    path = run_dir / REPORT_FILENAME
    if not path.exists():
        msg = f"No report at {path}; run that row first"
        raise DependencyError(msg)
    return RunReport.model_validate_json(path.read_text())


# --- Comparison tables ---


def comparison_frame(reports: list[RunReport]) -> pd.DataFrame:
    """One row per report with the metrics the ablation tables compare."""
    rows = []
    for r in reports:
        stats = r.filter_stats
        rows.append(
            {
                "name": r.name,
                "algorithm": r.algorithm.value,
                "data_split": r.data_split.value,
                "label_fraction": r.label_fraction,
                "selfsup_kind": r.selfsup_kind.value if r.selfsup_kind else None,
                "seed": r.seed,
                "status": r.status.value,
                "wer_target": r.wer_target,
                "wer_source": r.wer_source,
                "teacher_wer_target": r.teacher_wer_target,
                "kept_fraction": None if stats is None else 1.0 - stats.dropped_fraction,
                "kept_label_wer": None if stats is None else stats.kept_label_wer,
                "all_label_wer": None if stats is None else stats.all_label_wer,
                "steps_to_threshold": r.steps_to_threshold,
                "total_steps": r.total_steps,
            }
        )
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def write_comparison(reports: list[RunReport], out_dir: Path) -> tuple[Path, Path]:
    """Write comparison.csv and comparison.json for a preset run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = comparison_frame(reports)
    csv_path = out_dir / COMPARISON_CSV
    frame.to_csv(csv_path, index=False)
    json_path = out_dir / COMPARISON_JSON
    json_path.write_text(json.dumps([r.model_dump(mode="json") for r in reports], indent=2))
    return csv_path, json_path


def relative_gain(baseline: float, treated: float) -> float:
    """Relative WER reduction of ``treated`` over ``baseline`` (0 when baseline is 0)."""
    if baseline == 0:
        return 0.0
    return (baseline - treated) / baseline


def sweep_gains(
    reports: list[RunReport], baseline_algorithm: str = "supervised"
) -> dict[float, float]:
    """Per label fraction, relative WER_target gain of the self-sup row over the baseline."""
    by_fraction: dict[float, dict[str, float]] = {}
    for r in reports:
        if r.label_fraction is None:
            continue
        key = "baseline" if r.algorithm.value == baseline_algorithm else "treated"
        by_fraction.setdefault(r.label_fraction, {})[key] = r.wer_target
    return {
        fraction: relative_gain(pair["baseline"], pair["treated"])
        for fraction, pair in sorted(by_fraction.items())
        if {"baseline", "treated"} <= pair.keys()
    }


# --- Preset execution ---


def resolve_preset(name: str, config_dir: Path = DEFAULT_CONFIG_DIR) -> Preset:
    presets = load_presets(config_dir)
    if name not in presets:
        msg = f"Unknown preset '{name}' (known: {', '.join(sorted(presets))})"
        raise ConfigError(msg)
    return presets[name]


def _threshold_for(
    row: PresetRow,
    done: dict[str, RunReport],
    preset: str,
    seed: int,
    runs_dir: Path,
) -> float | None:
    if row.threshold_from is None:
        return None
    source = done.get(row.threshold_from)
    if source is None:
        source = load_report(get_run_dir(preset, row.threshold_from, seed=seed, runs_dir=runs_dir))
    return source.wer_target


def run_preset(
    name: str,
    corpus: Corpus,
    *,
    runs_dir: Path = DEFAULT_RUNS_DIR,
    seed: int = 0,
    config_dir: Path = DEFAULT_CONFIG_DIR,
    base: ExperimentSpec | None = None,
    only: list[str] | None = None,
) -> list[RunReport]:
    """Execute every row of a preset in order and write reports and comparison tables.

    Rows that take their WER threshold from another row need that row's report,
    either from this invocation or from an earlier one under ``runs_dir``.
    """
    preset = resolve_preset(name, config_dir)
    scale_factors = load_model_defaults(config_dir).scale_factors
    rows = [r for r in preset.rows if only is None or r.name in only]
    done: dict[str, RunReport] = {}
    for row in rows:
        spec = spec_for_row(row, config_dir, seed=seed, base=base)
        threshold = _threshold_for(row, done, name, seed, runs_dir)
        if threshold is not None:
            spec = spec.model_copy(update={"wer_threshold": threshold})
        run_dir = get_run_dir(name, row.name, seed=seed, runs_dir=runs_dir)
        outcome = run_recipe(spec, corpus, out_dir=run_dir, scale_factors=scale_factors)
        save_report(outcome.report, run_dir)
        done[row.name] = outcome.report
        logger.info(
            "%s/%s: WER_target %.4f, WER_source %.4f (%s)",
            name,
            row.name,
            outcome.report.wer_target,
            outcome.report.wer_source,
            outcome.report.status.value,
        )
    reports = list(done.values())
    write_comparison(reports, runs_dir / name / f"seed-{seed}")
    return reports
