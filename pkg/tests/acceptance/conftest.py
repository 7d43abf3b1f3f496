"""Shared fixtures for the desk-scale acceptance suite on the default corpus."""

from __future__ import annotations

import os
from statistics import median

import pytest

from adapt_asr.config import default_experiment, load_corpus_spec
from adapt_asr.models import ExperimentSpec, RunReport
from adapt_asr.pipeline import run_recipe
from adapt_asr.synthgen import Corpus, generate

ACCEPTANCE_ENV = "ADAPT_ASR_ACCEPTANCE"
SEEDS = (0, 1, 2)


@pytest.fixture(autouse=True)
def _require_acceptance_flag() -> None:
    """Skip unless ADAPT_ASR_ACCEPTANCE=1; these runs take tens of minutes."""
    if os.environ.get(ACCEPTANCE_ENV) != "1":
        pytest.skip(f"Set {ACCEPTANCE_ENV}=1 to run the acceptance suite.")


def desk_spec(name: str, **update: object) -> ExperimentSpec:
    return default_experiment(name).model_copy(update=update)


class RunCache:
    """Runs each distinct spec once per session; rows are shared across tests."""

    def __init__(self, corpus: Corpus) -> None:
        self.corpus = corpus
        self._reports: dict[str, RunReport] = {}

    def report(self, spec: ExperimentSpec) -> RunReport:
        key = spec.model_dump_json(by_alias=True)
        if key not in self._reports:
            self._reports[key] = run_recipe(spec, self.corpus).report
        return self._reports[key]

    def seeds(self, spec: ExperimentSpec) -> list[RunReport]:
        return [self.report(spec.model_copy(update={"seed": s})) for s in SEEDS]

    def median_target(self, spec: ExperimentSpec) -> float:
        return median(r.wer_target for r in self.seeds(spec))

    def median_source(self, spec: ExperimentSpec) -> float:
        return median(r.wer_source for r in self.seeds(spec))


@pytest.fixture(scope="session")
def desk_corpus() -> Corpus:
    return generate(load_corpus_spec())


@pytest.fixture(scope="session")
def runs(desk_corpus: Corpus) -> RunCache:
    return RunCache(desk_corpus)
