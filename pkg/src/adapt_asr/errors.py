"""Exception hierarchy shared by every module and mapped to exit codes by the CLI."""

from __future__ import annotations


class AdaptAsrError(Exception):
    """Base class for all errors raised deliberately by adapt_asr."""


class ContractError(AdaptAsrError, ValueError):
    """An operation was called with inputs that violate its contract."""


class ConfigError(AdaptAsrError, ValueError):
    """A configuration is internally inconsistent or unsupported."""


class CorpusFormatError(AdaptAsrError, ValueError):
    """A corpus or manifest file could not be parsed."""


class DependencyError(AdaptAsrError, FileNotFoundError):
    """A prerequisite artifact (checkpoint, corpus, preset row) is missing."""


class DivergenceError(AdaptAsrError, RuntimeError):
    """Training produced a non-finite loss."""


class EmptySelectionError(AdaptAsrError, ValueError):
    """The confidence filter kept no utterances."""
