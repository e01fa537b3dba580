"""Detect whether a chat service runs with a given system prompt."""

from ._core import (
    PromptmiError,
    __version__,
    blackbox_test,
    compute_metrics,
    exact_permutation_test,
    mock_embed,
    observed_statistic,
    permutation_test,
    run_cli,
    synthetic_pair,
)

__all__ = [
    "PromptmiError",
    "__version__",
    "blackbox_test",
    "compute_metrics",
    "exact_permutation_test",
    "mock_embed",
    "observed_statistic",
    "permutation_test",
    "run_cli",
    "synthetic_pair",
]
