"""
spclab - Skilled Population Curriculum lab

A contextual-bandit teacher that picks population sizes for a hierarchical,
population-invariant multi-agent student, plus the regret harness behind it.
"""

__version__ = "0.1.0"

from spclab.api import evaluate, plot_run, regret_bench, train  # noqa: E402
from spclab.utils.errors import ConfigError, RoundAbortedError, SpcError  # noqa: E402

__all__ = [
    "train",
    "evaluate",
    "regret_bench",
    "plot_run",
    "SpcError",
    "ConfigError",
    "RoundAbortedError",
]
