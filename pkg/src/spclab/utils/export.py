"""Export utilities for run logs, regret studies and figures"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from spclab.utils.errors import SpcError  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def run_columns(arm_count: int) -> List[str]:
    """Header of run.csv for K arms"""
    return (
        ["round", "cluster_id", "task_id"]
        + [f"p_{k}" for k in range(arm_count)]
        + ["raw_return", "norm_reward", "target_return", "target_coverage", "J_hat", "status"]
    )


def context_columns(context_dim: int) -> List[str]:
    return ["round"] + [f"ctx_{i}" for i in range(context_dim)]


UPDATE_COLUMNS = [
    "round", "update_index", "level", "surrogate", "kl", "value_loss", "entropy",
    "clip_fraction", "mean_return",
]


def append_csv(rows: Sequence[Dict], columns: Sequence[str], output_path: PathLike) -> str:
    """Append rows to a CSV file, writing the header only when the file is new

    Args:
        rows: Row dictionaries
        columns: Column order
        output_path: Path to the CSV file

    Returns:
        Path to the file
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(rows), columns=list(columns))
    df.to_csv(
        output_path,
        mode="a",
        index=False,
        header=not output_path.exists(),
        lineterminator="\n",
        encoding="utf-8",
    )
    return str(output_path)


def write_csv(frame: pd.DataFrame, output_path: PathLike) -> str:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output_path, index=False, lineterminator="\n", encoding="utf-8")
    return str(output_path)


def write_json(data: Dict, output_path: PathLike) -> str:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(output_path)


def append_jsonl(records: Iterable[Dict], output_path: PathLike) -> str:
    """Append one JSON object per line"""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with output_path.open("a", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return str(output_path)


def read_run_log(run_dir: PathLike) -> pd.DataFrame:
    """Load run.csv of a run directory

    Raises:
        SpcError: If the run has no log
    """
    path = Path(run_dir) / "run.csv"
    if not path.is_file():
        raise SpcError(f"No run log found at {path}")
    return pd.read_csv(path)


def probability_columns(frame: pd.DataFrame) -> List[str]:
    cols = [c for c in frame.columns if c.startswith("p_")]
    return sorted(cols, key=lambda c: int(c[2:]))


def task_distribution_frame(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[["round"] + probability_columns(frame)]


def coverage_frame(frame: pd.DataFrame) -> pd.DataFrame:
    return frame[["round", "target_coverage", "target_return"]]


def plot_task_distribution(frame: pd.DataFrame, output_path: PathLike,
                           labels: Sequence[str] = ()) -> str:
    """Stacked area plot of the teacher's task distribution over rounds"""
    cols = probability_columns(frame)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.stackplot(frame["round"], *[frame[c] for c in cols],
                 labels=list(labels) if labels else cols)
    ax.set_xlabel("teacher round")
    ax.set_ylabel("sampling probability")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(output_path, dpi=150)
    plt.close(fig)
    return str(output_path)


def plot_coverage(frame: pd.DataFrame, output_path: PathLike) -> str:
    """Target-task coverage per round"""
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(frame["round"], frame["target_coverage"], marker="o", markersize=3)
    ax.set_xlabel("teacher round")
    ax.set_ylabel("target coverage")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(output_path, dpi=150)
    plt.close(fig)
    return str(output_path)


def plot_returns(frame: pd.DataFrame, output_path: PathLike) -> str:
    """Target-task discounted return and the objective estimate per round"""
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(frame["round"], frame["target_return"], label="target return")
    ax.plot(frame["round"], frame["J_hat"], linestyle="--", label="J_hat")
    ax.set_xlabel("teacher round")
    ax.set_ylabel("discounted return")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(output_path, dpi=150)
    plt.close(fig)
    return str(output_path)


def format_round_summary(record: Dict, arm_count: int) -> str:
    """One-line terminal summary of a teacher round"""
    probs = " ".join(f"{record[f'p_{k}']:.2f}" for k in range(arm_count))
    return (
        f"  round {record['round']:>4}  cluster {record['cluster_id']}  "
        f"task {record['task_id']}  p=[{probs}]  "
        f"target return {record['target_return']:.3f}  "
        f"coverage {record['target_coverage']:.2f}  [{record['status']}]"
    )
