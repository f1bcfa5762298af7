"""Command-line interface for spclab"""

import json
import logging
import sys
from typing import List, Optional

import click

from spclab import __version__
from spclab.api import POLICIES, evaluate, plot_run, regret_bench, train
from spclab.core.bandit import UpdateRule
from spclab.core.teacher import ENV_FAMILIES
from spclab.utils.errors import CheckpointError, ConfigError, SpcError
from spclab.utils.export import format_round_summary
from spclab.utils.validate import parse_int_list

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
USAGE_EXIT = 2
FAILURE_EXIT = 1


def _header(title: str) -> None:
    click.echo()
    click.echo("╔" + "═" * 70 + "╗")
    click.echo(f"║{f'spclab v{__version__}':^70}║")
    click.echo(f"║{title:^70}║")
    click.echo("╚" + "═" * 70 + "╝")
    click.echo()


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.option("--quiet", is_flag=True, help="Only warnings and errors")
def main(verbose, quiet):
    """spclab - clustered-context task curricula for multi-agent students

    A teacher samples training tasks (population sizes) with contextual Exp3 over
    clusters of the student's behaviour; the student is a hierarchical,
    population-invariant policy trained with PPO.

    \b
    Examples:
      # Full curriculum run from a config
      spclab train --config configs/mpe_spread.json --seed 7

      # Evaluate the latest checkpoint of a run on 8 agents
      spclab eval --checkpoint runs/s7 --population 8

      # Regret scaling of mesh Exp3
      spclab regret-bench --arms 4 --horizons 2500,10000,40000 --seeds 20

      # Figures from a finished run
      spclab plot --run runs/s7
    """
    _configure_logging(verbose, quiet)


@main.command(name="train")
@click.option("--config", "config_path", type=str, required=True, help="Experiment config JSON")
@click.option("--seed", type=int, help="Override run.seed")
@click.option("--rounds", type=int, help="Override run.rounds")
@click.option("--output", type=str, help="Override run.output (run directory)")
@click.option("--workers", type=int, help="Override run.workers (rollout processes)")
def train_cmd(config_path, seed, rounds, output, workers):
    """Run a full curriculum experiment from a config file

    Writes run.csv, contexts.csv, updates.csv, config.json and checkpoints
    to the run directory.

    \b
    Examples:
      spclab train --config configs/default.json
      spclab train --config c.json --seed 7 --rounds 20 --output runs/s7
    """
    _header("Skilled Population Curriculum")
    state = {"arms": None}

    def echo_round(record):
        if state["arms"] is None:
            state["arms"] = len(record.probabilities)
        row = record.to_row()
        click.echo(format_round_summary(row, state["arms"]))

    frame = train(config_path, seed=seed, rounds=rounds, output=output, workers=workers,
                  progress=False, callback=echo_round)
    last = frame.iloc[-1]
    click.echo()
    click.echo("━" * 72)
    click.echo(f"  Rounds:               {len(frame)}")
    click.echo(f"  Final target return:  {last['target_return']:.4f}")
    click.echo(f"  Final coverage:       {last['target_coverage']:.3f}")
    click.echo("━" * 72)
    click.echo()


@main.command(name="eval")
@click.option("--checkpoint", type=str, help="Checkpoint or run directory")
@click.option("--policy", type=click.Choice(POLICIES), default="checkpoint", show_default=True,
              help="Trained student or a scripted baseline")
@click.option("--env-family", type=click.Choice(ENV_FAMILIES), help="Task family")
@click.option("--population", type=int, help="Number of agents")
@click.option("--max-steps", type=int, help="Episode cap")
@click.option("--episodes", type=int, default=5, show_default=True, help="Evaluation episodes")
@click.option("--gamma", type=float, help="Discount of the reported return")
@click.option("--seed", type=int, default=0, show_default=True, help="Evaluation seed")
def eval_cmd(checkpoint, policy, env_family, population, max_steps, episodes, gamma, seed):
    """Evaluate a checkpoint or a scripted policy on one task

    \b
    Examples:
      spclab eval --checkpoint runs/s7
      spclab eval --policy nearest --population 2 --episodes 50
    """
    result, task = evaluate(
        checkpoint=checkpoint, policy=policy, env_family=env_family, population=population,
        max_steps=max_steps, episodes=episodes, gamma=gamma, seed=seed,
    )
    click.echo()
    click.echo(f"  Task:          {task.label}")
    click.echo(f"  Policy:        {policy}")
    click.echo(f"  Episodes:      {episodes}")
    click.echo(f"  Mean return:   {result.mean_return:.4f} ± {result.standard_error:.4f}")
    click.echo(f"  Mean coverage: {result.mean_coverage:.3f}")
    click.echo()


@main.command(name="regret-bench")
@click.option("--arms", type=int, default=4, show_default=True, help="Number of arms K")
@click.option("--lipschitz", type=float, default=1.0, show_default=True, help="Lipschitz constant")
@click.option("--horizons", type=str, default="2500,10000,40000", show_default=True,
              help="Comma-separated horizons")
@click.option("--seeds", type=int, default=20, show_default=True, help="Runs per horizon")
@click.option("--rule", "rules", type=click.Choice([r.value for r in UpdateRule]),
              multiple=True, help="Exp3 update rule; repeat to pick several (default: all)")
@click.option("--workers", type=int, default=1, show_default=True, help="Process pool size")
@click.option("--output", type=str, default="runs/regret", show_default=True,
              help="Directory for regret.csv and summary.json")
def regret_bench_cmd(arms, lipschitz, horizons, seeds, rules, workers, output):
    """Regret scaling of mesh-discretised Exp3 on a Lipschitz family

    \b
    Example:
      spclab regret-bench --arms 4 --lipschitz 1.0 --horizons 2500,10000,40000 --seeds 20
    """
    horizons = parse_int_list(horizons, "--horizons")
    _header("Lipschitz Regret Scaling")
    rules = list(rules) or [r.value for r in UpdateRule]
    _, summary = regret_bench(arms=arms, lipschitz=lipschitz, horizons=horizons, seeds=seeds,
                              rules=rules, workers=workers, output=output, progress=True)
    for rule, fit in summary["rules"].items():
        click.echo()
        click.echo(f"  Rule: {rule}")
        for t, mean, sd, eps in zip(summary["horizons"], fit["mean_regret"],
                                    fit["sd_regret"], summary["epsilon"]):
            click.echo(f"  T={t:>8,}  eps={eps:.4f}  regret {mean:10.2f} ± {sd:.2f}")
        click.echo(f"  Fitted log-log slope: {fit['slope']:.3f}  (theory 2/3)")
    click.echo()
    click.echo(f"  💾 Results saved to: {output}")
    click.echo()


@main.command()
@click.option("--run", "run_dir", type=str, required=True, help="Run directory holding run.csv")
@click.option("--csv-only", is_flag=True, help="Write CSV tables instead of images")
def plot(run_dir, csv_only):
    """Render the task distribution and learning curves of a run

    \b
    Examples:
      spclab plot --run runs/s7
      spclab plot --run runs/s7 --csv-only
    """
    for path in plot_run(run_dir, csv_only=csv_only):
        click.echo(f"  ✓ {path}")


def _error_line(kind: str, message: str) -> None:
    click.echo(json.dumps({"error": kind, "message": message}), err=True)


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit status

    Usage errors, config errors and checkpoint errors exit 2; any other
    spclab error exits 1. Failures print one JSON error line on stderr.
    """
    try:
        main.main(args=argv, prog_name="spclab", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        _error_line("Abort", "aborted")
        return FAILURE_EXIT
    except click.UsageError as e:
        _error_line("UsageError", e.format_message())
        return USAGE_EXIT
    except click.ClickException as e:
        _error_line(type(e).__name__, e.format_message())
        return e.exit_code
    except (ConfigError, CheckpointError) as e:
        _error_line(type(e).__name__, str(e))
        return USAGE_EXIT
    except SpcError as e:
        logger.debug("Command failed", exc_info=True)
        _error_line(type(e).__name__, str(e))
        return FAILURE_EXIT
    return 0


def run() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    run()
