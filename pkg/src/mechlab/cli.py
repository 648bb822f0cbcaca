"""``mechlab`` command line: run configured experiments and write result files.

Exit codes: 1 invalid config, 2 numerical failure or unwritable output,
3 property violation (the result file is still written).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .core import ConfigurationError, DistributionError, NumericalError
from .experiments import (PropertyViolation, builtin_configs, load_config, parse_gammas,
                          run_experiment, write_result)

EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 1, 2, 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _execute(cfg: dict, out: Path, fmt: str) -> None:
    violation = None
    try:
        payload = run_experiment(cfg)
    except PropertyViolation as exc:
        payload, violation = exc.payload, exc
    except (ConfigurationError, DistributionError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (NumericalError, ArithmeticError) as exc:
        _fail(EXIT_NUMERIC, f"numerical failure: {exc}")
    try:
        path = write_result(payload, out, fmt)
    except OSError as exc:
        _fail(EXIT_NUMERIC, f"cannot write results: {exc}")
    click.echo(str(path))
    if violation is not None:
        _fail(EXIT_VIOLATION, f"property violation: {violation}")


def _apply(cfg: dict, **overrides) -> dict:
    cfg = dict(cfg)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _common(fn):
    fn = click.option("--out", "out", type=click.Path(path_type=Path), default=Path("results"),
                      show_default=True, help="Directory for result files.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None)(fn)
    fn = click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default=None,
                      help="Result file format.")(fn)
    return fn


@click.group()
def main():
    """Single-call truthful mechanisms: experiments and verifiers."""


@main.command()
@click.option("--config", "config", required=True,
              help=f"Config path or bundled name ({', '.join(builtin_configs())}).")
@_common
@click.option("--samples", type=click.IntRange(1), default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--gammas", default=None, help="START:STOP:STEP, inclusive.")
@click.option("--case", default=None)
def run(config, seed, out, fmt, samples, gamma, gammas, case):
    """Run the experiment described by a JSON config."""
    try:
        cfg = load_config(config)
    except ConfigurationError as exc:
        _fail(EXIT_CONFIG, str(exc))
    cfg = _apply(cfg, seed=seed, samples=samples, gamma=gamma, gammas=gammas, case=case)
    if samples is not None and cfg["experiment"] in ("run-midr", "run-bks"):
        cfg["runs"] = samples
    default_fmt = "csv" if cfg["experiment"] == "sweep" else "json"
    _execute(cfg, out, fmt or default_fmt)


@main.command()
@click.option("--gammas", default="0.1:0.9:0.1", show_default=True, help="START:STOP:STEP.")
@click.option("--n", "n", type=click.IntRange(1, 12), default=3, show_default=True)
@_common
def sweep(gammas, n, seed, out, fmt):
    """Metrics of OptMIDR across a range of gamma on a random instance."""
    try:
        parse_gammas(gammas)
    except ConfigurationError as exc:
        _fail(EXIT_CONFIG, str(exc))
    cfg = {"experiment": "sweep", "seed": seed or 0, "n": n, "gammas": gammas}
    _execute(cfg, out, fmt or "csv")


@main.command("scenario-ppc")
@click.option("--case", type=click.Choice(["appendix-a", "separable-bks", "multi-midr"]),
              default="appendix-a", show_default=True)
@click.option("--samples", type=click.IntRange(10_000), default=200_000, show_default=True)
@click.option("--gamma", type=float, default=0.3, show_default=True)
@_common
def scenario_ppc(case, samples, gamma, seed, out, fmt):
    """Pay-per-click scenarios: naive VCG under estimation error and its repairs."""
    cfg = {"experiment": "scenario-ppc", "seed": seed or 0, "case": case, "samples": samples,
           "gamma": gamma}
    _execute(cfg, out, fmt or "json")


@main.command()
@click.option("--gammas", default="0.1:0.5:0.2", show_default=True)
@click.option("--samples", "instances", type=click.IntRange(1), default=100, show_default=True,
              help="Random instances per gamma.")
@_common
def verify(gammas, instances, seed, out, fmt):
    """Exact truthfulness residuals on random instances of both reductions."""
    cfg = {"experiment": "verify", "seed": seed or 0, "gammas": gammas, "instances": instances}
    _execute(cfg, out, fmt or "json")


if __name__ == "__main__":
    main()
