"""Command-line entry points for running sweeps and summarizing results."""

from __future__ import annotations

from pathlib import Path

import click

from . import experiment


@click.group()
def main():
    """Tall-posterior sampling experiments."""


def _apply_seed_override(cfg, seed):
    if seed is not None:
        cfg.seeds = [seed]
    return cfg


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Run a single seed instead of the configured list.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel grid points.")
@click.option("--overwrite", is_flag=True, help="Recompute grid points that already have records.")
def run(config_path, seed, jobs, overwrite):
    """Run the sweep described by a YAML config file."""
    cfg = _apply_seed_override(experiment.ExperimentConfig.from_yaml(config_path), seed)
    records = experiment.run_experiment(cfg, overwrite=overwrite, jobs=jobs)
    out = experiment.resolve_output_dir(cfg.output_dir)
    ok = sum(1 for r in records if r["status"] == "ok")
    click.echo(f"{len(records)} runs ({ok} ok) -> {out / 'records.csv'}")


@main.command()
@click.argument("records_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Destination CSV (default: speedup.csv next to the records).")
def speedup(records_path, out_path):
    """Summarize score-evaluation and wall-time ratios vs the Langevin baseline."""
    records = experiment.load_records(records_path)
    rows = experiment.report_speedup(records)
    dest = Path(out_path) if out_path else Path(records_path).parent / "speedup.csv"
    experiment.write_csv(rows, dest)
    click.echo(f"{len(rows)} rows -> {dest}")


@main.command()
@click.argument("records_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Destination directory (default: next to the records).")
def robustness(records_path, out_dir):
    """Write accuracy-vs-n curves (long format plus per-curve mean/std)."""
    records = experiment.load_records(records_path)
    points, curves = experiment.report_robustness(records)
    dest = Path(out_dir) if out_dir else Path(records_path).parent
    experiment.write_csv(points, dest / "robustness_points.csv")
    experiment.write_csv(curves, dest / "robustness_curves.csv")
    click.echo(f"{len(points)} points, {len(curves)} curves -> {dest}")


@main.command()
@click.option("--output-dir", default="table1", show_default=True)
@click.option("--seed", type=int, default=None, help="Run a single seed instead of 0..4.")
@click.option("--n-samples", type=int, default=10_000, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--overwrite", is_flag=True)
def table1(output_dir, seed, n_samples, jobs, overwrite):
    """Run the canned accuracy-vs-step-count sweep on the Gaussian task."""
    cfg = experiment.table1_config(output_dir, N_samples=n_samples)
    cfg = _apply_seed_override(cfg, seed)
    records = experiment.run_experiment(cfg, overwrite=overwrite, jobs=jobs)
    out = experiment.resolve_output_dir(cfg.output_dir)
    click.echo(f"{len(records)} runs -> {out / 'records.csv'}")


if __name__ == "__main__":
    main()
