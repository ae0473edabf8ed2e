"""Command-line entry points: generate, train, ablate, report, export-clusters.

Every command accepts ``--config FILE`` pointing at a plain ``key = value``
file whose entries fill in options the command line left untouched (command
line beats environment beats file beats built-in default).  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click

from .data import SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .errors import PamtError
from .metrics import fraction_curve, report
from .training import (Components, STRATEGIES, TrainConfig, cluster_stage,
                       run_pipeline)
from .visualize import export_cluster_panel

COMPONENT_GRID = (
    ("baseline", Components(rps=False, pvp=False, amt=False)),
    ("rps", Components(rps=True, pvp=False, amt=False)),
    ("rps_pvp", Components(rps=True, pvp=True, amt=False)),
    ("rps_amt", Components(rps=True, pvp=False, amt=True)),
    ("full", Components(rps=True, pvp=True, amt=True)),
)


def _parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.ClickException(
                f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _fill_from_file(ctx: click.Context, params: dict) -> dict:
    """Overlay config-file values onto params still at their defaults."""
    path = params.pop("config", None)
    if path is None:
        return params
    values = _parse_config_file(Path(path))
    by_name = {p.name: p for p in ctx.command.params}
    for name, param in by_name.items():
        source = ctx.get_parameter_source(name)
        if name in values and source == click.core.ParameterSource.DEFAULT:
            params[name] = param.type.convert(values[name], param, ctx)
    return params


def _handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except PamtError as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


config_option = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), default=None,
    help="Key-value file supplying defaults for any option not given explicitly.")


def hyper_options(f):
    """Training hyperparameters shared by train and ablate."""
    opts = [
        click.option("--epochs", type=click.IntRange(min=1), default=100,
                     show_default=True),
        click.option("--adam-lr", type=float, default=1e-4, show_default=True),
        click.option("--weight-decay", type=float, default=1e-4, show_default=True),
        click.option("--prompt-lr0", type=float, default=40.0, show_default=True,
                     help="Starting learning rate of the prompt cosine schedule."),
        click.option("--topk", type=click.IntRange(min=1), default=64,
                     show_default=True, help="Patches kept per bag by selection."),
        click.option("--clusters", type=click.IntRange(min=1), default=4,
                     show_default=True, help="Number of prompt prototypes."),
        click.option("--pad-size", type=click.IntRange(min=1), default=2,
                     show_default=True, help="Prompt border width in pixels."),
        click.option("--mil-head",
                     type=click.Choice(("gated_attention", "mean_pooling",
                                        "max_pooling")),
                     default="gated_attention", show_default=True),
        click.option("--attention-dim", type=click.IntRange(min=1), default=128,
                     show_default=True),
        click.option("--rps-epochs", type=click.IntRange(min=1), default=25,
                     show_default=True, help="Scorer pre-training epochs."),
        click.option("--rps-lr", type=float, default=1e-3, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _train_config(p: dict, seed: int, train_fraction: float = 1.0) -> TrainConfig:
    return TrainConfig(
        epochs=p["epochs"], adam_lr=p["adam_lr"],
        adam_weight_decay=p["weight_decay"], prompt_sgd_lr0=p["prompt_lr0"],
        top_k=p["topk"], n_clusters=p["clusters"], pad_size=p["pad_size"],
        seed=seed, train_fraction=train_fraction, mil_head=p["mil_head"],
        attention_dim=p["attention_dim"], rps_epochs=p["rps_epochs"],
        rps_lr=p["rps_lr"])


@click.group()
def cli():
    """Weakly supervised patch-bag training pipeline."""


@cli.command()
@click.option("--n-bags", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--patches-min", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--patches-max", type=click.IntRange(min=1), default=60, show_default=True)
@click.option("--patch-size", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--witness-rate", type=float, default=0.08, show_default=True)
@click.option("--signal-strength", type=float, default=0.5, show_default=True)
@click.option("--noise-std", type=float, default=0.06, show_default=True)
@click.option("--seed", type=int, default=0, envvar="PAMT_SEED", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@config_option
@click.pass_context
@_handle_errors
def generate(ctx, **params):
    """Write a synthetic bag dataset to --out."""
    p = _fill_from_file(ctx, params)
    config = SyntheticConfig(
        n_bags=p["n_bags"], patches_min=p["patches_min"],
        patches_max=p["patches_max"], patch_size=p["patch_size"],
        witness_rate=p["witness_rate"], signal_strength=p["signal_strength"],
        noise_std=p["noise_std"], seed=p["seed"])
    bags = generate_dataset(config)
    save_dataset(p["out"], bags, config)
    n_patches = sum(bag.n_patches for bag in bags)
    click.echo(f"wrote {len(bags)} bags ({n_patches} patches) to {p['out']}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True,
              help="Dataset directory written by generate.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Run directory [default: runs/<strategy>_s<seed>...].")
@click.option("--strategy", type=click.Choice(STRATEGIES), default="pamt",
              show_default=True)
@click.option("--seed", type=int, default=0, envvar="PAMT_SEED", show_default=True)
@click.option("--train-fraction", type=click.FloatRange(min=0.0, min_open=True, max=1.0),
              default=1.0, show_default=True,
              help="Stratified fraction of training bags actually used.")
@click.option("--rps/--no-rps", default=True,
              help="Score-based patch selection (off keeps every patch).")
@click.option("--pvp/--no-pvp", default=True, help="Per-cluster border prompts.")
@click.option("--amt/--no-amt", default=True, help="Gated bottleneck adapters.")
@hyper_options
@config_option
@click.pass_context
@_handle_errors
def train(ctx, **params):
    """Train one strategy on a dataset and write the run directory."""
    p = _fill_from_file(ctx, params)
    bags, _ = load_dataset(p["data"])
    config = _train_config(p, p["seed"], p["train_fraction"])
    components = Components(rps=p["rps"], pvp=p["pvp"], amt=p["amt"])
    out = p["out"]
    if out is None:
        parts = [p["strategy"], f"s{p['seed']}"]
        if p["train_fraction"] != 1.0:
            parts.append(f"f{p['train_fraction']}")
        parts.extend(f"no-{n}" for n, on in
                     (("rps", p["rps"]), ("pvp", p["pvp"]), ("amt", p["amt"]))
                     if not on)
        out = Path("runs") / "_".join(parts)
    result = run_pipeline(bags, config, p["strategy"], components, out_dir=out)
    test = result.test
    click.echo(f"wrote {out}: test auc={test.auc:.4f} f1={test.f1:.4f} "
               f"acc={test.acc:.4f} (best epoch {result.best_epoch})")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default="ablation",
              show_default=True)
@click.option("--grid", type=click.Choice(("strategies", "components")),
              default="strategies", show_default=True,
              help="strategies: all five tuning strategies; components: "
                   "selection/prompt/adapter toggle rows.")
@click.option("--seeds", type=int, multiple=True, default=(0, 1, 2),
              show_default=True)
@hyper_options
@config_option
@click.pass_context
@_handle_errors
def ablate(ctx, **params):
    """Run a strategy or component grid across seeds and tabulate it."""
    p = _fill_from_file(ctx, params)
    bags, _ = load_dataset(p["data"])
    if p["grid"] == "strategies":
        rows = [(strategy, strategy, Components()) for strategy in STRATEGIES]
    else:
        rows = [("pamt", name, components) for name, components in COMPONENT_GRID]
    out = Path(p["out"])
    payloads = []
    for seed in p["seeds"]:
        cache: dict = {}
        config = _train_config(p, seed)
        for strategy, name, components in rows:
            run_dir = out / f"{name}_s{seed}"
            result = run_pipeline(bags, config, strategy, components,
                                  out_dir=run_dir, stage_cache=cache)
            payloads.append(result.payload())
            click.echo(f"{name} seed={seed}: test auc={result.test.auc:.4f}")
    table_rows = report(payloads, out)
    click.echo(f"wrote {out / 'table.csv'} ({len(table_rows)} rows, "
               f"{len(payloads)} runs)")


@cli.command("report")
@click.option("--runs", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory tree containing run directories.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@config_option
@click.pass_context
@_handle_errors
def report_cmd(ctx, **params):
    """Aggregate metrics.json files under --runs into comparison tables."""
    p = _fill_from_file(ctx, params)
    paths = sorted(Path(p["runs"]).rglob("metrics.json"))
    if not paths:
        raise click.ClickException(f"no metrics.json found under {p['runs']}")
    payloads = [json.loads(path.read_text()) for path in paths]
    rows = report(payloads, p["out"])
    points = fraction_curve(payloads, Path(p["out"]) / "fraction_curve.csv")
    click.echo(f"wrote {Path(p['out']) / 'table.csv'} ({len(rows)} rows) and "
               f"fraction_curve.csv ({len(points)} fractions) from "
               f"{len(payloads)} runs")


@cli.command("export-clusters")
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default="clusters.png",
              show_default=True)
@click.option("--seed", type=int, default=0, envvar="PAMT_SEED", show_default=True)
@click.option("--topk", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--clusters", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--rps-epochs", type=click.IntRange(min=1), default=25, show_default=True)
@click.option("--rps-lr", type=float, default=1e-3, show_default=True)
@click.option("--attention-dim", type=click.IntRange(min=1), default=128,
              show_default=True)
@config_option
@click.pass_context
@_handle_errors
def export_clusters(ctx, **params):
    """Render each prototype's nearest selected patches as one PNG grid."""
    p = _fill_from_file(ctx, params)
    bags, _ = load_dataset(p["data"])
    config = TrainConfig(seed=p["seed"], top_k=p["topk"], n_clusters=p["clusters"],
                         rps_epochs=p["rps_epochs"], rps_lr=p["rps_lr"],
                         attention_dim=p["attention_dim"])
    _, sampled, centroids, assignment = cluster_stage(bags, config)
    ordered = [sampled[bag_id] for bag_id in sorted(sampled)]
    patches_by_bag = {bag.bag_id: bag.patches for bag in bags}
    path = export_cluster_panel(centroids, assignment, ordered, patches_by_bag,
                                p["out"])
    click.echo(f"wrote {path}")


def main():
    cli()


if __name__ == "__main__":
    main()
