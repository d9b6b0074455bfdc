# jointdiff/cli.py
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from jointdiff.config import RunConfig, echo_run_config, load_run_config
from jointdiff.errors import ConfigError, JointDiffError

logger = logging.getLogger(__name__)

console = Console()

DATASET_FILE = "dataset.jdds"
CHECKPOINT_FILE = "checkpoint.jdif"
LOSS_LOG = "loss_log.tsv"

AGE_KNOWN = {"image+sex": ("image", "sex"), "image": ("image",), "sex": ("sex",), "none": ()}
SEX_KNOWN = {"image+age": ("image", "age"), "image": ("image",), "age": ("age",), "none": ()}


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _out_dir(path: str, config: RunConfig) -> Path:
    out = Path(path)
    os.makedirs(out, exist_ok=True)
    echo_run_config(config, out)
    return out


def _load_model(checkpoint_path: str):
    from jointdiff.model.checkpoint import Checkpoint
    from jointdiff.model.joint import JointModel
    return JointModel.from_checkpoint(Checkpoint.load(checkpoint_path))


def _split_records(data_path: str, split_name: str, limit: Optional[int]):
    from jointdiff.data.synthdata import Dataset
    dataset = Dataset.load(data_path)
    records = dataset.subset(split_name)
    ids = dataset.subject_ids[dataset.splits == ["train", "val", "test"].index(split_name)]
    if not records:
        raise ValueError(f"Split {split_name!r} of {data_path} is empty")
    if limit is not None:
        records, ids = records[:limit], ids[:limit]
    return dataset, records, ids


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML config file (defaults to the user config if present)")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config value, e.g. --set train.epochs=5")
@click.option("--verbose/--quiet", default=False, help="Show debug logging")
@click.pass_context
def cli(ctx, config_path, overrides, verbose):
    """jointdiff - joint diffusion over images, ages and sex categories."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_run_config(config_path, overrides)


@cli.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--n-subjects", type=int, default=None, help="Number of subjects (defaults to data.n_subjects)")
@click.pass_context
def gen_data_command(ctx, out_dir, n_subjects):
    """Generate and split a synthetic phantom dataset."""
    from jointdiff.data.synthdata import generate_dataset, split

    config: RunConfig = ctx.obj["config"]
    n = n_subjects or config.data.n_subjects
    out = _out_dir(out_dir, config)

    with console.status("[bold blue]Rendering phantoms...[/]", spinner="dots"):
        dataset = generate_dataset(n, config.data.generator, seed=config.seed)
        dataset = split(dataset, config.data.fractions, seed=config.seed)
    path = dataset.save(out / DATASET_FILE)

    counts = dataset.split_counts()
    console.print(Panel.fit(
        f"[cyan]Subjects:[/] {n}  [cyan]train/val/test:[/] {counts['train']}/{counts['val']}/{counts['test']}\n"
        f"[cyan]File:[/] [bold]{path}[/]",
        title="[bold green]✅ Dataset written[/]",
        border_style="green",
    ))


@cli.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def train_command(ctx, data_path, out_dir):
    """Train the denoiser and keep the best validation epoch."""
    from jointdiff.data.synthdata import Dataset
    from jointdiff.diffusion.schedule import build_schedules
    from jointdiff.model.trainer import train
    from jointdiff.tools.export import write_tsv

    config: RunConfig = ctx.obj["config"]
    out = _out_dir(out_dir, config)
    dataset = Dataset.load(data_path)
    if dataset.config.side != config.denoiser.side:
        raise ConfigError(
            f"Dataset images are {dataset.config.side}x{dataset.config.side} but denoiser.side is {config.denoiser.side}"
        )
    if dataset.config.n_categories != config.denoiser.n_categories:
        raise ConfigError(
            f"Dataset has {dataset.config.n_categories} sex categories but denoiser.n_categories is "
            f"{config.denoiser.n_categories}"
        )

    checkpoint = train(
        dataset.subset("train"),
        dataset.subset("val"),
        config.train,
        config.denoiser,
        build_schedules(config.schedule),
        seed=config.seed,
        age_range=dataset.config.age_range,
    )
    checkpoint.save(out / CHECKPOINT_FILE)
    write_tsv([r.as_dict() for r in checkpoint.history], out / LOSS_LOG,
              columns=["epoch", "train_loss", "val_loss", "image_term", "age_term", "sex_term"])

    console.print(Panel.fit(
        f"[cyan]Best epoch:[/] {checkpoint.epoch}  [cyan]val loss:[/] {checkpoint.val_loss:.5f} "
        f"(initial {checkpoint.initial_val_loss:.5f})\n[cyan]Checkpoint:[/] [bold]{out / CHECKPOINT_FILE}[/]",
        title="[bold green]✅ Training finished[/]",
        border_style="green",
    ))


@cli.command("sample")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("-n", "n_samples", type=int, default=4, show_default=True, help="Number of records to draw")
@click.option("--age", type=float, default=None, help="Fix the age (years) of every sample")
@click.option("--sex", type=int, default=None, help="Fix the sex category of every sample")
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset whose training split the sample marginals are compared against")
@click.option("--png/--no-png", default=False, help="Also write PNG files (needs matplotlib)")
@click.pass_context
def sample_command(ctx, checkpoint_path, out_dir, n_samples, age, sex, png, reference_path):
    """Draw records, unconditionally or with age and/or sex fixed."""
    from jointdiff.model.sampler import ConditioningMask, plan_from_config, sample_batched
    from jointdiff.tools.export import export_image, write_tsv
    from jointdiff.tools.metrics import records_table

    config: RunConfig = ctx.obj["config"]
    if n_samples < 1:
        raise ValueError(f"-n must be at least 1, got {n_samples}")
    out = _out_dir(out_dir, config)
    model = _load_model(checkpoint_path)
    mask = ConditioningMask.build(
        n_samples, model.side, model.age_range, model.n_categories,
        ages=None if age is None else np.full(n_samples, age),
        sexes=None if sex is None else np.full(n_samples, sex),
    )
    plan = plan_from_config(model.schedules.gaussian.T, config.sampler)

    with console.status(f"[bold blue]Sampling {n_samples} records...[/]", spinner="dots"):
        records = sample_batched(model, mask, plan, np.random.default_rng(config.seed), config.sampler)

    rows = []
    for i, record in enumerate(records):
        name = f"sample_{i:03d}.pgm"
        export_image(record.image, out / name, png=png)
        rows.append({"index": i, "age": record.age, "sex": record.sex, "image": name})
    write_tsv(rows, out / "samples.tsv")
    console.print(records_table([r["age"] for r in rows], [r["sex"] for r in rows],
                                [r["image"] for r in rows], title="Sampled records"))

    if reference_path is not None:
        from jointdiff.data.synthdata import Dataset
        from jointdiff.tools.metrics import marginal_report, marginals_table

        dataset = Dataset.load(reference_path)
        reference = dataset.subset("train") or dataset.records
        ref_report = marginal_report([r.image for r in reference], [r.age for r in reference],
                                     [r.sex for r in reference], dataset.config)
        report = marginal_report([r.image for r in records], [r.age for r in records],
                                 [r.sex for r in records], dataset.config)
        write_tsv([{"set": "samples", **report.as_dict()}, {"set": "reference", **ref_report.as_dict()}],
                  out / "marginals.tsv")
        console.print(marginals_table(report, ref_report, title="Sample marginals vs. reference"))


@cli.command("infer-age")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--known", type=click.Choice(list(AGE_KNOWN)), default="image", show_default=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--limit", type=int, default=None, help="Use at most this many subjects")
@click.pass_context
def infer_age_command(ctx, checkpoint_path, data_path, out_dir, known, split_name, limit):
    """Zero-shot age regression by conditional sampling."""
    from jointdiff.model.sampler import estimate_age, plan_from_config
    from jointdiff.tools.export import write_tsv
    from jointdiff.tools.metrics import eval_metrics, metrics_table

    config: RunConfig = ctx.obj["config"]
    out = _out_dir(out_dir, config)
    model = _load_model(checkpoint_path)
    _, records, ids = _split_records(data_path, split_name, limit)
    parts = AGE_KNOWN[known]

    with console.status(f"[bold blue]Estimating age for {len(records)} subjects (known: {known})...[/]",
                        spinner="dots"):
        result = estimate_age(
            model,
            images=np.stack([r.image for r in records]) if "image" in parts else None,
            sexes=np.array([r.sex for r in records]) if "sex" in parts else None,
            plan=plan_from_config(model.schedules.gaussian.T, config.sampler),
            rng=np.random.default_rng(config.seed),
            config=config.sampler,
            n_subjects=len(records),
        )

    targets = np.array([r.age for r in records])
    rows = [
        {"subject": int(ids[i]), "known": known, "target": targets[i], "prediction": result.estimate[i],
         "samples": list(result.samples[i]), "variance": result.variance[i]}
        for i in range(len(records))
    ]
    write_tsv(rows, out / f"predictions_age_{known}.tsv")
    report = eval_metrics(result.estimate, targets, "regression", samples=result.samples)
    console.print(metrics_table({known: report}, title="Age regression"))


@cli.command("infer-sex")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--known", type=click.Choice(list(SEX_KNOWN)), default="image", show_default=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--limit", type=int, default=None, help="Use at most this many subjects")
@click.pass_context
def infer_sex_command(ctx, checkpoint_path, data_path, out_dir, known, split_name, limit):
    """Zero-shot sex classification by majority vote over conditional samples."""
    from jointdiff.model.sampler import plan_from_config, predict_sex
    from jointdiff.tools.export import write_tsv
    from jointdiff.tools.metrics import eval_metrics, metrics_table

    config: RunConfig = ctx.obj["config"]
    out = _out_dir(out_dir, config)
    model = _load_model(checkpoint_path)
    _, records, ids = _split_records(data_path, split_name, limit)
    parts = SEX_KNOWN[known]

    with console.status(f"[bold blue]Predicting sex for {len(records)} subjects (known: {known})...[/]",
                        spinner="dots"):
        result = predict_sex(
            model,
            images=np.stack([r.image for r in records]) if "image" in parts else None,
            ages=np.array([r.age for r in records]) if "age" in parts else None,
            plan=plan_from_config(model.schedules.gaussian.T, config.sampler),
            rng=np.random.default_rng(config.seed),
            config=config.sampler,
            n_subjects=len(records),
        )

    targets = np.array([r.sex for r in records])
    rows = [
        {"subject": int(ids[i]), "known": known, "target": int(targets[i]), "prediction": int(result.category[i]),
         "samples": list(result.samples[i]), "votes": list(result.votes[i])}
        for i in range(len(records))
    ]
    write_tsv(rows, out / f"predictions_sex_{known}.tsv")
    report = eval_metrics(result.category, targets, "classification")
    console.print(metrics_table({known: report}, title="Sex classification"))


@cli.command("inpaint")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--limit", type=int, default=4, show_default=True, help="Number of images to complete")
@click.option("--png/--no-png", default=False, help="Also write PNG files (needs matplotlib)")
@click.pass_context
def inpaint_command(ctx, checkpoint_path, data_path, out_dir, split_name, limit, png):
    """Keep the left half of each image and regenerate the right half."""
    from jointdiff.model.sampler import inpaint, left_half_mask, plan_from_config
    from jointdiff.tools.export import export_image, write_tsv

    config: RunConfig = ctx.obj["config"]
    out = _out_dir(out_dir, config)
    model = _load_model(checkpoint_path)
    _, records, ids = _split_records(data_path, split_name, limit)
    images = np.stack([r.image for r in records])
    mask = left_half_mask(model.side)

    with console.status(f"[bold blue]Inpainting {len(records)} images...[/]", spinner="dots"):
        completed = inpaint(model, images, mask, plan=plan_from_config(model.schedules.gaussian.T, config.sampler),
                            rng=np.random.default_rng(config.seed), config=config.sampler)

    rows = []
    for i, (record, result) in enumerate(zip(records, completed)):
        known_name, out_name = f"inpaint_{i:03d}_known.pgm", f"inpaint_{i:03d}.pgm"
        export_image(np.where(mask == 1.0, record.image, -1.0), out / known_name, png=png)
        export_image(result.image, out / out_name, png=png)
        rows.append({"subject": int(ids[i]), "known": known_name, "completed": out_name,
                     "age": result.age, "sex": result.sex})
    write_tsv(rows, out / "inpaint.tsv")
    console.print(f"[bold green]✅ Completed {len(rows)} images in[/] [bold]{out}[/]")


def _prediction_files(paths: Sequence[str]) -> List[Path]:
    files: List[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("predictions_*.tsv")) if p.is_dir() else [p])
    if not files:
        raise ValueError(f"No prediction files found in {', '.join(paths)}")
    return files


@cli.command("eval")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--table/--no-table", default=False, help="Render every prediction file as one table")
@click.option("--oracle", "oracle_data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset whose test split gives the oracle noise floor")
def eval_command(paths, table, oracle_data):
    """Report metrics from saved prediction files."""
    from jointdiff.tools.export import read_tsv
    from jointdiff.tools.metrics import eval_metrics, metrics_table

    reports = {}
    for path in _prediction_files(paths):
        rows = read_tsv(path)
        if not rows:
            raise ValueError(f"{path} holds no predictions")
        known = rows[0]["known"]
        if path.name.startswith("predictions_age"):
            samples = [[float(v) for v in r["samples"].split(",")] for r in rows]
            report = eval_metrics([float(r["prediction"]) for r in rows], [float(r["target"]) for r in rows],
                                  "regression", samples=samples)
            label = f"age | {known}"
        else:
            report = eval_metrics([int(r["prediction"]) for r in rows], [int(r["target"]) for r in rows],
                                  "classification")
            label = f"sex | {known}"
        reports[label] = report
        if not table:
            console.print(f"[cyan]{label}[/] ({path.name}, n={report.n}): [bold]{report.summary()}[/]")

    if oracle_data is not None:
        reports.update(_oracle_reports(oracle_data))
        if not table:
            for label in ("age | oracle", "sex | oracle"):
                console.print(f"[cyan]{label}[/]: [bold]{reports[label].summary()}[/]")

    if table:
        console.print(metrics_table(reports, title="Zero-shot inference"))


def _oracle_reports(data_path: str):
    from jointdiff.data.synthdata import Dataset, oracle_age, oracle_sex
    from jointdiff.tools.metrics import eval_metrics

    dataset = Dataset.load(data_path)
    records = dataset.subset("test") or dataset.records
    cfg = dataset.config
    return {
        "age | oracle": eval_metrics([oracle_age(r.image, cfg) for r in records], [r.age for r in records],
                                     "regression"),
        "sex | oracle": eval_metrics([oracle_sex(r.image, cfg) for r in records], [r.sex for r in records],
                                     "classification"),
    }


@cli.command("check")
@click.option("--only", multiple=True, help="Run only these checks (and their prerequisites)")
@click.pass_context
def check_command(ctx, only):
    """Run the numerical self-check suite."""
    from jointdiff.checks.runner import run_checks

    results = run_checks(list(only) or None, console=console)
    summary = Table(title="Self-check summary", show_header=True)
    summary.add_column("Check", style="cyan")
    summary.add_column("Status")
    for r in results:
        colour = {"passed": "green", "failed": "red", "skipped": "yellow"}[r.status]
        summary.add_row(r.title, f"[{colour}]{r.status}[/]")
    console.print(summary)

    if not all(r.passed for r in results):
        ctx.exit(2)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Invoke the CLI and map failures to one stderr line and an exit status."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="jointdiff", standalone_mode=False)
    except click.ClickException as e:
        click.echo(f"error: {type(e).__name__}: {_one_line(e.format_message())}", err=True)
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("error: Abort: interrupted", err=True)
        return 1
    except (JointDiffError, ValidationError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        click.echo(f"error: {type(e).__name__}: {_one_line(str(e))}", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


def _one_line(message: str) -> str:
    return " ".join(message.split())


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
