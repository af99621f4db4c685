"""
Command line: synthetic data, training, embedding, evaluation, heatmaps and
ablation sweeps, all driven by one run config.
"""
from __future__ import annotations

from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import typer
from dotenv import load_dotenv

from .ablation import run_ablation
from .checkpoint import load_model
from .config import RunConfig, ViewId, get_preset, load_config
from .datasets import (
    PairDataset,
    SyntheticPairDataset,
    load_directory_dataset,
    manifest_semi_positives,
    synthetic_splits,
    write_dataset,
)
from .errors import ClnetError, UsageError, ValidationError
from .evaluation import EmbeddingMatrix, embed_corpus, evaluate
from .logging_utils import configure_logging
from .trainer import train as train_model
from .viz import export_heatmaps

app = typer.Typer(help="Cross-view correspondence learning on paired ground/satellite views.")


class PresetChoice(str, Enum):
    p1 = "1"
    p2 = "2"
    p3 = "3"
    p4 = "4"
    p5 = "5"
    p6 = "6"
    full = "full"


class ViewChoice(str, Enum):
    ground = "ground"
    satellite = "satellite"
    both = "both"


class SplitChoice(str, Enum):
    train = "train"
    eval = "eval"


@contextmanager
def cli_errors() -> Iterator[None]:
    """Turn library errors into one stderr line and the matching exit code."""
    try:
        yield
    except ClnetError as exc:
        typer.echo(exc.one_line(), err=True)
        raise typer.Exit(code=exc.exit_code)
    except OSError as exc:
        error = ValidationError(f"{exc.filename}: {exc.strerror or exc}" if exc.filename else str(exc))
        typer.echo(error.one_line(), err=True)
        raise typer.Exit(code=error.exit_code)


def _run_config(ctx: typer.Context, overrides: Optional[Dict[str, dict]] = None) -> RunConfig:
    return load_config(ctx.obj.get("config"), overrides=overrides)


def _parse_ints(text: str, what: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from exc


def _datasets(run: RunConfig) -> Tuple[PairDataset, Optional[PairDataset]]:
    data = run.data
    if data.root is None:
        return synthetic_splits(data, run.encoder)
    hw = dict(ground_hw=run.encoder.ground_input_hw, satellite_hw=run.encoder.satellite_input_hw)
    train_set = load_directory_dataset(data.root, data.manifest, split="train", **hw)
    eval_set = None
    if data.eval_root is not None:
        eval_set = load_directory_dataset(data.eval_root, data.manifest, split="eval", **hw)
    return train_set, eval_set


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        help="Run config (YAML or JSON). Defaults apply when omitted.",
        show_default=True,
    ),
    log_level: str = typer.Option("WARNING", "--log-level", help="Log level for the clnet logger.", show_default=True),
    log_json: bool = typer.Option(False, "--log-json", help="Emit log records as JSON lines.", show_default=True),
):
    load_dotenv()
    configure_logging(log_level, json_lines=log_json)
    ctx.obj = {"config": config}


@app.command()
def synth(
    ctx: typer.Context,
    out: Path = typer.Option(Path("data/synthetic"), "--out", "-o", help="Output dataset directory.", show_default=True),
    n: Optional[int] = typer.Option(
        None, "--n", min=1, help="Number of pairs (default: data.num_train or data.num_eval).", show_default=True
    ),
    split: SplitChoice = typer.Option(SplitChoice.train, "--split", help="Scene index range to render.", show_default=True),
    seed: Optional[int] = typer.Option(None, "--seed", help="Dataset seed (overrides data.seed).", show_default=True),
    vigor: bool = typer.Option(False, "--vigor", help="Offset mode: 1 positive + 3 semi-positive crops.", show_default=True),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory.", show_default=True),
):
    """
    Render synthetic ground/satellite pairs to PNGs plus manifest.csv.
    """
    with cli_errors():
        run = _run_config(ctx, {"data": {"seed": seed, "mode": "offset" if vigor else None}})
        data = run.data
        start = 0 if split is SplitChoice.train else data.num_train
        count = n if n is not None else (data.num_train if split is SplitChoice.train else data.num_eval)
        dataset = SyntheticPairDataset(
            data.seed, start, count, run.encoder,
            mode=data.mode, split=split.value, noise=data.noise, extent=data.extent, cache=False,
        )
        manifest = write_dataset(dataset, out, force=force)
        typer.echo(f"Wrote {count} pairs ({data.mode}) -> {manifest}")


@app.command()
def train(
    ctx: typer.Context,
    out: Path = typer.Option(Path("runs/clnet"), "--out", "-o", help="Checkpoint directory.", show_default=True),
    preset: Optional[PresetChoice] = typer.Option(
        None, "--preset", help="Ablation preset (5 = full model).", show_default=True
    ),
    epochs: Optional[int] = typer.Option(None, "--epochs", min=1, help="Override train.epochs.", show_default=True),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", min=2, help="Override train.batch_size.", show_default=True),
    lr: Optional[float] = typer.Option(None, "--lr", help="Override train.base_lr.", show_default=True),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override train.seed (wins over CLNET_SEED).", show_default=True),
    learnable_tau: Optional[bool] = typer.Option(
        None, "--learnable-tau/--fixed-tau", help="Learn the InfoNCE temperature.", show_default=True
    ),
    augment: Optional[bool] = typer.Option(
        None, "--augment/--no-augment", help="Synchronized rotation/flip augmentation.", show_default=True
    ),
    eval_after: Optional[bool] = typer.Option(
        None, "--eval/--no-eval", help="Evaluate on the eval split after training.", show_default=True
    ),
):
    """
    Train both branches with InfoNCE and write a checkpoint + loss_history.csv.
    """
    with cli_errors():
        run = _run_config(
            ctx,
            {
                "train": {
                    "ablation_preset": preset.value if preset is not None else None,
                    "epochs": epochs,
                    "batch_size": batch_size,
                    "base_lr": lr,
                    "seed": seed,
                    "learnable_tau": learnable_tau,
                    "augment": augment,
                    "eval_after": eval_after,
                }
            },
        )
        train_set, eval_set = _datasets(run)
        typer.echo(f"Training preset #{run.train.ablation_preset} on {len(train_set)} pairs, config {run.config_hash()[:12]}")
        result = train_model(
            run,
            train_set,
            output_dir=out,
            eval_dataset=eval_set if run.train.eval_after else None,
            show_progress=True,
        )
        steps, final_loss = len(result.history), result.history[-1][1]
        typer.echo(f"Trained {steps} steps in {result.elapsed:.1f}s, final loss {final_loss:.4f} -> {out}")
        if result.metrics is not None:
            typer.echo(
                f"R@1={result.metrics.recall_at_1:.4f} R@5={result.metrics.recall_at_5:.4f} "
                f"R@10={result.metrics.recall_at_10:.4f} R@1%={result.metrics.recall_at_1pct:.4f}"
            )


@app.command()
def embed(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory.", show_default=True),
    out: Path = typer.Option(..., "--out", "-o", help="Embedding file to write.", show_default=True),
    view: ViewChoice = typer.Option(
        ViewChoice.ground, "--view", help="ground embeds queries, satellite embeds references.", show_default=True
    ),
    data: Optional[Path] = typer.Option(
        None, "--data", help="Dataset directory with manifest.csv (default: synthetic split).", show_default=True
    ),
    split: SplitChoice = typer.Option(SplitChoice.eval, "--split", help="Synthetic split when --data is omitted.", show_default=True),
):
    """
    Embed every ground image (queries) or every satellite image (references).
    """
    with cli_errors():
        if view is ViewChoice.both:
            raise UsageError("embed needs --view ground or --view satellite")
        model, state = load_model(checkpoint)
        run = state.config
        if data is not None:
            dataset: PairDataset = load_directory_dataset(
                data, ground_hw=run.encoder.ground_input_hw, satellite_hw=run.encoder.satellite_input_hw
            )
        else:
            train_set, eval_set = synthetic_splits(run.data, run.encoder)
            dataset = train_set if split is SplitChoice.train else eval_set

        if view is ViewChoice.ground:
            ids, images = dataset.pair_ids(), [r.ground for r in dataset]
        else:
            ids, images = dataset.references()
        matrix = embed_corpus(model, images, ViewId(view.value), ids, batch_size=run.eval.batch_size)
        matrix.save(out)
        typer.echo(f"Embedded {len(ids)} {view.value} images (dim {matrix.dim}) -> {out}")


@app.command("eval")
def eval_cmd(
    ctx: typer.Context,
    queries: Path = typer.Option(..., "--queries", help="Query (ground) embedding file.", show_default=True),
    refs: Path = typer.Option(..., "--refs", help="Reference (satellite) embedding file.", show_default=True),
    manifest: Optional[Path] = typer.Option(
        None, "--manifest", help="Dataset manifest.csv carrying semi-positive ids.", show_default=True
    ),
    with_hit_rate: bool = typer.Option(False, "--hit-rate", help="Report hit rate (needs semi-positives).", show_default=True),
    out: Path = typer.Option(Path("reports/metrics.json"), "--out", "-o", help="Metrics report path.", show_default=True),
):
    """
    Rank references for every query; the true match of query q is reference q.
    """
    with cli_errors():
        run = _run_config(ctx)
        q = EmbeddingMatrix.load(queries)
        r = EmbeddingMatrix.load(refs)
        semi = manifest_semi_positives(manifest) if manifest is not None else None
        report = evaluate(
            q,
            r,
            truth={qid: qid for qid in q.ids},
            semi_positives=semi,
            with_hit_rate=with_hit_rate or run.eval.hit_rate,
            with_average_precision=run.eval.average_precision,
            config_hash=run.config_hash(),
        )
        report.write(out)
        line = (
            f"R@1={report.recall_at_1:.4f} R@5={report.recall_at_5:.4f} "
            f"R@10={report.recall_at_10:.4f} R@1%={report.recall_at_1pct:.4f}"
        )
        if report.hit_rate is not None:
            line += f" HR={report.hit_rate:.4f}"
        if report.average_precision is not None:
            line += f" AP={report.average_precision:.4f}"
        typer.echo(line)
        typer.echo(f"Metrics -> {out}")


@app.command()
def viz(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory.", show_default=True),
    level: Optional[int] = typer.Option(None, "--level", help="Pyramid level 1-4 (default: all).", show_default=True),
    view: ViewChoice = typer.Option(ViewChoice.both, "--view", help="Which view's maps to render.", show_default=True),
    out: Path = typer.Option(Path("reports/heatmaps"), "--out", "-o", help="Output directory for PNGs.", show_default=True),
):
    """
    Render neural-map heatmaps (channel mean, depth-dependent Gaussian blur).
    """
    with cli_errors():
        if level is not None and not 1 <= level <= 4:
            raise UsageError(f"level must be in 1..4, got {level}")
        model, state = load_model(checkpoint)
        views = (ViewId.GROUND, ViewId.SATELLITE) if view is ViewChoice.both else (ViewId(view.value),)
        written = export_heatmaps(
            model, out, levels=[level] if level is not None else None, views=views, viz=state.config.viz
        )
        for path in written:
            typer.echo(f"  {path}")
        typer.echo(f"Wrote {len(written)} heatmaps -> {out}")


@app.command()
def ablate(
    ctx: typer.Context,
    presets: str = typer.Option("1,2,3,4,5,6", "--presets", help="Comma-separated presets to compare.", show_default=True),
    seeds: str = typer.Option("0,1,2", "--seeds", help="Comma-separated training seeds.", show_default=True),
    out: Path = typer.Option(Path("runs/ablation"), "--out", "-o", help="Output directory.", show_default=True),
):
    """
    Train and evaluate each preset for each seed; write ablation.md and ablation.json.
    """
    with cli_errors():
        names = [p.strip().lstrip("#") for p in presets.split(",") if p.strip()]
        if not names:
            raise UsageError("--presets is empty")
        for name in names:
            try:
                get_preset(name)
            except ClnetError as exc:
                raise UsageError(str(exc)) from exc
        seed_list = _parse_ints(seeds, "--seeds")
        if not seed_list:
            raise UsageError("--seeds is empty")
        run = _run_config(ctx)
        run_ablation(run, names, seed_list, out)
        typer.echo(f"Ablation report -> {out / 'ablation.md'}")


if __name__ == "__main__":
    app()
