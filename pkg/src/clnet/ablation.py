"""
Train and evaluate several ablation presets over several seeds, then write a
Markdown comparison report.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from statistics import mean
from typing import Dict, List, Sequence

import typer

from .config import PRESETS, RunConfig, get_preset
from .datasets import synthetic_splits
from .evaluation import MetricsReport
from .trainer import train

logger = logging.getLogger(__name__)


@dataclass
class AblationRun:
    preset: str
    seed: int
    metrics: MetricsReport
    final_loss: float


def run_ablation(
    run: RunConfig,
    presets: Sequence[str],
    seeds: Sequence[int],
    output_dir: str | Path,
) -> List[AblationRun]:
    """
    Every (preset, seed) trains from scratch on the same synthetic train split
    and is scored on the same eval split.
    """
    presets = [str(p).lstrip("#") for p in presets]
    for name in presets:
        get_preset(name)
    train_set, eval_set = synthetic_splits(run.data, run.encoder)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs: List[AblationRun] = []
    for name in presets:
        for seed in seeds:
            cfg = run.model_copy(update={"train": run.train.model_copy(update={"ablation_preset": name, "seed": seed})})
            typer.echo(f"Preset #{name}, seed {seed}")
            result = train(cfg, train_set, output_dir=out / f"preset{name}_seed{seed}", eval_dataset=eval_set)
            runs.append(AblationRun(name, seed, result.metrics, result.history[-1][1]))
            typer.echo(f"  R@1={result.metrics.recall_at_1:.4f} R@5={result.metrics.recall_at_5:.4f}")

    (out / "ablation.json").write_text(
        json.dumps(
            [{"preset": r.preset, "seed": r.seed, "final_loss": r.final_loss, **r.metrics.model_dump(mode="json")} for r in runs],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    (out / "ablation.md").write_text("\n".join(build_ablation_report(runs, run)), encoding="utf-8")
    logger.info("ablation done runs=%d means=%s", len(runs), mean_recall_by_preset(runs))
    return runs


def mean_recall_by_preset(runs: Sequence[AblationRun]) -> Dict[str, float]:
    grouped: Dict[str, List[float]] = {}
    for r in runs:
        grouped.setdefault(r.preset, []).append(r.metrics.recall_at_1)
    return {name: mean(values) for name, values in grouped.items()}


def build_ablation_report(runs: Sequence[AblationRun], run: RunConfig) -> List[str]:
    """Build the markdown ablation report."""
    lines: List[str] = []
    presets = list(dict.fromkeys(r.preset for r in runs))
    seeds = list(dict.fromkeys(r.seed for r in runs))

    lines.append("# Ablation Report")
    lines.append("")
    lines.append(f"- Train pairs: {run.data.num_train}, eval pairs: {run.data.num_eval}, mode: `{run.data.mode}`")
    lines.append(f"- Epochs: {run.train.epochs}, batch size: {run.train.batch_size}, seeds: {seeds}")
    lines.append("")

    lines.append("## Presets")
    lines.append("")
    lines.append("| Preset | GFR | Norm | Residual | NEC |")
    lines.append("|--------|-----|------|----------|-----|")
    mark = lambda flag: "x" if flag else ""
    for name in presets:
        p = PRESETS[name]
        lines.append(
            f"| #{name} | {mark(p.use_gfr)} | {mark(p.use_norm)} | {p.gfr_residual_source or '-'} | {mark(p.use_nec)} |"
        )
    lines.append("")

    lines.append("## Recall@1 per seed")
    lines.append("")
    lines.append("| Preset | " + " | ".join(f"seed {s}" for s in seeds) + " | mean |")
    lines.append("|--------|" + "|".join(["--------"] * (len(seeds) + 1)) + "|")
    means = mean_recall_by_preset(runs)
    for name in presets:
        cells = []
        for s in seeds:
            match = [r for r in runs if r.preset == name and r.seed == s]
            cells.append(f"{match[0].metrics.recall_at_1:.4f}" if match else "-")
        lines.append(f"| #{name} | " + " | ".join(cells) + f" | {means[name]:.4f} |")
    lines.append("")

    lines.append("## Ordering")
    lines.append("")
    ranked = sorted(presets, key=lambda n: means[n], reverse=True)
    lines.append("- Mean R@1 ordering: " + " > ".join(f"#{n} ({means[n]:.4f})" for n in ranked))
    lines.append("")
    lines.append("---")
    lines.append("")
    lines.append(f"*Config hash `{run.config_hash()[:12]}`; report generated by `clnet ablate`*")
    return lines
