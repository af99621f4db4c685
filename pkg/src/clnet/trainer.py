from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import typer
from torch.utils.data import DataLoader

from .checkpoint import CheckpointManifest, model_tensors, save_checkpoint
from .config import RunConfig, TrainConfig, ViewId
from .datasets import AugmentedPairs, PairDataset, collate_pairs
from .errors import NumericError, ValidationError
from .evaluation import MetricsReport, embed_corpus, evaluate
from .io import save_loss_history
from .model import CrossViewNet
from .objective import InfoNCELoss

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: CrossViewNet
    objective: InfoNCELoss
    # (step, loss, lr) for every optimisation step
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    manifest: Optional[CheckpointManifest] = None
    metrics: Optional[MetricsReport] = None
    elapsed: float = 0.0


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """
    Linear warmup 0 -> base_lr over ``warmup_steps``, then half-cosine to 0 at ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside schedule range 0..{total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return base_lr
    progress = (step - warmup_steps) / decay_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: CrossViewNet, objective: InfoNCELoss, cfg: TrainConfig) -> torch.optim.AdamW:
    params = list(model_tensors(model, objective).values())
    return torch.optim.AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def evaluate_model(model: CrossViewNet, dataset: PairDataset, run: RunConfig) -> MetricsReport:
    """Ground images as queries against every satellite reference of ``dataset``."""
    ids = dataset.pair_ids()
    batch = run.eval.batch_size
    queries = embed_corpus(model, [r.ground for r in dataset], ViewId.GROUND, ids, batch)
    ref_ids, ref_images = dataset.references()
    refs = embed_corpus(model, ref_images, ViewId.SATELLITE, ref_ids, batch)
    semi = dataset.semi_positives()
    return evaluate(
        queries,
        refs,
        truth={pid: pid for pid in ids},
        semi_positives=semi,
        with_hit_rate=run.eval.hit_rate or dataset.mode == "offset",
        with_average_precision=run.eval.average_precision,
        config_hash=run.config_hash(),
    )


def train(
    run: RunConfig,
    dataset: PairDataset,
    output_dir: Optional[str | Path] = None,
    eval_dataset: Optional[PairDataset] = None,
    show_progress: bool = False,
) -> TrainResult:
    """
    Initialise both branches, the ground maps and the converter, then optimise
    InfoNCE over in-batch pairs with AdamW and a warmup-cosine schedule.
    """
    cfg = run.train
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    if len(dataset) < cfg.batch_size:
        raise ValidationError(f"dataset has {len(dataset)} pairs, fewer than batch_size {cfg.batch_size}")
    if cfg.num_threads is not None:
        torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)

    model = CrossViewNet(run.encoder, cfg.preset, seed=cfg.seed)
    objective = InfoNCELoss(cfg.tau, cfg.direction, learnable=cfg.learnable_tau)
    optimizer = build_optimizer(model, objective, cfg)

    steps_per_epoch = len(dataset) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    warmup = cfg.resolve_warmup(total_steps)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda=lambda s: lr_schedule(min(s, total_steps), 1.0, warmup, total_steps)
    )

    pairs = AugmentedPairs(dataset, cfg.seed, enabled=cfg.augment)
    loader = DataLoader(
        pairs,
        batch_size=cfg.batch_size,
        shuffle=True,
        drop_last=True,
        num_workers=cfg.num_workers,
        collate_fn=collate_pairs,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    logger.info(
        "train start pairs=%d epochs=%d steps=%d warmup=%d preset=%s config_hash=%s",
        len(dataset), cfg.epochs, total_steps, warmup, cfg.ablation_preset, run.config_hash()[:12],
    )

    result = TrainResult(model=model, objective=objective)
    start_time = time.perf_counter()
    step = 0
    model.train()
    epochs = range(cfg.epochs)
    if show_progress:
        bar = typer.progressbar(epochs, label=f"Training (preset {cfg.ablation_preset})")
    else:
        bar = contextlib.nullcontext(epochs)
    with bar as progress:
        for epoch in progress:
            pairs.set_epoch(epoch)
            epoch_total = 0.0
            for _, ground, satellite in loader:
                lr = optimizer.param_groups[0]["lr"]
                emb_g, emb_s = model(ground, satellite)
                loss = objective(emb_g, emb_s)
                if not torch.isfinite(loss):
                    raise NumericError(f"training diverged: non-finite loss at step {step}")

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()

                result.history.append((step, float(loss.item()), lr))
                epoch_total += loss.item()
                step += 1
            mean_loss = epoch_total / steps_per_epoch
            result.epoch_losses.append(mean_loss)
            logger.info("epoch=%d mean_loss=%.6f lr=%.6g tau=%.4f", epoch + 1, mean_loss, lr, float(objective.tau))

    result.elapsed = time.perf_counter() - start_time
    model.eval()

    if eval_dataset is not None:
        result.metrics = evaluate_model(model, eval_dataset, run)

    if output_dir is not None:
        out = Path(output_dir)
        result.manifest = save_checkpoint(out, model_tensors(model, objective), run, step=step)
        save_loss_history(out / "loss_history.csv", result.history)
        if result.metrics is not None:
            result.metrics.write(out / "metrics.json")
    logger.info("train done steps=%d elapsed=%.1fs final_loss=%.6f", step, result.elapsed, result.history[-1][1])
    return result
