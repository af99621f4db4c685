"""
Heatmaps of the learned neural maps: channel mean, Gaussian smoothing that
shrinks with depth (5, 4, 3, 1 taps for levels 1-4), fixed colormap.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image
from scipy.ndimage import convolve1d
from scipy.signal.windows import gaussian

from .config import ViewId, VizConfig
from .errors import UsageError
from .model import CrossViewNet

logger = logging.getLogger(__name__)


def gaussian_kernel(size: int) -> np.ndarray:
    """Normalised 1-D kernel; sigma follows the usual size-derived rule."""
    if size <= 1:
        return np.ones(1)
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    kernel = gaussian(size, std=sigma)
    return kernel / kernel.sum()


def smooth(grid: np.ndarray, size: int) -> np.ndarray:
    if size <= 1:
        return grid
    kernel = gaussian_kernel(size)
    if size % 2 == 0:
        # average both half-pixel placements so the output stays centred
        kernel = np.convolve(kernel, [0.5, 0.5])
    out = convolve1d(grid, kernel, axis=0, mode="nearest")
    return convolve1d(out, kernel, axis=1, mode="nearest")


def map_heatmap(nmap: torch.Tensor, kernel_size: int, colormap: str = "viridis", scale: int = 8) -> Image.Image:
    """Channel mean of a ``(C, H, W)`` map rendered as an RGB image."""
    grid = nmap.detach().cpu().double().mean(dim=0).numpy()
    grid = smooth(grid, kernel_size)
    span = grid.max() - grid.min()
    unit = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
    rgb = colormaps[colormap](unit)[..., :3]
    img = Image.fromarray(np.round(rgb * 255).astype(np.uint8))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), resample=Image.NEAREST)
    return img


def export_heatmaps(
    model: CrossViewNet,
    out_dir: str | Path,
    levels: Optional[Sequence[int]] = None,
    views: Sequence[ViewId] = (ViewId.GROUND, ViewId.SATELLITE),
    viz: Optional[VizConfig] = None,
) -> List[Path]:
    viz = viz or VizConfig()
    levels = list(levels) if levels is not None else [1, 2, 3, 4]
    for level in levels:
        if not 1 <= level <= 4:
            raise UsageError(f"level must be in 1..4, got {level}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        maps: Dict[ViewId, List[torch.Tensor]] = {ViewId(v): model.view_maps(v) for v in views}
    written: List[Path] = []
    for view, view_maps in maps.items():
        for level in levels:
            path = out / f"level{level}_{view.value}.png"
            img = map_heatmap(view_maps[level - 1], viz.kernel_sizes[level - 1], viz.colormap, viz.scale)
            img.save(path, format="PNG")
            written.append(path)
    logger.info("heatmaps written dir=%s files=%d", out, len(written))
    return written
