"""
View neural maps, the ground-to-satellite map converter and feature recalibration.

Maps and features are channels-first: a map is ``(C, H, W)``, features are
``(C, H, W)`` or batched ``(B, C, H, W)``. Normalisation acts on the H*W
positions of every channel independently.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AblationPreset, ViewId
from .errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

MAP_INIT_BOUND = 0.01
ZERO_NORM_EPS = 1e-12

# separates the map RNG stream from other per-level streams
_GROUND_MAP_STREAM = 101
_SATELLITE_MAP_STREAM = 202


def init_neural_map(
    level: int,
    shape: Tuple[int, int, int],
    seed: int,
    view: ViewId = ViewId.GROUND,
    expected_shape: Optional[Tuple[int, int, int]] = None,
) -> nn.Parameter:
    """
    Uniform [-0.01, 0.01] map of ``shape`` (C, H, W), deterministic per (seed, level, view).
    """
    if not 1 <= level <= 4:
        raise ConfigurationError(f"neural map level must be in 1..4, got {level}")
    shape = tuple(int(s) for s in shape)
    if expected_shape is not None and shape != tuple(expected_shape):
        raise ConfigurationError(
            f"{ViewId(view).value} neural map level {level}: shape {shape} does not match "
            f"encoder stage output {tuple(expected_shape)}"
        )
    stream = _GROUND_MAP_STREAM if ViewId(view) is ViewId.GROUND else _SATELLITE_MAP_STREAM
    rng = np.random.default_rng([seed, stream, level])
    values = rng.uniform(-MAP_INIT_BOUND, MAP_INIT_BOUND, size=shape).astype(np.float32)
    return nn.Parameter(torch.from_numpy(values))


def normalize_map(nmap: torch.Tensor) -> torch.Tensor:
    """
    Per channel: divide the spatial slice by its l2 norm (skipped below 1e-12),
    then softmax over all spatial positions. Every channel sums to 1.
    """
    if not torch.isfinite(nmap).all():
        raise NumericError("normalize_map received non-finite values")
    flat = nmap.flatten(start_dim=-2)
    norm = flat.norm(dim=-1, keepdim=True)
    scale = torch.where(norm < ZERO_NORM_EPS, torch.ones_like(norm), norm)
    return torch.softmax(flat / scale, dim=-1).reshape(nmap.shape)


def spatial_softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x.flatten(start_dim=-2), dim=-1).reshape(x.shape)


def _check_same_grid(f: torch.Tensor, nmap: torch.Tensor, level: Optional[int], view: Optional[ViewId]) -> None:
    if tuple(f.shape[-3:]) != tuple(nmap.shape):
        where = f"level {level} " if level is not None else ""
        where += f"{ViewId(view).value} " if view is not None else ""
        raise ConfigurationError(
            f"GFR {where}shape mismatch: features {tuple(f.shape[-3:])} vs neural map {tuple(nmap.shape)}"
        )


def gfr(
    f: torch.Tensor,
    nmap: torch.Tensor,
    level: Optional[int] = None,
    view: Optional[ViewId] = None,
) -> torch.Tensor:
    """Global feature recalibration: ``f * normalize_map(nmap) + f``."""
    _check_same_grid(f, nmap, level, view)
    return f * normalize_map(nmap) + f


def recalibrate(
    f: torch.Tensor,
    nmap: torch.Tensor,
    preset: AblationPreset,
    level: Optional[int] = None,
    view: Optional[ViewId] = None,
) -> torch.Tensor:
    """
    GFR as wired by an ablation preset. The full preset is exactly :func:`gfr`.
    """
    if not preset.use_gfr:
        return f
    _check_same_grid(f, nmap, level, view)
    if preset.gfr_residual_source == "neural_map" and preset.use_norm:
        return gfr(f, nmap, level, view)
    if preset.gfr_residual_source == "feature_map":
        if preset.use_norm:
            weight = normalize_map(f)
        else:
            weight = spatial_softmax(f)
        return f * weight + f

    weight = normalize_map(nmap) if preset.use_norm else nmap
    if preset.gfr_residual_source is None:
        return f * weight
    return f * weight + f


class NecLevel(nn.Module):
    """
    Two affine layers mapping a flattened ground grid (Hg*Wg) to a satellite
    grid (Hs*Ws), shared across channels.
    """

    def __init__(
        self,
        ground_hw: Tuple[int, int],
        satellite_hw: Tuple[int, int],
        hidden: Optional[int] = None,
        activation: Optional[nn.Module] = None,
    ):
        super().__init__()
        self.ground_hw = tuple(ground_hw)
        self.satellite_hw = tuple(satellite_hw)
        n_in = self.ground_hw[0] * self.ground_hw[1]
        n_out = self.satellite_hw[0] * self.satellite_hw[1]
        hidden = hidden or max(n_in, n_out)
        self.fc0 = nn.Linear(n_in, hidden)
        self.act = activation if activation is not None else nn.GELU()
        self.fc1 = nn.Linear(hidden, n_out)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        with torch.no_grad():
            for fc in (self.fc0, self.fc1):
                bound = 1.0 / np.sqrt(fc.in_features)
                values = rng.uniform(-bound, bound, size=tuple(fc.weight.shape))
                fc.weight.copy_(torch.from_numpy(values))
                fc.bias.zero_()

    def forward(self, map_g: torch.Tensor) -> torch.Tensor:
        c, h, w = map_g.shape
        if (h, w) != self.ground_hw:
            raise ConfigurationError(f"NEC expects ground grid {self.ground_hw}, got {(h, w)}")
        x = map_g.reshape(c, h * w)
        x = self.fc1(self.act(self.fc0(x)))
        return x.reshape(c, *self.satellite_hw)


class NeuralBevConverter(nn.Module):
    """One :class:`NecLevel` per encoder level, addressed by level 1..4."""

    def __init__(self, ground_hws: Sequence[Tuple[int, int]], satellite_hws: Sequence[Tuple[int, int]]):
        super().__init__()
        self.levels = nn.ModuleList(NecLevel(g, s) for g, s in zip(ground_hws, satellite_hws))

    def reset_parameters(self, seed: int) -> None:
        for level, module in enumerate(self.levels, start=1):
            module.reset_parameters(np.random.default_rng([seed, 303, level]))

    def forward(self, map_g: torch.Tensor, level: int) -> torch.Tensor:
        return nec_forward(map_g, self, level)


def nec_forward(map_g: torch.Tensor, converter: NeuralBevConverter, level: int) -> torch.Tensor:
    """Satellite-view map for ``level`` from the ground-view map."""
    if not 1 <= level <= len(converter.levels):
        raise ConfigurationError(f"no NEC parameters for level {level}")
    return converter.levels[level - 1](map_g)
