"""
Two-branch, four-stage convolutional encoder with recalibration after every stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import AblationPreset, EncoderConfig, PRESETS, ViewId
from .correspondence import NeuralBevConverter, init_neural_map, nec_forward, recalibrate
from .errors import ConfigurationError, DegenerateEmbeddingError, NumericError

logger = logging.getLogger(__name__)

EMBEDDING_EPS = 1e-12


def _num_groups(channels: int, preferred: int = 8) -> int:
    for g in (preferred, 6, 4, 3, 2, 1):
        if channels % g == 0:
            return g
    return 1


class EncoderStage(nn.Module):
    """Strided convolution, GroupNorm, GELU; kernel 2s-1 keeps H/s exactly."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=2 * stride - 1, stride=stride, padding=stride - 1)
        self.norm = nn.GroupNorm(_num_groups(out_channels), out_channels)
        self.act = nn.GELU()

    def reset_parameters(self, rng: np.random.Generator) -> None:
        fan_in = self.conv.in_channels * self.conv.kernel_size[0] * self.conv.kernel_size[1]
        bound = 1.0 / np.sqrt(fan_in)
        with torch.no_grad():
            values = rng.uniform(-bound, bound, size=tuple(self.conv.weight.shape))
            self.conv.weight.copy_(torch.from_numpy(values))
            self.conv.bias.zero_()
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # a zero conv output stays exactly zero through the norm
        return self.act(self.norm(self.conv(x)))


class ViewEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        in_channels = [3] + list(cfg.stage_channels[:-1])
        self.stages = nn.ModuleList(
            EncoderStage(c_in, c_out, s) for c_in, c_out, s in zip(in_channels, cfg.stage_channels, cfg.stage_strides)
        )

    def reset_parameters(self, seed: int, stream: int) -> None:
        for stage, module in enumerate(self.stages, start=1):
            module.reset_parameters(np.random.default_rng([seed, stream, stage]))


@dataclass
class FeaturePyramid:
    """Refined feature grids for levels 1..4, each ``(B, C, H, W)``."""

    view: ViewId
    grids: List[torch.Tensor]

    def level(self, i: int) -> torch.Tensor:
        return self.grids[i - 1]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(g.shape[-3:]) for g in self.grids]


def pool_and_normalize(grid: torch.Tensor) -> torch.Tensor:
    """
    Global average pool over H, W then l2-normalise.
    Accepts ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    pooled = grid.mean(dim=(-2, -1))
    norm = pooled.norm(dim=-1, keepdim=True)
    if (norm < EMBEDDING_EPS).any():
        raise DegenerateEmbeddingError(f"pooled feature norm below {EMBEDDING_EPS:g}; cannot normalise embedding")
    return pooled / norm


class CrossViewNet(nn.Module):
    """
    Ground and satellite encoders, per-level ground neural maps and the
    converter that produces the satellite maps from them.
    """

    def __init__(self, cfg: EncoderConfig, preset: Optional[AblationPreset] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.preset = preset or PRESETS["full"]

        self.ground_encoder = ViewEncoder(cfg)
        self.satellite_encoder = self.ground_encoder if cfg.weight_sharing == "shared" else ViewEncoder(cfg)

        levels = range(1, 5)
        self.ground_maps = nn.ParameterList(
            init_neural_map(i, cfg.stage_shape(ViewId.GROUND, i), seed, ViewId.GROUND) for i in levels
        )
        if self.preset.use_nec:
            self.nec = NeuralBevConverter(
                [cfg.stage_hw(ViewId.GROUND, i) for i in levels],
                [cfg.stage_hw(ViewId.SATELLITE, i) for i in levels],
            )
            self.satellite_maps = None
        else:
            # two independent sets of maps, no converter
            self.nec = None
            self.satellite_maps = nn.ParameterList(
                init_neural_map(i, cfg.stage_shape(ViewId.SATELLITE, i), seed, ViewId.SATELLITE) for i in levels
            )
        self.reset_parameters(seed)
        logger.debug(
            "model built preset=%s sharing=%s params=%d",
            self.preset.model_dump(), cfg.weight_sharing, sum(p.numel() for p in self.parameters()),
        )

    def reset_parameters(self, seed: int) -> None:
        self.ground_encoder.reset_parameters(seed, stream=1)
        if self.satellite_encoder is not self.ground_encoder:
            self.satellite_encoder.reset_parameters(seed, stream=2)
        if self.nec is not None:
            self.nec.reset_parameters(seed)

    def encoder(self, view: ViewId) -> ViewEncoder:
        return self.ground_encoder if ViewId(view) is ViewId.GROUND else self.satellite_encoder

    def view_maps(self, view: ViewId) -> List[torch.Tensor]:
        """Neural maps for levels 1..4 of ``view``; satellite maps go through the converter."""
        if ViewId(view) is ViewId.GROUND:
            return list(self.ground_maps)
        if self.nec is None:
            return list(self.satellite_maps)
        return [nec_forward(m, self.nec, level) for level, m in enumerate(self.ground_maps, start=1)]

    def encode_stage(self, x: torch.Tensor, stage: int, view: ViewId) -> torch.Tensor:
        view = ViewId(view)
        if stage == 1:
            expected = (3, *self.cfg.input_hw(view))
        else:
            expected = self.cfg.stage_shape(view, stage - 1)
        if tuple(x.shape[-3:]) != tuple(expected):
            raise ConfigurationError(
                f"stage {stage} ({view.value}) expects input {tuple(expected)}, got {tuple(x.shape[-3:])}"
            )
        out = self.encoder(view).stages[stage - 1](x)
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite activations after stage {stage} ({view.value})")
        return out

    def forward_view(
        self,
        image: torch.Tensor,
        view: ViewId,
        maps: Optional[Sequence[torch.Tensor]] = None,
    ) -> Tuple[FeaturePyramid, torch.Tensor]:
        """
        Encode, recalibrating after every stage; the refined grid feeds the next stage.
        """
        view = ViewId(view)
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        maps = list(maps) if maps is not None else self.view_maps(view)
        if len(maps) != 4:
            raise ConfigurationError(f"{view.value} needs neural maps for 4 levels, got {len(maps)}")

        grids: List[torch.Tensor] = []
        for level in range(1, 5):
            f = self.encode_stage(x, level, view)
            nmap = maps[level - 1]
            if nmap is None:
                raise ConfigurationError(f"missing {view.value} neural map for level {level}")
            x = recalibrate(f, nmap, self.preset, level=level, view=view)
            grids.append(x)

        embedding = pool_and_normalize(x)
        if squeeze:
            grids = [g.squeeze(0) for g in grids]
            embedding = embedding.squeeze(0)
        return FeaturePyramid(view=view, grids=grids), embedding

    def embed(self, image: torch.Tensor, view: ViewId) -> torch.Tensor:
        return self.forward_view(image, view)[1]

    def forward(self, ground: torch.Tensor, satellite: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.embed(ground, ViewId.GROUND), self.embed(satellite, ViewId.SATELLITE)
