"""
Symmetric InfoNCE over in-batch ground/satellite pairs.
"""
from __future__ import annotations

import math
from typing import Literal, Union

import torch
import torch.nn as nn

from .errors import NumericError, ValidationError

Direction = Literal["g2s", "s2g", "symmetric"]


def similarity_matrix(emb_g: torch.Tensor, emb_s: torch.Tensor) -> torch.Tensor:
    """``M[i, j] = <emb_g[i], emb_s[j]>``."""
    if emb_g.dim() != 2 or emb_s.dim() != 2:
        raise ValidationError("similarity_matrix expects two (B, D) embedding batches")
    if emb_g.shape[0] != emb_s.shape[0]:
        raise ValidationError(f"batch size mismatch: {emb_g.shape[0]} ground vs {emb_s.shape[0]} satellite")
    if emb_g.shape[1] != emb_s.shape[1]:
        raise ValidationError(f"embedding dim mismatch: {emb_g.shape[1]} vs {emb_s.shape[1]}")
    return emb_g @ emb_s.T


def _row_nce(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_prob = shifted.diagonal() - torch.logsumexp(shifted, dim=1)
    return -log_prob.mean()


def info_nce(
    sims: torch.Tensor,
    tau: Union[float, torch.Tensor] = 0.07,
    direction: Direction = "symmetric",
) -> torch.Tensor:
    """
    Mean over queries of ``-log softmax(M / tau)`` at the matching entry.
    ``s2g`` uses the transpose; ``symmetric`` averages both directions.
    """
    tau_value = float(tau.detach()) if isinstance(tau, torch.Tensor) else float(tau)
    if not tau_value > 0:
        raise ValidationError(f"temperature must be positive, got {tau_value}")
    if sims.dim() != 2 or sims.shape[0] != sims.shape[1]:
        raise ValidationError(f"similarity matrix must be square, got {tuple(sims.shape)}")
    if not torch.isfinite(sims).all():
        raise NumericError("similarity matrix contains non-finite values")

    logits = sims / tau
    if direction == "g2s":
        return _row_nce(logits)
    if direction == "s2g":
        return _row_nce(logits.T)
    if direction == "symmetric":
        return 0.5 * (_row_nce(logits) + _row_nce(logits.T))
    raise ValidationError(f"unknown InfoNCE direction {direction!r}")


class InfoNCELoss(nn.Module):
    """
    InfoNCE with a fixed temperature, or a learnable one stored as log(tau).
    """

    def __init__(self, tau: float = 0.07, direction: Direction = "symmetric", learnable: bool = False):
        super().__init__()
        if not tau > 0:
            raise ValidationError(f"temperature must be positive, got {tau}")
        self.direction = direction
        if learnable:
            self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))
        else:
            self.register_buffer("log_tau", torch.tensor(math.log(tau)), persistent=False)
        self.learnable = learnable

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self, emb_g: torch.Tensor, emb_s: torch.Tensor) -> torch.Tensor:
        sims = similarity_matrix(emb_g, emb_s)
        return info_nce(sims, self.tau.to(sims.dtype), self.direction)
