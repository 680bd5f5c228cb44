"""Distillation and multi-similarity losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from config.settings import DEFAULT_LOSS, LossConfig
from core.errors import DimensionError


def mse_distill_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over every token and channel; the teacher side is detached."""
    if student.shape != teacher.shape:
        raise DimensionError(
            f"student features {tuple(student.shape)} do not match teacher {tuple(teacher.shape)}"
        )
    return torch.mean((student - teacher.detach()) ** 2)


@dataclass(frozen=True)
class MinedPairs:
    positives: torch.Tensor  # [N, N] bool
    negatives: torch.Tensor  # [N, N] bool

    def anchor(self, i: int) -> tuple[list[int], list[int]]:
        pos = torch.nonzero(self.positives[i]).flatten().tolist()
        neg = torch.nonzero(self.negatives[i]).flatten().tolist()
        return pos, neg


@torch.no_grad()
def ms_mine(similarities: torch.Tensor, labels: torch.Tensor, eps: float = 0.1) -> MinedPairs:
    """Keep hard positives (``s_ij < max_neg + eps``) and hard negatives (``s_ik > min_pos - eps``)."""
    n = similarities.shape[0]
    if similarities.shape != (n, n) or labels.shape[0] != n:
        raise DimensionError(
            f"similarity matrix {tuple(similarities.shape)} does not match {labels.shape[0]} labels"
        )
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=similarities.device)
    pos_candidates = same & ~eye
    neg_candidates = ~same

    inf = torch.tensor(float("inf"), dtype=similarities.dtype)
    hardest_neg = torch.where(neg_candidates, similarities, -inf).amax(dim=1, keepdim=True)
    easiest_pos = torch.where(pos_candidates, similarities, inf).amin(dim=1, keepdim=True)

    positives = pos_candidates & (similarities < hardest_neg + eps)
    negatives = neg_candidates & (similarities > easiest_pos - eps)
    has_pos = pos_candidates.any(dim=1, keepdim=True)
    return MinedPairs(positives=positives & has_pos, negatives=negatives & has_pos)


def _log_one_plus_sum_exp(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    masked = torch.where(mask, values, torch.full_like(values, float("-inf")))
    zeros = torch.zeros_like(values[:, :1])
    return torch.logsumexp(torch.cat([zeros, masked], dim=1), dim=1)


def ms_loss(
    descriptors: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = DEFAULT_LOSS
) -> torch.Tensor:
    """Multi-similarity loss over mined pairs, averaged over all anchors.

    Descriptors must be unit rows so that dot products are cosine similarities.
    """
    if descriptors.dim() != 2:
        raise DimensionError(f"expected [N, d] descriptors, got {tuple(descriptors.shape)}")
    sims = descriptors @ descriptors.T
    mined = ms_mine(sims.detach(), labels, cfg.mining_eps)
    pos_term = _log_one_plus_sum_exp(-cfg.alpha * (sims - cfg.margin), mined.positives) / cfg.alpha
    neg_term = _log_one_plus_sum_exp(cfg.beta * (sims - cfg.margin), mined.negatives) / cfg.beta
    return torch.mean(pos_term + neg_term)


__all__ = ["MinedPairs", "mse_distill_loss", "ms_loss", "ms_mine"]
