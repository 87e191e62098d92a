"""Branch cross-entropies, cross-branch consistency and the combined loss.

Logits are (N, C, H, W) or unbatched (C, H, W); every term is a mean over
all pixels of all images.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_CLAMP = 1e-12
DEFAULT_GAMMA = 1000.0


@dataclass(frozen=True)
class LossBreakdown:
    ce_f: float
    ce_d: float
    mse: float
    gamma: float
    total: float

    @classmethod
    def from_terms(cls, ce_f: float, ce_d: float, mse: float, gamma: float) -> "LossBreakdown":
        return cls(ce_f, ce_d, mse, gamma, ce_f + ce_d + gamma * mse)

    def csv_row(self, iteration: int, lr: float) -> list:
        return [iteration, self.ce_f, self.ce_d, self.mse, self.gamma, self.total, lr]


CSV_HEADER = ["iter", "ce_f", "ce_d", "mse", "gamma", "total", "lr"]


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


def _check_labels(y: torch.Tensor, logits: torch.Tensor, num_classes: int) -> torch.Tensor:
    y = torch.as_tensor(y)
    if y.ndim == 2:
        y = y.unsqueeze(0)
    if y.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"label shape {tuple(y.shape)} does not match logits {tuple(logits.shape)}")
    if logits.shape[1] != num_classes:
        raise ValueError(f"expected {num_classes}-channel logits, got {logits.shape[1]}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    return y.long()


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_CLAMP))


def ce_binary(det_logits: torch.Tensor, y_f) -> torch.Tensor:
    """Binary cross-entropy of the forged-class softmax probability."""
    det_logits = _batched(det_logits)
    y = _check_labels(y_f, det_logits, 2).to(det_logits.dtype)
    prob = det_logits.softmax(dim=1)
    ll = y * _clamped_log(prob[:, 1]) + (1 - y) * _clamped_log(prob[:, 0])
    return -ll.mean()


def ce_three(dist_logits: torch.Tensor, y_d) -> torch.Tensor:
    dist_logits = _batched(dist_logits)
    y = _check_labels(y_d, dist_logits, 3)
    log_p = _clamped_log(dist_logits.softmax(dim=1))
    return -log_p.gather(1, y.unsqueeze(1)).mean()


def forged_probabilities(det_logits: torch.Tensor, dist_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(p_f, p_d): detection forged probability and merged source+target probability."""
    det_logits, dist_logits = _batched(det_logits), _batched(dist_logits)
    if det_logits.shape[2:] != dist_logits.shape[2:] or det_logits.shape[0] != dist_logits.shape[0]:
        raise ValueError(f"branch shapes differ: {tuple(det_logits.shape)} vs {tuple(dist_logits.shape)}")
    p_f = det_logits.softmax(dim=1)[:, 1]
    p_d = dist_logits.softmax(dim=1)[:, 1:].sum(dim=1)
    return p_f, p_d


def mse_consistency(det_logits: torch.Tensor, dist_logits: torch.Tensor) -> torch.Tensor:
    p_f, p_d = forged_probabilities(det_logits, dist_logits)
    return ((p_f - p_d) ** 2).mean()


def total_loss(det_logits, dist_logits, y_f, y_d, gamma: float = DEFAULT_GAMMA) -> tuple[torch.Tensor, LossBreakdown]:
    """Differentiable ce_f + ce_d + gamma * mse and its scalar breakdown."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    ce_f = ce_binary(det_logits, y_f)
    ce_d = ce_three(dist_logits, y_d)
    mse = mse_consistency(det_logits, dist_logits)
    loss = ce_f + ce_d + gamma * mse
    return loss, LossBreakdown.from_terms(ce_f.item(), ce_d.item(), mse.item(), float(gamma))
