"""Segmentation loss and the co-training objectives built on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

CE_CLAMP = 1e-7
DICE_EPS = 1e-5


def seg_terms(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-item ``(cross_entropy, dice_loss)`` for probabilities ``(B, C, H, W)``."""
    if pred.dim() == 3:
        ce, dice = seg_terms(pred[None], torch.as_tensor(target)[None])
        return ce[0], dice[0]
    target = torch.as_tensor(target, device=pred.device).long()
    if pred.shape[-2:] != target.shape[-2:] or pred.shape[0] != target.shape[0]:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} disagree")
    n_classes = pred.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target classes must lie in [0, {n_classes})")

    p_target = pred.gather(1, target[:, None]).squeeze(1)
    ce = -p_target.clamp_min(CE_CLAMP).log().mean(dim=(-2, -1))

    onehot = F.one_hot(target, n_classes).permute(0, 3, 1, 2).to(pred.dtype)
    inter = (pred * onehot).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + onehot.sum(dim=(-2, -1))
    dice = 1.0 - ((2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean(dim=1)
    return ce, dice


def seg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of cross-entropy and macro soft Dice loss (per item when batched)."""
    ce, dice = seg_terms(pred, target)
    return 0.5 * ce + 0.5 * dice


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


@dataclass
class LossBreakdown:
    """Summed loss parts of one model, keyed by scale.

    ``total`` keeps the autograd graph; the parts are reported detached.
    """

    lam: float
    sup_ce: dict[float, torch.Tensor] = field(default_factory=dict)
    sup_dice: dict[float, torch.Tensor] = field(default_factory=dict)
    pseudo_ce: dict[float, torch.Tensor] = field(default_factory=dict)
    pseudo_dice: dict[float, torch.Tensor] = field(default_factory=dict)
    total: torch.Tensor | None = None

    @property
    def scales(self) -> list[float]:
        return sorted(self.sup_ce)

    def recompose(self) -> float:
        acc = 0.0
        for s in self.scales:
            acc += 0.5 * float(self.sup_ce[s]) + 0.5 * float(self.sup_dice[s])
            acc += self.lam * (0.5 * float(self.pseudo_ce[s]) + 0.5 * float(self.pseudo_dice[s]))
        return acc

    def summary(self) -> dict[str, float]:
        def over_scales(part):
            return float(sum(float(v) for v in part.values()))

        return {
            "loss_total": float(self.total.detach()),
            "loss_sup_ce": over_scales(self.sup_ce),
            "loss_sup_dice": over_scales(self.sup_dice),
            "loss_pseudo_ce": over_scales(self.pseudo_ce),
            "loss_pseudo_dice": over_scales(self.pseudo_dice),
        }


def model_objective(
    sup_preds: Mapping[float, torch.Tensor],
    sup_targets: Mapping[float, torch.Tensor],
    unsup_preds: Mapping[float, torch.Tensor] | None,
    pseudo: Mapping[float, torch.Tensor] | None,
    lam: float,
) -> LossBreakdown:
    """Sum over scales of supervised loss on labeled items plus ``lam`` times
    pseudo-supervised loss on unlabeled items.

    Predictions are probability maps ``(B, C, H, W)`` keyed by scale; batches
    with ``B == 0`` (or ``None``) contribute an empty sum. Pseudo labels are
    treated as constants.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    scales = sorted(sup_preds)
    if sorted(sup_targets) != scales:
        raise ValueError("supervised predictions and targets cover different scales")
    has_unsup = unsup_preds is not None and any(p.shape[0] for p in unsup_preds.values())
    if has_unsup:
        if pseudo is None or any(s not in pseudo for s in scales):
            raise ValueError("pseudo labels missing for some scale")
        if sorted(unsup_preds) != scales:
            raise ValueError("unlabeled predictions cover different scales")

    out = LossBreakdown(lam=float(lam))
    total = None
    for s in scales:
        pred = sup_preds[s]
        if pred.shape[0]:
            ce, dice = seg_terms(pred, sup_targets[s])
            ce, dice = ce.sum(), dice.sum()
        else:
            ce = dice = _zero(pred)
        term = 0.5 * ce + 0.5 * dice
        out.sup_ce[s], out.sup_dice[s] = ce.detach(), dice.detach()

        if has_unsup:
            upred = unsup_preds[s]
            if lam == 0:
                with torch.no_grad():
                    pce, pdice = seg_terms(upred, pseudo[s].detach())
            else:
                pce, pdice = seg_terms(upred, pseudo[s].detach())
                pce, pdice = pce.sum(), pdice.sum()
                term = term + lam * (0.5 * pce + 0.5 * pdice)
            pce, pdice = pce.sum(), pdice.sum()
        else:
            pce = pdice = _zero(pred)
        out.pseudo_ce[s], out.pseudo_dice[s] = pce.detach(), pdice.detach()
        total = term if total is None else total + term
    out.total = total
    return out


def total_objective(breakdowns) -> torch.Tensor:
    """Plain sum of per-model totals."""
    breakdowns = list(breakdowns)
    if not breakdowns:
        raise ValueError("no per-model breakdowns given")
    acc = breakdowns[0].total
    for b in breakdowns[1:]:
        acc = acc + b.total
    return acc
