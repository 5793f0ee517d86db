"""Pseudo-label aggregation: maps in, labels out.

Every function takes probability maps laid out as ``(..., C, H, W)`` and
returns an integer label map ``(..., H, W)``. Ties always resolve toward the
lowest class index. Inputs are detached; nothing here is differentiable.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch

STRATEGIES = ("comwin", "cps", "threshold", "avg", "vote")


class PseudoLabel(NamedTuple):
    labels: torch.Tensor
    strategy: str
    iteration: int
    scale: float


def _stack(maps) -> torch.Tensor:
    if isinstance(maps, torch.Tensor):
        stacked = maps
    else:
        maps = [torch.as_tensor(m) for m in maps]
        if not maps:
            raise ValueError("need at least one probability map")
        shape = maps[0].shape
        for m in maps[1:]:
            if m.shape != shape:
                raise ValueError(f"shape mismatch among maps: {tuple(shape)} vs {tuple(m.shape)}")
        stacked = torch.stack(maps)
    if stacked.shape[0] == 0:
        raise ValueError("need at least one probability map")
    if stacked.dim() < 4:
        raise ValueError("maps must be laid out as (..., C, H, W)")
    return stacked.detach()


def _single(peer) -> torch.Tensor:
    peer = torch.as_tensor(peer).detach()
    if peer.dim() < 3:
        raise ValueError("map must be laid out as (..., C, H, W)")
    return peer


@torch.no_grad()
def comwin_aggregate(peers) -> torch.Tensor:
    """Class whose best confidence over all peers is highest, per pixel."""
    best = _stack(peers).amax(dim=0)
    return best.argmax(dim=-3)


@torch.no_grad()
def comwin_binary(peers) -> torch.Tensor:
    stacked = _stack(peers)
    if stacked.shape[-3] != 2:
        raise ValueError(f"comwin_binary needs C == 2, got C = {stacked.shape[-3]}")
    best = stacked.amax(dim=0)
    return (best[..., 1, :, :] > best[..., 0, :, :]).long()


@torch.no_grad()
def cps_aggregate(peer) -> torch.Tensor:
    return _single(peer).argmax(dim=-3)


@torch.no_grad()
def threshold_aggregate(peer, tau: float) -> torch.Tensor:
    peer = _single(peer)
    if peer.shape[-3] != 2:
        raise ValueError(f"threshold_aggregate needs C == 2, got C = {peer.shape[-3]}")
    if not 0.5 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0.5, 1), got {tau}")
    return (peer[..., 1, :, :] > tau).long()


@torch.no_grad()
def average_ensemble(all_probs) -> torch.Tensor:
    stacked = _stack(all_probs)
    if stacked.shape[0] < 2:
        raise ValueError("average ensemble needs at least 2 maps")
    return stacked.mean(dim=0).argmax(dim=-3)


@torch.no_grad()
def voting_ensemble(all_probs) -> torch.Tensor:
    stacked = _stack(all_probs)
    if stacked.shape[0] < 2:
        raise ValueError("voting ensemble needs at least 2 maps")
    n_classes = stacked.shape[-3]
    votes = stacked.argmax(dim=-3)
    counts = torch.stack([(votes == c).sum(dim=0) for c in range(n_classes)], dim=-3)
    return counts.argmax(dim=-3)


@torch.no_grad()
def winning_confidence(peers, labels: torch.Tensor) -> torch.Tensor:
    """Best peer confidence for the assigned class at each pixel (``(..., H, W)``)."""
    best = _stack(peers).amax(dim=0)
    return best.gather(-3, labels.unsqueeze(-3)).squeeze(-3)


def aggregate(
    strategy: str,
    probs: Sequence[torch.Tensor],
    m: int,
    tau: float = 0.5,
) -> torch.Tensor:
    """Pseudo labels for base model ``m`` given every model's maps ``probs``.

    ``comwin`` draws on the peers of ``m``; ``cps`` and ``threshold`` need
    exactly one peer (two models); the ensembles pool all models.
    """
    peers = [p for i, p in enumerate(probs) if i != m]
    if strategy == "comwin":
        return comwin_aggregate(peers)
    if strategy in ("cps", "threshold"):
        if len(peers) != 1:
            raise ValueError(f"{strategy} supports exactly two models, got {len(probs)}")
        if strategy == "cps":
            return cps_aggregate(peers[0])
        return threshold_aggregate(peers[0], tau)
    if strategy == "avg":
        return average_ensemble(probs)
    if strategy == "vote":
        return voting_ensemble(probs)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
