"""Boundary-window detection and residual attention restricted to those windows.

Windows tile the feature map without overlap, anchored at (0, 0). When the
window size does not divide an extent, the last row/column of tiles is
smaller and is treated at its actual size everywhere (detection, attention,
cost).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


class BoundaryMask(NamedTuple):
    grid: torch.Tensor  # bool, (..., ceil(H/w), ceil(W/w))
    window: int
    extent: tuple[int, int]  # (H, W) of the tiled map

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape[-2:])


def grid_shape(extent: tuple[int, int], window: int) -> tuple[int, int]:
    h, w = extent
    return math.ceil(h / window), math.ceil(w / window)


def tile_sizes(extent: tuple[int, int], window: int) -> torch.Tensor:
    """Pixel count of every tile, shape ``grid_shape(extent, window)``."""
    h, w = extent
    gh, gw = grid_shape(extent, window)
    rows = torch.tensor([min(window, h - i * window) for i in range(gh)])
    cols = torch.tensor([min(window, w - j * window) for j in range(gw)])
    return rows[:, None] * cols[None, :]


def _edge_index(n: int, window: int) -> torch.Tensor:
    g = math.ceil(n / window)
    return torch.arange(g * window).clamp(max=n - 1)


@torch.no_grad()
def detect_boundary_windows(labels, window: int) -> BoundaryMask:
    """A window is a boundary window iff its label tile holds two or more classes."""
    if window < 2:
        raise ValueError(f"window size must be >= 2, got {window}")
    labels = torch.as_tensor(labels)
    h, w = labels.shape[-2:]
    gh, gw = grid_shape((h, w), window)
    # replicate-pad: repeated edge pixels already sit in the partial tile
    padded = labels.index_select(-2, _edge_index(h, window)).index_select(-1, _edge_index(w, window))
    tiles = padded.reshape(*labels.shape[:-2], gh, window, gw, window)
    hi = tiles.amax(dim=(-3, -1))
    lo = tiles.amin(dim=(-3, -1))
    return BoundaryMask(hi != lo, window, (h, w))


def attention_cost(mask: BoundaryMask) -> int:
    """Number of attended token pairs: sum over true windows of (tile pixels)^2."""
    sizes = tile_sizes(mask.extent, mask.window)
    return int((mask.grid.to(torch.int64) * sizes.square()).sum())


class WindowAttention(nn.Module):
    """Single-head attention over the tokens of one window, no positional terms."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.query = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels, bias=False)
        # residual branch starts closed
        nn.init.zeros_(self.proj.weight)

    def forward(self, tokens: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        q = self.query(tokens)
        k = self.key(tokens)
        v = self.value(tokens)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.channels)
        if valid is not None:
            scores = scores.masked_fill(~valid[..., None, :], float("-inf"))
        return self.proj(scores.softmax(dim=-1) @ v)


def apply_attention(
    features: torch.Tensor, mask: BoundaryMask | None, attention: WindowAttention
) -> torch.Tensor:
    """Residual window attention on boundary windows of ``features`` (B, C, H, W).

    Non-boundary windows are copied through untouched.
    """
    if mask is None:
        return features
    b, c, h, w = features.shape
    win = mask.window
    gh, gw = grid_shape((h, w), win)
    if tuple(mask.extent) != (h, w) or mask.grid.shape != (b, gh, gw):
        raise ValueError(
            f"mask grid {tuple(mask.grid.shape)} over {mask.extent} does not tile "
            f"features of shape {tuple(features.shape)} with window {win}"
        )
    grid = mask.grid.to(features.device, torch.bool)
    if not bool(grid.any()):
        return features

    ph, pw = gh * win - h, gw * win - w
    x = F.pad(features, (0, pw, 0, ph)) if (ph or pw) else features
    windows = x.reshape(b, c, gh, win, gw, win).permute(0, 2, 4, 3, 5, 1)
    windows = windows.reshape(b, gh, gw, win * win, c)

    rows = torch.arange(gh * win, device=features.device).reshape(gh, win) < h
    cols = torch.arange(gw * win, device=features.device).reshape(gw, win) < w
    valid = rows[:, None, :, None] & cols[None, :, None, :]  # gh, gw, win, win
    valid = valid.reshape(gh, gw, win * win).expand(b, gh, gw, win * win)

    tokens = windows[grid]
    keep = valid[grid] if (ph or pw) else None
    updated = windows.clone()
    updated[grid] = tokens + attention(tokens, keep)

    out = updated.reshape(b, gh, gw, win, win, c).permute(0, 5, 1, 3, 2, 4)
    out = out.reshape(b, c, gh * win, gw * win)
    if ph or pw:
        out = out[:, :, :h, :w]
    return out
