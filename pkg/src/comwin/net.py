"""Small 2D encoder-decoder with a full-resolution head and a half-resolution light head.

Boundary attention (``dsbe``) sits on the penultimate decoder stage, which
runs at half resolution; the light head reads the (possibly attended)
penultimate features.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import arrayio
from .dsbe import BoundaryMask, WindowAttention, apply_attention, detect_boundary_windows

SCALES = (0.5, 1.0)
# PyTorch convention: running = (1 - m) * running + m * batch, so 0.1 keeps 0.9 of history
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    classes: int = 2
    base_width: int = 4
    stages: int = 3
    dsbe: bool = True
    window: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.classes < 2:
            raise ValueError("need in_channels >= 1 and classes >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.stages < 3:
            raise ValueError("need at least 3 stages for a half-scale penultimate stage")
        if self.window < 2:
            raise ValueError("window must be >= 2")

    @property
    def scales(self) -> tuple[float, float]:
        return SCALES

    def check_input(self, height: int, width: int) -> None:
        div = 2 ** (self.stages - 1)
        if height % div or width % div:
            raise ValueError(f"input {height}x{width} must be divisible by {div}")


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
    )


class LightHead(nn.Module):
    """1x1 conv, BN, ReLU, then a final 1x1 conv to class logits."""

    def __init__(self, channels: int, classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(channels, classes, 1)

    def forward(self, x):
        return self.out(self.body(x))


class SegNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**i for i in range(config.stages)]
        self.widths = widths
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for wd in widths:
            self.encoders.append(conv_block(cin, wd))
            cin = wd
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        # decoders[i] produces level i features from level i+1 and skip i
        self.decoders = nn.ModuleList(
            conv_block(widths[i + 1] + widths[i], widths[i]) for i in range(config.stages - 1)
        )
        self.attention = WindowAttention(widths[1])
        self.light_head = LightHead(widths[1], config.classes)
        self.head = nn.Conv2d(widths[0], config.classes, 1)

    def penultimate(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Half-scale decoder features before attention, plus the full-scale skip."""
        self.config.check_input(*x.shape[-2:])
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        y = skips[-1]
        for i in range(len(self.decoders) - 1, 0, -1):
            y = self.decoders[i](torch.cat([self.up(y), skips[i]], dim=1))
        return y, skips[0]

    def finish(self, feat: torch.Tensor, skip: torch.Tensor, mask: BoundaryMask | None):
        if mask is not None and self.config.dsbe:
            feat = apply_attention(feat, mask, self.attention)
        prob_half = self.light_head(feat).softmax(dim=1)
        full = self.decoders[0](torch.cat([self.up(feat), skip], dim=1))
        prob_full = self.head(full).softmax(dim=1)
        return prob_full, prob_half, feat

    def forward(self, x: torch.Tensor, mask: BoundaryMask | None = None):
        """Return ``(prob_full, prob_half, features_half)``."""
        feat, skip = self.penultimate(x)
        return self.finish(feat, skip, mask)

    def self_masked(self, x: torch.Tensor):
        """Forward whose boundary mask comes from the model's own half-scale prediction."""
        feat, skip = self.penultimate(x)
        if not self.config.dsbe:
            return self.finish(feat, skip, None)
        own = self.light_head(feat).argmax(dim=1)
        mask = detect_boundary_windows(own, self.config.window)
        return self.finish(feat, skip, mask)


def init_model(config: NetConfig, seed: int, dtype: torch.dtype = torch.float32) -> SegNet:
    """Build a model whose parameters are a pure function of ``(config, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = SegNet(config)
    return model.to(dtype)


def init_ensemble(config: NetConfig, seeds, dtype: torch.dtype = torch.float32) -> list[SegNet]:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("an ensemble needs at least 2 models")
    return [init_model(config, s, dtype) for s in seeds]


# --------------------------------------------------------------------------
# checkpoints


def _to_numpy(t: torch.Tensor):
    t = t.detach().cpu()
    if t.dtype == torch.int64:
        t = t.to(torch.int32)
    return t.numpy()


def save_checkpoint(model: SegNet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in model.state_dict().items():
        fname = f"{name}.cwt"
        arr = _to_numpy(value)
        arrayio.save(directory / fname, arr)
        tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": arrayio.spec_for(arr).dtype}
    index = {"config": dataclasses.asdict(model.config), "tensors": tensors}
    (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(directory, dtype: torch.dtype = torch.float32) -> SegNet:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"missing checkpoint index {index_path}")
    index = json.loads(index_path.read_text())
    model = SegNet(NetConfig(**index["config"])).to(dtype)
    reference = model.state_dict()
    state = {}
    for name, entry in index["tensors"].items():
        arr = arrayio.load(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, index says {entry['shape']}")
        state[name] = torch.from_numpy(arr.copy()).to(reference[name].dtype)
    model.load_state_dict(state)
    return model
