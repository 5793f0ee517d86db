"""M-model co-training with pseudo labels aggregated from peers.

One iteration:

1. draw a labeled and an unlabeled batch from independent cyclic samplers;
2. augment image and label together;
3. run every model in eval mode on the unlabeled batch (no grad);
4. aggregate pseudo labels for each model from its peers, at both scales;
5. build boundary masks from half-scale pseudo labels (unlabeled) or from
   downscaled truth (labeled);
6. forward each model in train mode with its masks, sum the per-model
   objectives and take one SGD step over all models;
7. append a log record.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import aggregate as agg
from .arrayio import DatasetManifest, load_manifest
from .dsbe import detect_boundary_windows
from .evalmetrics import MetricReport, pseudo_quality
from .net import NetConfig, SegNet, init_model, load_checkpoint, save_checkpoint
from .objective import LossBreakdown, model_objective, total_objective
from .synthdata import downscale_labels

log = logging.getLogger(__name__)

PER_MODEL_COLUMNS = (
    "loss_total",
    "loss_sup_ce",
    "loss_sup_dice",
    "loss_pseudo_ce",
    "loss_pseudo_dice",
    "pl_precision",
    "pl_recall",
    "win_conf",
)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    manifest: str = ""
    models: int = 3
    strategy: str = "comwin"
    lam: float = 0.5
    tau: float = 0.6
    dsbe: bool = True
    window: int = 4
    base_width: int = 4
    stages: int = 3
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    iterations: int = 6000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "step"
    step_size: int = 2500
    gamma: float = 0.1
    poly_power: float = 0.9
    seed: int = 0
    init: str = "independent"
    flip: bool = True
    rotate: bool = True
    aug_prob: float = 0.5
    checkpoint_every: int = 500
    threads: int = 1

    def __post_init__(self):
        if self.models < 2:
            raise ValueError("need at least 2 models")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.strategy not in agg.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy in ("cps", "threshold") and self.models != 2:
            raise ValueError(f"strategy {self.strategy!r} needs exactly 2 models")
        if self.schedule not in ("step", "poly"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("independent", "shared"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg = dataclasses.replace(cfg, manifest=str((path.parent / cfg.manifest).resolve()))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def net_config(self, classes: int) -> NetConfig:
        return NetConfig(
            classes=classes,
            base_width=self.base_width,
            stages=self.stages,
            dsbe=self.dsbe,
            window=self.window,
        )

    @property
    def scales(self) -> tuple[float, ...]:
        return (0.5, 1.0) if self.dsbe else (1.0,)

    def learning_rate(self, it: int) -> float:
        if self.schedule == "step":
            return self.lr * self.gamma ** (it // self.step_size)
        return self.lr * (1.0 - it / self.iterations) ** self.poly_power


def _substream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


def model_seeds(config: TrainConfig) -> list[int]:
    base = [int(np.random.SeedSequence([config.seed, 1000 + m]).generate_state(1)[0]) for m in range(config.models)]
    if config.init == "shared":
        return [base[0]] * config.models
    return base


class CyclicSampler:
    """Index stream that reshuffles at every pass over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, k: int) -> list[int]:
        if self.n == 0:
            return []
        out = []
        while len(out) < k:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, config: TrainConfig):
    """Random flip and 90-degree rotation applied identically to image and label."""
    u_flip, axis, u_rot, k = rng.random(), rng.integers(2), rng.random(), rng.integers(1, 4)
    if config.flip and u_flip < config.aug_prob:
        image, label = np.flip(image, axis), np.flip(label, axis)
    if config.rotate and u_rot < config.aug_prob and image.shape[0] == image.shape[1]:
        image, label = np.rot90(image, k), np.rot90(label, k)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


@dataclass
class Batch:
    images_l: torch.Tensor
    labels_l: torch.Tensor
    images_u: torch.Tensor
    truth_u: torch.Tensor | None


@dataclass
class IterationRecord:
    iteration: int
    lr: float
    breakdowns: list[LossBreakdown]
    pl_precision: list[float]
    pl_recall: list[float]
    win_conf: list[float]

    def row(self) -> list:
        out = [self.iteration, repr(float(self.lr))]
        for m, b in enumerate(self.breakdowns):
            s = b.summary()
            vals = [s[k] for k in PER_MODEL_COLUMNS[:5]]
            vals += [self.pl_precision[m], self.pl_recall[m], self.win_conf[m]]
            out += [repr(float(v)) for v in vals]
        return out


def csv_header(models: int) -> list[str]:
    cols = ["iter", "lr"]
    for m in range(models):
        cols += [f"m{m}_{c}" for c in PER_MODEL_COLUMNS]
    return cols


def _nanmean(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


class Trainer:
    def __init__(self, config: TrainConfig, manifest: DatasetManifest | None = None):
        self.config = config
        self.manifest = manifest if manifest is not None else load_manifest(config.manifest)
        lab = self.manifest.split("labeled")
        if not lab:
            raise ValueError("labeled split is empty")
        unl = self.manifest.split("unlabeled")
        self.images_l = [self.manifest.load_image(s) for s in lab]
        self.labels_l = [self.manifest.load_label(s) for s in lab]
        self.images_u = [self.manifest.load_image(s) for s in unl]
        self.truth_u = (
            [self.manifest.load_label(s) for s in unl]
            if all(s.hidden_label is not None for s in unl)
            else None
        )
        self.net_config = config.net_config(self.manifest.classes)
        self.net_config.check_input(*self.images_l[0].shape)
        self.models: list[SegNet] = [init_model(self.net_config, s) for s in model_seeds(config)]
        params = [p for model in self.models for p in model.parameters()]
        self.optimizer = torch.optim.SGD(
            params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
        )
        self.sampler_l = CyclicSampler(len(self.images_l), _substream(config.seed, 1))
        self.sampler_u = CyclicSampler(len(self.images_u), _substream(config.seed, 2))
        self.aug_l = _substream(config.seed, 3)
        self.aug_u = _substream(config.seed, 4)
        self.iteration = 0
        self.last_grad_digest: str | None = None

    # -- data ------------------------------------------------------------

    def next_batch(self) -> Batch:
        cfg = self.config
        xl, yl = [], []
        for i in self.sampler_l.take(cfg.labeled_batch):
            img, lab = augment(self.images_l[i], self.labels_l[i], self.aug_l, cfg)
            xl.append(img)
            yl.append(lab)
        xu, tu = [], []
        for i in self.sampler_u.take(cfg.unlabeled_batch):
            truth = self.truth_u[i] if self.truth_u is not None else np.zeros_like(self.images_u[i], dtype=np.uint8)
            img, lab = augment(self.images_u[i], truth, self.aug_u, cfg)
            xu.append(img)
            tu.append(lab)
        h, w = self.images_l[0].shape
        return Batch(
            images_l=torch.from_numpy(np.stack(xl)[:, None].astype(np.float32)),
            labels_l=torch.from_numpy(np.stack(yl).astype(np.int64)),
            images_u=torch.from_numpy(np.stack(xu)[:, None].astype(np.float32)) if xu else torch.zeros(0, 1, h, w),
            truth_u=torch.from_numpy(np.stack(tu).astype(np.int64)) if (tu and self.truth_u is not None) else None,
        )

    # -- pseudo labels -----------------------------------------------------

    @torch.no_grad()
    def peer_inference(self, images: torch.Tensor) -> list[dict[float, torch.Tensor]]:
        out = []
        for model in self.models:
            model.eval()
            if self.config.dsbe:
                full, half, _ = model.self_masked(images)
            else:
                full, half, _ = model(images)
            out.append({1.0: full, 0.5: half})
        return out

    def pseudo_labels(self, probs: list[dict[float, torch.Tensor]], m: int) -> dict[float, torch.Tensor]:
        return {
            s: agg.aggregate(self.config.strategy, [p[s] for p in probs], m, self.config.tau)
            for s in self.config.scales
        }

    # -- one iteration -------------------------------------------------------

    def step(self) -> IterationRecord:
        cfg = self.config
        it = self.iteration
        lr = cfg.learning_rate(it)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = self.next_batch()
        has_u = batch.images_u.shape[0] > 0

        probs = self.peer_inference(batch.images_u) if has_u else None
        pseudo = [self.pseudo_labels(probs, m) if has_u else None for m in range(cfg.models)]
        self.last_pseudo = pseudo
        self.last_probs = probs
        self.last_batch = batch

        sup_targets = {1.0: batch.labels_l}
        if cfg.dsbe:
            sup_targets[0.5] = downscale_labels(batch.labels_l, 2)
            mask_l = detect_boundary_windows(sup_targets[0.5], cfg.window)

        breakdowns = []
        for m, model in enumerate(self.models):
            model.train()
            full, half, _ = model(batch.images_l, mask_l if cfg.dsbe else None)
            sup_preds = {1.0: full, 0.5: half} if cfg.dsbe else {1.0: full}
            unsup_preds = None
            if has_u:
                mask_u = detect_boundary_windows(pseudo[m][0.5], cfg.window) if cfg.dsbe else None
                with torch.set_grad_enabled(cfg.lam > 0):
                    ufull, uhalf, _ = model(batch.images_u, mask_u)
                unsup_preds = {1.0: ufull, 0.5: uhalf} if cfg.dsbe else {1.0: ufull}
            sup_preds = {s: sup_preds[s] for s in cfg.scales}
            breakdowns.append(model_objective(sup_preds, sup_targets, unsup_preds, pseudo[m], cfg.lam))

        total = total_objective(breakdowns)
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite total loss at iteration {it}")
        self.optimizer.zero_grad(set_to_none=False)
        total.backward()
        self.last_grad_digest = self._grad_digest()
        self.optimizer.step()

        precision, recall, conf = [], [], []
        for m in range(cfg.models):
            p, r, c = self._pseudo_stats(probs, pseudo[m], batch.truth_u, m) if has_u else (math.nan,) * 3
            precision.append(p)
            recall.append(r)
            conf.append(c)
        self.iteration += 1
        return IterationRecord(it, lr, breakdowns, precision, recall, conf)

    def _pseudo_stats(self, probs, pseudo, truth, m):
        labels = pseudo[1.0]
        peers = [p[1.0] for i, p in enumerate(probs) if i != m]
        fg = labels > 0
        if bool(fg.any()):
            conf = float(agg.winning_confidence(peers, labels)[fg].double().mean())
        else:
            conf = math.nan
        if truth is None:
            return math.nan, math.nan, conf
        lab_np, tru_np = labels.numpy(), truth.numpy()
        precs, recs = [], []
        for c in range(1, self.net_config.classes):
            p, r = pseudo_quality(lab_np, tru_np, c)
            precs.append(p)
            recs.append(r)
        return _nanmean(precs), _nanmean(recs), conf

    def _grad_digest(self) -> str:
        h = hashlib.sha256()
        for model in self.models:
            for p in model.parameters():
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                h.update(g.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        for m, model in enumerate(self.models):
            save_checkpoint(model, directory / f"model_{m}")


# --------------------------------------------------------------------------
# runs


COMPLETE_MARKER = "COMPLETE"


def train(config: TrainConfig, run_dir=None, force: bool = False, manifest: DatasetManifest | None = None):
    """Run co-training; returns ``(trainer, records)``.

    With ``run_dir`` set, writes ``config.json`` first, then ``log.csv`` and
    checkpoints every ``checkpoint_every`` iterations and at the end.
    """
    torch.set_num_threads(config.threads)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        if (run / COMPLETE_MARKER).exists() and not force:
            raise FileExistsError(f"run directory {run} holds a completed run; pass force to overwrite")
        run.mkdir(parents=True, exist_ok=True)
        (run / COMPLETE_MARKER).unlink(missing_ok=True)
        (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        log_fh = open(run / "log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(csv_header(config.models))
    trainer = Trainer(config, manifest)
    records = []
    try:
        for _ in range(config.iterations):
            rec = trainer.step()
            records.append(rec)
            if run is not None:
                writer.writerow(rec.row())
                done = rec.iteration + 1
                if done % config.checkpoint_every == 0:
                    log_fh.flush()
                    trainer.save(run / "checkpoints" / f"iter_{done:06d}")
            if rec.iteration % 100 == 0:
                log.info("iter %d lr %.4g total %.4f", rec.iteration, rec.lr,
                         sum(float(b.total.detach()) for b in rec.breakdowns))
        if run is not None:
            trainer.save(run / "checkpoints" / "final")
            (run / COMPLETE_MARKER).write_text("")
    finally:
        if run is not None:
            log_fh.close()
    return trainer, records


def load_ensemble(checkpoint_dir) -> list[SegNet]:
    directory = Path(checkpoint_dir)
    model_dirs = sorted(directory.glob("model_*"), key=lambda p: int(p.name.split("_")[1]))
    if not model_dirs:
        raise FileNotFoundError(f"no model checkpoints under {directory}")
    models = [load_checkpoint(d) for d in model_dirs]
    for model in models:
        model.eval()
    return models


@torch.no_grad()
def predict_probs(models: list[SegNet], image, mode: str = "first") -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() == 2:
        x = x[None, None]
    if mode == "first":
        return models[0].self_masked(x)[0][0]
    if mode == "ensemble":
        maps = [model.self_masked(x)[0][0] for model in models]
        return torch.stack(maps).mean(dim=0)
    raise ValueError(f"unknown predict mode {mode!r}")


def predict(models_or_dir, image, mode: str = "first") -> np.ndarray:
    """Label map for ``image``: model 1 with its own boundary mask, or the M-model mean."""
    models = models_or_dir if isinstance(models_or_dir, list) else load_ensemble(models_or_dir)
    return predict_probs(models, image, mode).argmax(dim=0).numpy().astype(np.uint8)


def evaluate(models, manifest: DatasetManifest, split: str = "test", mode: str = "first") -> MetricReport:
    report = MetricReport(classes=list(range(1, manifest.classes)))
    for sample in manifest.split(split):
        pred = predict(models, manifest.load_image(sample), mode)
        truth = manifest.load_label(sample)
        report.add(Path(sample.image).stem, pred, truth)
    return report


def write_report(report: MetricReport, json_path, csv_path=None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    if csv_path is not None:
        buf = io.StringIO()
        writer = csv.writer(buf)
        for row in report.csv_rows():
            writer.writerow(["" if v is None else v for v in row])
        Path(csv_path).write_text(buf.getvalue())


def read_log(path) -> tuple[list[str], np.ndarray]:
    """Parse a training log into ``(header, float array)``; raises ``ValueError`` if malformed."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing training log {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["iter", "lr"]:
        raise ValueError(f"malformed training log {path}: bad header")
    header = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"malformed training log {path}: {exc}") from None
    if data.size and data.shape[1] != len(header):
        raise ValueError(f"malformed training log {path}: ragged rows")
    return header, data.reshape(-1, len(header))


def env_seed(default: int) -> int:
    """``COMWIN_SEED`` overrides the configured master seed when set."""
    value = os.environ.get("COMWIN_SEED")
    return default if value in (None, "") else int(value)
