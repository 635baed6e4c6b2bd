"""Training loops for every compared strategy.

All strategies share :func:`iterate_minibatches` (gamma jitter per minibatch,
per-sample flip and crop) so that comparisons differ only in model and loss.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .losses import TverskyParams, dice_ce_loss, sample_tversky_params, soft_dice_loss, tversky_loss
from .models import HyperResUNet, Model, ModelSpec, ResUNet, save_checkpoint
from .optim import Adam
from .synthdata import GAMMA_RANGE, SyntheticSample, kfold_split, random_crop, random_flip, random_gamma

logger = logging.getLogger(__name__)

STRATEGIES = ("single_dice", "single_dice_ce", "dropout", "subset_ensemble", "vtv_ensemble", "hypernet")
PLAIN_LR = 1e-4
HYPER_LR = 1e-5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "single_dice_ce"
    epochs: int = 60
    batch_size: int = 8
    lr: float | None = None  # None: 1e-4 plain, 1e-5 hyper
    weight_decay: float = 1e-3
    patch_size: int = 64
    seed: int = 0
    alpha_grid: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    n_members: int = 5
    dropout: float = 0.1
    dice_ce_mix: float = 0.5
    smooth: float = 1.0
    gamma_range: tuple[float, float] | None = GAMMA_RANGE
    flip_prob: float = 0.1
    fg_retries: int = 0
    fixed_alpha: float | None = None  # hypernet only: freeze h instead of sampling

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if self.gamma_range is not None:
            object.__setattr__(self, "gamma_range", tuple(float(g) for g in self.gamma_range))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        a = self.alpha_grid
        if not a or any(not 0.0 < x < 1.0 for x in a) or any(x >= y for x, y in zip(a, a[1:])):
            raise ValueError(f"alpha_grid must be strictly increasing inside (0, 1), got {a}")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.strategy == "vtv_ensemble" and len(a) != self.n_members:
            raise ValueError(f"vtv_ensemble needs one alpha per member: {len(a)} alphas vs n_members={self.n_members}")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return HYPER_LR if self.strategy == "hypernet" else PLAIN_LR

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TrainReport:
    strategy: str
    member: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    n_samples: int = 0
    alphas: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)


@dataclass
class Member:
    name: str
    model: Model
    report: TrainReport
    alpha: float | None = None


def iterate_minibatches(
    samples: list[SyntheticSample], config: TrainConfig, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of augmented [B,1,P,P] image/label batches."""
    order = rng.permutation(len(samples))
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        gamma = rng.uniform(*config.gamma_range) if config.gamma_range else None
        images, labels = [], []
        for i in idx:
            img, ann, pt = random_crop(samples[i], config.patch_size, rng, config.fg_retries)
            img, ann, pt = random_flip(img, ann, pt, rng, config.flip_prob)
            if gamma is not None:
                img = random_gamma(img, gamma=gamma)
            images.append(img)
            labels.append(ann)
        yield (np.stack(images)[:, None].astype(np.float64), np.stack(labels)[:, None].astype(np.float64))


def _loss_for(config: TrainConfig, alpha: float | None) -> Callable:
    s = config.smooth
    if alpha is not None:
        h = TverskyParams(alpha)
        return lambda p, g: tversky_loss(p, g, h, s)
    if config.strategy == "single_dice":
        return lambda p, g: soft_dice_loss(p, g, s)
    return lambda p, g: dice_ce_loss(p, g, config.dice_ce_mix, s)


def fit(
    model: Model,
    samples: list[SyntheticSample],
    config: TrainConfig,
    member: str = "model",
    alpha: float | None = None,
    data_seed: int | None = None,
    log_file=None,
) -> TrainReport:
    """Optimize ``model`` in place.

    For a :class:`HyperResUNet` one ``h`` is drawn per minibatch (or
    ``config.fixed_alpha`` is used); plain models use the fixed loss chosen
    by ``alpha`` / the strategy.
    """
    if not samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0 if data_seed is None else data_seed, 17]))
    opt = Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    hyper = isinstance(model, HyperResUNet)
    dropout = config.dropout if config.strategy == "dropout" else 0.0
    loss_fn = None if hyper else _loss_for(config, alpha)
    report = TrainReport(strategy=config.strategy, member=member, seed=config.seed, n_samples=len(samples),
                         config=config.to_dict())
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for images, labels in iterate_minibatches(samples, config, rng):
            if hyper:
                h = TverskyParams(config.fixed_alpha) if config.fixed_alpha is not None else sample_tversky_params(rng)
                pred = model.forward(images, h, training=True)
                loss = tversky_loss(pred, labels, h, config.smooth)
                report.alphas.append(h.alpha)
            else:
                h = None
                pred = model.forward(images, training=True, dropout=dropout, rng=rng)
                loss = loss_fn(pred, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{member}: non-finite loss at epoch {epoch}, step {report.steps} (run seed {config.seed})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            report.steps += 1
            total += value * len(images)
            count += len(images)
            if log_file is not None:
                rec = {"epoch": epoch, "step": report.steps, "alpha": h.alpha if h else alpha, "loss": value,
                       "elapsed_ms": round(1000 * (time.perf_counter() - t0), 1)}
                log_file.write(json.dumps(rec) + "\n")
        report.epoch_losses.append(total / count)
        logger.debug("%s epoch %d loss %.4f", member, epoch, total / count)
    report.wall_time = time.perf_counter() - t0
    return report


def _plain_spec(spec: ModelSpec) -> ModelSpec:
    return spec if spec.kind == "plain" else ModelSpec(**{**spec.to_dict(), "kind": "plain"})


def train_single(samples, spec: ModelSpec, config: TrainConfig, log_file=None) -> Member:
    model = ResUNet(_plain_spec(spec), seed=config.seed)
    report = fit(model, samples, config, member=config.strategy, log_file=log_file)
    return Member(config.strategy, model, report)


def train_vtv_ensemble(samples, spec: ModelSpec, config: TrainConfig, log_file=None) -> list[Member]:
    members = []
    for i, alpha in enumerate(config.alpha_grid):
        model = ResUNet(_plain_spec(spec), seed=config.seed + i)
        name = f"member_{alpha:g}"
        report = fit(model, samples, config, member=name, alpha=alpha, data_seed=i, log_file=log_file)
        members.append(Member(name, model, report, alpha=alpha))
    return members


def train_subset_ensemble(samples, spec: ModelSpec, config: TrainConfig, log_file=None) -> list[Member]:
    folds = kfold_split(samples, config.n_members, config.seed)
    members = []
    for i, held_out in enumerate(folds):
        held = {id(s) for s in held_out}
        subset = [s for s in samples if id(s) not in held]
        model = ResUNet(_plain_spec(spec), seed=config.seed + i)
        name = f"fold_{i}"
        report = fit(model, subset, config, member=name, data_seed=i, log_file=log_file)
        members.append(Member(name, model, report))
    return members


def train_hypernet(samples, spec: ModelSpec, config: TrainConfig, log_file=None) -> Member:
    if spec.kind != "hyper":
        spec = ModelSpec(**{**spec.to_dict(), "kind": "hyper"})
    model = HyperResUNet(spec, seed=config.seed)
    report = fit(model, samples, config, member="hypernet", log_file=log_file)
    return Member("hypernet", model, report)


def train(samples, spec: ModelSpec, config: TrainConfig, log_file=None) -> list[Member]:
    s = config.strategy
    if s in ("single_dice", "single_dice_ce", "dropout"):
        return [train_single(samples, spec, config, log_file)]
    if s == "vtv_ensemble":
        return train_vtv_ensemble(samples, spec, config, log_file)
    if s == "subset_ensemble":
        return train_subset_ensemble(samples, spec, config, log_file)
    return [train_hypernet(samples, spec, config, log_file)]


def save_members(members: list[Member], out_dir) -> dict:
    """Write one checkpoint directory per member plus a run summary.

    Returns the summary; wall times go to ``timing.json`` only, keeping the
    checkpoints themselves reproducible byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in members:
        meta = {
            "member": m.name, "alpha": m.alpha, "strategy": m.report.strategy, "seed": m.report.seed,
            "epochs": len(m.report.epoch_losses), "steps": m.report.steps, "loss_curve": m.report.epoch_losses,
        }
        path = save_checkpoint(m.model, out / m.name, metadata=meta)
        m.report.checkpoint = str(path)
        entries.append({"name": m.name, "alpha": m.alpha, "kind": m.model.spec.kind})
    summary = {"members": entries}
    (out / "members.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    timing = {m.name: m.report.wall_time for m in members}
    timing["total"] = sum(m.report.wall_time for m in members)
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return summary
