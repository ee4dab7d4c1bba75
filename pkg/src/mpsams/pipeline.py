"""Pretraining, fine-tuning, dataset splitting, ablation and schedule sweeps.

One trainer owns a weight set at a time. Every source of randomness is an
explicit seed: batch order from ``(train.seed, epoch)``, random mask orders
from ``(train.seed, epoch, image index)``, network init from ``train.seed``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from . import metrics as M
from .data import Dataset
from .model import (
    ModelWeights,
    NetConfig,
    autoencoder_config,
    build_module,
    init_weights,
    masked_l2,
    segmentation_loss,
    segmenter_config,
    transfer_encoder,
)
from .patching import PatchGrid
from .schedule import ScheduleParams, masked_count, masking_ratio
from .selection import ClusteringDegenerateError, mps_plan, random_plan

log = logging.getLogger(__name__)

# Published DSC on BUSI with 5% labels, printed next to local results for comparison only.
REFERENCE_DSC = {"base": 0.4584, "base+AMS": 0.4629, "base+MPS": 0.4732, "base+AMS+MPS": 0.5002}

ARMS: dict[str, tuple[str, str]] = {
    "base": ("random", "fixed"),
    "base+AMS": ("random", "adaptive"),
    "base+MPS": ("mps", "fixed"),
    "base+AMS+MPS": ("mps", "adaptive"),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    lr_schedule: Literal["constant", "warmup-cosine"] = "constant"
    warmup_epochs: int | None = None  # None: 5% of epochs, at least 1
    min_lr_ratio: float = 1e-2
    seed: int = 0
    select_best: bool = True
    threshold: float = 0.5
    aggregate: Literal["per_image", "pooled"] = "per_image"
    mask_fill: Literal["constant", "token"] = "constant"
    fill_value: float = 0.0
    plan_cache: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr_schedule not in ("constant", "warmup-cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.mask_fill not in ("constant", "token"):
            raise ValueError(f"unknown mask fill {self.mask_fill!r}")

    @property
    def warmup(self) -> int:
        if self.warmup_epochs is not None:
            return max(1, self.warmup_epochs)
        return max(1, round(0.05 * self.epochs))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based ``epoch``.

    Warmup-cosine: linear ramp ``lr * (epoch + 1) / warmup``, then a
    cosine-squared decay that reaches ``min_lr_ratio * lr`` at the last epoch.
    """
    if cfg.lr_schedule == "constant":
        return cfg.lr
    w = cfg.warmup
    if epoch < w:
        return cfg.lr * (epoch + 1) / w
    floor = cfg.lr * cfg.min_lr_ratio
    span = max(1, cfg.epochs - 1 - w)
    progress = min(1.0, (epoch - w) / span)
    return floor + (cfg.lr - floor) * math.cos(0.5 * math.pi * progress) ** 2


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    labeled_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be non-negative")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")


@dataclass
class Split:
    unlabeled: np.ndarray
    labeled: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate([self.unlabeled, self.labeled]))


def split_dataset(dataset: Dataset | int, spec: SplitSpec) -> Split:
    """Seeded 4-way partition: unlabeled-train, labeled-train, val, test (index arrays)."""
    size = dataset if isinstance(dataset, int) else len(dataset)
    if size < 10:
        raise ValueError(f"dataset of {size} samples is too small to split (need >= 10)")
    n_val, n_test = round(size * spec.val), round(size * spec.test)
    n_train = size - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split {spec} leaves an empty part for {size} samples")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(size)
    train, val, test = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    n_labeled = max(1, round(n_train * spec.labeled_fraction))
    labeled = np.sort(rng.choice(train, n_labeled, replace=False))
    unlabeled = np.sort(np.setdiff1d(train, labeled))
    return Split(unlabeled, labeled, np.sort(val), np.sort(test))


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    weights: ModelWeights
    losses: list[float] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    masked_counts: list[int] = field(default_factory=list)
    snapshots: dict[int, ModelWeights] = field(default_factory=dict)
    fallbacks: int = 0


def _image_key(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()


class MaskPlanner:
    """Produces per-image patch orderings for one pretraining run."""

    def __init__(self, mode: str, grid: PatchGrid, seed: int, method: str = "kmeans", cache: bool = False):
        if mode not in ("mps", "random"):
            raise ValueError(f"unknown selection mode {mode!r}")
        self.mode, self.grid, self.seed, self.method, self.cache = mode, grid, seed, method, cache
        self._cache: dict[str, np.ndarray] = {}
        self.fallbacks = 0

    def order(self, image: np.ndarray, index: int, epoch: int) -> np.ndarray:
        if self.mode == "random":
            return random_plan(self.grid, None, [self.seed, epoch, index]).order
        key = _image_key(image) if self.cache else None
        if key is not None and key in self._cache:
            return self._cache[key]
        try:
            order = mps_plan(image, self.grid.patch_size, method=self.method, seed=self.seed).order
        except ClusteringDegenerateError:
            # featureless image: no lesion/background split exists
            self.fallbacks += 1
            order = random_plan(self.grid, None, [self.seed, epoch, index]).order
        if key is not None:
            self._cache[key] = order
        return order

    def patch_masks(self, images: np.ndarray, indices: Sequence[int], epoch: int, n: int) -> np.ndarray:
        out = np.zeros((len(indices), self.grid.N), dtype=bool)
        for row, (img, idx) in enumerate(zip(images, indices)):
            out[row, self.order(img, int(idx), epoch)[:n]] = True
        return out


def _pixel_masks(patch_masks: np.ndarray, grid: PatchGrid) -> torch.Tensor:
    cells = torch.from_numpy(patch_masks).reshape(-1, 1, grid.rows, grid.cols)
    p = grid.patch_size
    return cells.repeat_interleave(p, dim=2).repeat_interleave(p, dim=3)


def _optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def pretrain(
    unlabeled: Dataset,
    sched: ScheduleParams,
    selection_mode: Literal["mps", "random"],
    train: TrainConfig,
    net: NetConfig = NetConfig(),
    patch_size: int = 4,
    method: str = "kmeans",
    snapshot_epochs: Sequence[int] = (),
    on_epoch: Callable[[int, ModelWeights], None] | None = None,
) -> PretrainResult:
    """Masked-image-modeling pretraining with the masked-patch L2 objective."""
    images = unlabeled.images
    if len(images) == 0:
        raise ValueError("no images to pretrain on")
    grid = PatchGrid.for_image(images.shape[1:], patch_size)
    cfg = autoencoder_config(replace(net, image_size=images.shape[-1]))
    module = build_module(cfg, seed=train.seed)
    token = torch.nn.Parameter(torch.tensor(float(train.fill_value)))
    params = list(module.parameters()) + ([token] if train.mask_fill == "token" else [])
    opt = _optimizer(params, train)
    planner = MaskPlanner(selection_mode, grid, train.seed, method, cache=train.plan_cache)
    result = PretrainResult(ModelWeights.from_module(module, patch_size))
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    wanted = set(snapshot_epochs)

    for epoch in range(1, train.epochs + 1):
        module.train()
        _set_lr(opt, lr_at(epoch - 1, train))
        sigma = masking_ratio(epoch, sched)
        n = masked_count(grid.N, sigma)
        perm = np.random.default_rng([train.seed, epoch]).permutation(len(images))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(perm), train.batch_size)):
            idx = perm[start : start + train.batch_size]
            pm = planner.patch_masks(images[idx], idx, epoch, n)
            x = x_all[idx]
            fill = token if train.mask_fill == "token" else torch.tensor(train.fill_value)
            x_m = torch.where(_pixel_masks(pm, grid), fill, x)
            per_image = masked_l2(module(x_m), x, torch.from_numpy(pm), patch_size)
            loss = per_image.mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite pretraining loss at epoch {epoch}, batch {b}: {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(per_image.detach().sum())
            count += len(idx)
        mean_loss = total / count
        result.losses.append(mean_loss)
        result.masked_counts.append(n)
        result.log_rows.append({"epoch": epoch, "phase": "pretrain", "loss": mean_loss, "sigma": sigma, "n": n})
        if epoch in wanted or on_epoch is not None:
            snap = ModelWeights.from_module(module, patch_size, mask_token=float(token.detach()))
            if epoch in wanted:
                result.snapshots[epoch] = snap
            if on_epoch is not None:
                on_epoch(epoch, snap)
        log.debug("pretrain epoch %d sigma=%.4f n=%d loss=%.5f", epoch, sigma, n, mean_loss)

    result.weights = ModelWeights.from_module(module, patch_size, mask_token=float(token.detach()))
    result.fallbacks = planner.fallbacks
    return result


# --------------------------------------------------------------------------
# fine-tuning and evaluation


@torch.no_grad()
def predict(module_or_weights, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if isinstance(module_or_weights, ModelWeights):
        module = build_module(module_or_weights.config)
        module_or_weights.load_into(module)
    else:
        module = module_or_weights
    module.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32))
        out.append(torch.sigmoid(module(x))[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[-2:], np.float32)


def evaluate(module_or_weights, data: Dataset, threshold: float = 0.5, aggregate: str = "per_image") -> M.SegMetrics:
    probs = predict(module_or_weights, data.images)
    per = [M.compute_metrics(M.binarize(p, threshold), g) for p, g in zip(probs, data.masks)]
    return M.aggregate(per, aggregate)


@dataclass
class FinetuneResult:
    weights: ModelWeights
    val_dsc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    transferred: int = 0
    log_rows: list[dict] = field(default_factory=list)


def finetune(
    labeled: Dataset,
    val: Dataset,
    weights: ModelWeights | None,
    train: TrainConfig,
    net: NetConfig | None = None,
) -> FinetuneResult:
    """Supervised segmentation training from transferred encoder weights.

    ``weights=None`` trains from random initialization (the fully supervised
    baseline). The weights with the best validation DSC are returned when
    ``train.select_best`` is set, otherwise the final ones.
    """
    if len(labeled) == 0:
        raise ValueError("no labeled images")
    base = net if net is not None else (weights.config if weights is not None else NetConfig())
    cfg = segmenter_config(replace(base, image_size=labeled.images.shape[-1]))
    target = init_weights(cfg, seed=train.seed + 1)
    transferred = 0
    if weights is not None:
        target, transferred = transfer_encoder(weights, target)
    module = build_module(cfg)
    target.load_into(module)
    opt = _optimizer(module.parameters(), train)

    x_all = torch.from_numpy(np.ascontiguousarray(labeled.images, dtype=np.float32))
    y_all = torch.from_numpy(labeled.masks[:, None].astype(np.float32))
    result = FinetuneResult(ModelWeights.from_module(module), transferred=transferred)
    best = -1.0
    for epoch in range(train.epochs):
        module.train()
        _set_lr(opt, lr_at(epoch, train))
        perm = np.random.default_rng([train.seed, 10_000 + epoch]).permutation(len(labeled))
        total = 0.0
        for b, start in enumerate(range(0, len(perm), train.batch_size)):
            idx = perm[start : start + train.batch_size]
            loss = segmentation_loss(module(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch + 1}, batch {b}: {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        m = evaluate(module, val, train.threshold, train.aggregate)
        result.val_dsc.append(m.dsc)
        result.log_rows.append(
            {"epoch": epoch + 1, "phase": "finetune", "loss": total / len(labeled), "dsc": m.dsc, "ppv": m.ppv, "sen": m.sen}
        )
        if not train.select_best or m.dsc > best:
            best = m.dsc
            result.best_epoch = epoch + 1
            result.weights = ModelWeights.from_module(module)
    if train.epochs == 0:
        result.weights = ModelWeights.from_module(module)
    return result


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class RunConfig:
    """Everything an ablation arm or sweep needs besides the data."""

    net: NetConfig = NetConfig()
    schedule: ScheduleParams = ScheduleParams()
    pretrain: TrainConfig = TrainConfig()
    finetune: TrainConfig = TrainConfig(epochs=30, batch_size=4, lr_schedule="warmup-cosine")
    patch_size: int = 4
    method: str = "kmeans"
    base_ratio: float = 0.75


def arm_schedule(arm: str, run: RunConfig) -> tuple[str, ScheduleParams]:
    selection, mode = ARMS[arm]
    if mode == "fixed":
        return selection, replace(run.schedule, mode="fixed", fixed_ratio=run.base_ratio)
    return selection, replace(run.schedule, mode="adaptive")


@dataclass
class ArmResult:
    arm: str
    per_seed: dict[int, M.SegMetrics] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)

    def mean_std(self, key: str) -> tuple[float, float]:
        vals = [getattr(m, key) for m in self.per_seed.values()]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))


@dataclass
class AblationReport:
    arms: dict[str, ArmResult] = field(default_factory=dict)

    def mean(self, arm: str, key: str = "dsc") -> float:
        return self.arms[arm].mean_std(key)[0]

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "seeds", "dsc_mean", "dsc_std", "ppv_mean", "ppv_std", "sen_mean", "sen_std",
                    "reference_dsc", "status"])
        for name, arm in self.arms.items():
            row = [name, len(arm.per_seed)]
            for key in ("dsc", "ppv", "sen"):
                row += [f"{v:.6f}" for v in arm.mean_std(key)]
            status = "ok" if not arm.errors else "failed: " + "; ".join(f"seed {s}: {e}" for s, e in arm.errors.items())
            w.writerow(row + [REFERENCE_DSC.get(name, ""), status])
        return buf.getvalue()

    def per_seed_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "seed", "dsc", "ppv", "sen", "tp", "fp", "fn", "tn"])
        for name, arm in self.arms.items():
            for seed, m in arm.per_seed.items():
                w.writerow([name, seed, f"{m.dsc:.6f}", f"{m.ppv:.6f}", f"{m.sen:.6f}", m.tp, m.fp, m.fn, m.tn])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'arm':<14}{'DSC':>16}{'PPV':>16}{'Sen':>16}{'ref DSC':>11}"]
        for name, arm in self.arms.items():
            cells = "".join(f"{m:>9.4f}±{s:<6.4f}" for m, s in (arm.mean_std(k) for k in ("dsc", "ppv", "sen")))
            lines.append(f"{name:<14}{cells}{REFERENCE_DSC.get(name, float('nan')):>11.4f}")
        return "\n".join(lines) + "\n"


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def run_arm(arm: str, corpus: Dataset, split: Split, run: RunConfig, seed: int) -> tuple[M.SegMetrics, PretrainResult, FinetuneResult]:
    selection, sched = arm_schedule(arm, run)
    pre = pretrain(corpus.subset(split.train), sched, selection, _seeded(run.pretrain, seed), run.net, run.patch_size, run.method)
    ft = finetune(corpus.subset(split.labeled), corpus.subset(split.val), pre.weights, _seeded(run.finetune, seed), run.net)
    test = evaluate(ft.weights, corpus.subset(split.test), run.finetune.threshold, run.finetune.aggregate)
    return test, pre, ft


def ablate(
    corpus: Dataset,
    spec: SplitSpec,
    run: RunConfig,
    seeds: Sequence[int],
    arms: Sequence[str] = tuple(ARMS),
    on_result: Callable[[str, int, M.SegMetrics], None] | None = None,
) -> AblationReport:
    """Pretrain + fine-tune every arm for every seed and collect test metrics.

    The split is fixed by ``spec.seed``; each training seed is shared by all
    arms so they start from identical weights and batch orders.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    split = split_dataset(corpus, spec)
    report = AblationReport({a: ArmResult(a) for a in arms})
    for seed in seeds:
        for arm in arms:
            try:
                test, _, _ = run_arm(arm, corpus, split, run, seed)
            except (TrainingError, ValueError, RuntimeError) as exc:
                log.error("arm %s seed %d failed: %s", arm, seed, exc)
                report.arms[arm].errors[seed] = str(exc)
                continue
            report.arms[arm].per_seed[seed] = test
            if on_result is not None:
                on_result(arm, seed, test)
    return report


@dataclass
class SweepRow:
    pretrain_epochs: int
    dsc: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.dsc))


def schedule_sweep(
    corpus: Dataset,
    epochs_list: Sequence[int],
    run: RunConfig,
    spec: SplitSpec = SplitSpec(),
    seeds: Sequence[int] = (0,),
    arm: str = "base+AMS+MPS",
) -> list[SweepRow]:
    """Test DSC after fine-tuning from checkpoints taken at each listed pretraining epoch.

    One pretraining run per seed, long enough for the largest entry, supplies
    all the checkpoints.
    """
    epochs_list = list(epochs_list)
    if not epochs_list or epochs_list != sorted(epochs_list):
        raise ValueError("epochs_list must be non-empty and ascending")
    split = split_dataset(corpus, spec)
    selection, sched = arm_schedule(arm, run)
    rows = [SweepRow(e, []) for e in epochs_list]
    for seed in seeds:
        pre_cfg = replace(run.pretrain, epochs=max(epochs_list), seed=seed)
        pre = pretrain(corpus.subset(split.train), sched, selection, pre_cfg, run.net, run.patch_size, run.method,
                       snapshot_epochs=epochs_list)
        for row in rows:
            start = pre.snapshots.get(row.pretrain_epochs, pre.weights) if row.pretrain_epochs else None
            ft = finetune(corpus.subset(split.labeled), corpus.subset(split.val), start, _seeded(run.finetune, seed), run.net)
            row.dsc.append(evaluate(ft.weights, corpus.subset(split.test)).dsc)
    return rows


def sweep_csv(rows: Sequence[SweepRow], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pretrain_epochs", "dsc_mean", "dsc_per_seed"])
    for r in rows:
        w.writerow([r.pretrain_epochs, f"{r.mean:.6f}", " ".join(f"{d:.6f}" for d in r.dsc)])
    return buf.getvalue()


def log_csv(rows: Sequence[dict], comment: str | None = None) -> str:
    """Per-run metrics log with columns epoch, phase, loss, dsc, ppv, sen, sigma, n."""
    cols = ["epoch", "phase", "loss", "dsc", "ppv", "sen", "sigma", "n"]
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.8g}" if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()
