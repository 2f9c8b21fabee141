"""Hybrid Dice+BCE loss, Adam with L2 decay, cosine annealing, early stopping,
and the decoupled two-label training orchestration."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import AugmentationConfig, SplitAssignment, augment, batch_iter, sample_rng, stack_batch
from .nn.tensor import Parameter, Tensor, as_tensor, make_result
from .nn.unet import UNetConfig, UNetModel, backward
from .preprocess import BONE_WINDOW, SliceSample, WindowSpec, prepare_slices
from .volumes import Study

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    eps_dice: float = 1e-6
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not self.eps_dice > 0:
            raise ValueError("eps_dice must be > 0")
        if not 0 <= self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in [0, 0.5)")


def _check_shapes(pred: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return gt


def dice_loss(pred, gt, eps: float = 1e-6) -> Tensor:
    """1 - (2 sum(p*g) + eps) / (sum p + sum g + eps), with sums over the whole batch."""
    pred = as_tensor(pred)
    g = _check_shapes(pred, gt)
    p = pred.data
    inter = float((p * g).sum())
    denom = float(p.sum() + g.sum()) + eps
    num = 2.0 * inter + eps
    value = 1.0 - num / denom

    def bw(up):
        return ((-(2.0 * g * denom - num) / denom**2) * up,)

    return make_result(np.asarray(value, dtype=pred.dtype), (pred,), bw, "dice_loss")


def bce_loss(pred, gt, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [clamp, 1 - clamp]."""
    pred = as_tensor(pred)
    g = _check_shapes(pred, gt)
    p = pred.data
    pc = np.clip(p, clamp, 1.0 - clamp)
    n = p.size
    value = -float((g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)).sum()) / n
    inside = (p >= clamp) & (p <= 1.0 - clamp)

    def bw(up):
        d = (-g / pc + (1.0 - g) / (1.0 - pc)) / n
        return (np.where(inside, d, 0.0).astype(p.dtype) * up,)

    return make_result(np.asarray(value, dtype=pred.dtype), (pred,), bw, "bce_loss")


def hybrid_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    pred = as_tensor(pred)
    d = dice_loss(pred, gt, cfg.eps_dice)
    b = bce_loss(pred, gt, cfg.bce_clamp)
    lam = cfg.lam
    value = lam * d.data + (1.0 - lam) * b.data
    return make_result(
        np.asarray(value, dtype=pred.dtype), (d, b), lambda up: (lam * up, (1.0 - lam) * up), "hybrid_loss"
    )


# ---------------------------------------------------------------------------
# optimizer, schedule, early stopping


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """Classic Adam with the L2 penalty added to the gradient."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {p.name} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {p.name} {p.data.shape}")
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


@dataclass(frozen=True)
class ScheduleConfig:
    lr0: float = 1e-4
    t_max: int = 20
    eta_min: float = 0.0

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.lr0 < 0 or self.eta_min < 0:
            raise ValueError("learning rates must be >= 0")


def cosine_lr(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    if not 0 <= epoch <= cfg.t_max:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.t_max}]")
    return cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * epoch / cfg.t_max)) / 2.0


@dataclass
class EarlyStopState:
    patience: int = 10
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    stopped: bool = False


def early_stop_update(state: EarlyStopState, val_loss: float) -> str:
    """Returns "continue" or "stop". Improvement means strictly below the best so far."""
    if state.stopped:
        return "stop"
    if not math.isfinite(val_loss):
        raise NonFiniteLossError(f"validation loss is {val_loss}")
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= state.patience:
        state.stopped = True
        return "stop"
    return "continue"


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    unet: UNetConfig = UNetConfig()
    loss: LossConfig = LossConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    batch_size: int = 8
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    channels: tuple[int, ...] = (0, 1)
    precision: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if len(self.channels) != self.unet.in_channels:
            raise ValueError(f"{len(self.channels)} input channels selected but unet.in_channels={self.unet.in_channels}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    stopped_epoch: int | None = None
    best_epoch: int = -1
    best_val_loss: float = math.inf
    seconds: float = 0.0

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(i, a, b, c) for i, (a, b, c) in enumerate(zip(self.train_loss, self.val_loss, self.lr))]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        lines += [f"{e},{a:.6g},{b:.6g},{c:.6g}" for e, a, b, c in self.rows()]
        return "\n".join(lines) + "\n"


def _checked(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{what} is {value}")
    return value


def evaluate_loss(model: UNetModel, samples: Sequence[SliceSample], cfg: TrainConfig) -> float:
    """Sample-weighted mean of per-batch hybrid loss in eval mode."""
    total, count = 0.0, 0
    for batch in batch_iter(samples, cfg.batch_size, shuffle=False):
        x, y = stack_batch(batch, cfg.channels, cfg.dtype)
        pred = model.predict(x, batch_size=len(x))
        total += float(hybrid_loss(pred, y, cfg.loss).data) * len(batch)
        count += len(batch)
    return total / count


def train_model(
    train_samples: Sequence[SliceSample],
    val_samples: Sequence[SliceSample],
    cfg: TrainConfig = TrainConfig(),
    model_seed: int = 0,
    shuffle_seed: int = 0,
    augment_seed: int = 0,
) -> tuple[UNetModel, TrainReport]:
    """Train one U-Net and return it loaded with its best-validation weights."""
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must be non-empty")
    sources = {s.label_source for s in train_samples} | {s.label_source for s in val_samples}
    if len(sources) != 1:
        raise ValueError(f"all samples must share one label source, got {sorted(sources)}")

    start = time.perf_counter()
    model = UNetModel(cfg.unet, seed=model_seed, dtype=cfg.dtype)
    opt = AdamState(cfg.schedule.lr0, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    stopper = EarlyStopState(cfg.patience)
    report = TrainReport()
    best_state = model.state_copy()
    indices = list(range(len(train_samples)))

    for epoch in range(cfg.schedule.t_max):
        opt.lr = cosine_lr(epoch, cfg.schedule)
        model.train()
        running, seen = 0.0, 0
        for batch_idx in batch_iter(indices, cfg.batch_size, shuffle_seed, epoch):
            batch = [
                augment(train_samples[i], sample_rng(augment_seed, epoch, i), cfg.augmentation) for i in batch_idx
            ]
            x, y = stack_batch(batch, cfg.channels, cfg.dtype)
            loss = hybrid_loss(model.forward(x), y, cfg.loss)
            value = _checked(float(loss.data), f"training loss at epoch {epoch}")
            backward(model, loss)
            adam_step(model.parameters(), opt)
            report.batch_losses.append(value)
            running += value * len(batch)
            seen += len(batch)
        val = _checked(evaluate_loss(model, val_samples, cfg), f"validation loss at epoch {epoch}")
        report.train_loss.append(running / seen)
        report.val_loss.append(val)
        report.lr.append(opt.lr)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, opt.lr, running / seen, val)
        if val < stopper.best_val_loss:
            best_state = model.state_copy()
            report.best_epoch = epoch
        if early_stop_update(stopper, val) == "stop":
            report.stopped_epoch = epoch
            break

    report.best_val_loss = stopper.best_val_loss
    model.load_state(best_state)
    model.eval()
    report.seconds = time.perf_counter() - start
    return model, report


@dataclass(frozen=True)
class Seeds:
    cohort: int = 0
    split: int = 0
    init: int = 0
    shuffle: int = 0
    augment: int = 0


def build_datasets(
    studies: Sequence[Study],
    split: SplitAssignment,
    label_source: str,
    input_size: int,
    window: WindowSpec = BONE_WINDOW,
) -> tuple[list[SliceSample], list[SliceSample]]:
    """Background-filtered train and val slices for one label source.

    Filtering uses the A|B union, so both sources share one slice inventory.
    """
    by_id = {s.patient_id: s for s in studies}
    unknown = split.all_ids() - set(by_id)
    if unknown:
        raise ValueError(f"split references unknown patients {sorted(unknown)}")
    train = [x for pid in split.train for x in prepare_slices(by_id[pid], label_source, input_size, window)]
    val = [x for pid in split.val for x in prepare_slices(by_id[pid], label_source, input_size, window)]
    return train, val


@dataclass
class DualResult:
    model_a: UNetModel
    model_b: UNetModel
    report_a: TrainReport
    report_b: TrainReport


def train_dual(
    studies: Sequence[Study],
    split: SplitAssignment,
    cfg: TrainConfig = TrainConfig(),
    seeds: Seeds = Seeds(),
    window: WindowSpec = BONE_WINDOW,
) -> DualResult:
    """Two independent models, identical except for the annotation source they fit."""
    out = {}
    for source in ("A", "B"):
        train, val = build_datasets(studies, split, source, cfg.unet.input_size, window)
        if not train or not val:
            raise ValueError(f"label source {source}: empty training or validation slice set")
        out[source] = train_model(train, val, cfg, seeds.init, seeds.shuffle, seeds.augment)
    return DualResult(out["A"][0], out["B"][0], out["A"][1], out["B"][1])


def with_channels(cfg: TrainConfig, channels: tuple[int, ...]) -> TrainConfig:
    """Same recipe restricted to a subset of input channels (0 = CT, 1 = PET)."""
    return replace(cfg, channels=tuple(channels), unet=replace(cfg.unet, in_channels=len(channels)))
