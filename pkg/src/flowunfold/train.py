"""Losses, Adam, and the two training loops (likelihood pretraining and
end-to-end fine-tuning) with early stopping on a validation metric.

Datasets are duck-typed: anything with ``train``, ``val``, ``test`` arrays of
shape (N, C, H, W), values in [-0.5, 0.5].  Measurement pairs are regenerated
every epoch from per-sample sub-seeds, so noise acts as augmentation while
runs stay bit-reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fnmatch import fnmatchcase

import numpy as np

from .diff import ParamStore, zero_grads
from .errors import ConfigError, DataError, ShapeError
from .flow import LOG_2PI, FlowModel
from .numerics import Prng, derive_seed
from .operators import TASKS, make_measurement, operator_for_task
from .unfold import UnrolledNet

__all__ = [
    "TrainConfig",
    "AdamState",
    "EarlyStopper",
    "nll_loss",
    "nll_loss_grad",
    "mse_loss",
    "psnr",
    "adam_update",
    "make_lr_map",
    "pretrain",
    "train_unrolled",
]

# sub-seed stream tags
_TAG_INIT = 1
_TAG_SHUFFLE = 2
_TAG_TRAIN_NOISE = 3
_TAG_VAL_NOISE = 4


@dataclass
class TrainConfig:
    task: str = "denoise"
    sigma_n: float = 0.1
    mask_w: int = 0  # 0: ceil(0.3 min(H, W))
    sigma_b: float = 1.0
    blur_radius: int = 0  # 0: ceil(3 sigma_b)
    folds: int = 3
    levels: int = 2
    depth: int = 4
    hidden: int = 16
    lr: float = 1e-5
    scalar_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.lr <= 0 or self.scalar_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.sigma_n < 0:
            raise ConfigError(f"sigma_n must be >= 0, got {self.sigma_n}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.eps_adam <= 0:
            raise ConfigError("eps_adam must be > 0")
        for field in ("folds", "levels", "depth", "hidden", "batch_size", "max_epochs"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        return self


# -- losses and metric -----------------------------------------------------------


def nll_loss(batch: np.ndarray, flow: FlowModel) -> float:
    """Negative log-likelihood in nats per dimension, averaged over the batch."""
    lp = flow.log_prob_batch(batch)
    return float(-lp.mean() / flow.n)


def nll_loss_grad(batch: np.ndarray, flow: FlowModel) -> float:
    """nll_loss plus gradient accumulation into the flow's parameters."""
    b = batch.shape[0]
    z, ld, ctx = flow.forward_batch(batch)
    lp = -0.5 * flow.n * LOG_2PI - 0.5 * (z * z).sum(axis=1) + ld
    scale = 1.0 / (b * flow.n)
    flow.backward_forward(ctx, z * scale, np.full(b, -scale))
    return float(-lp.mean() / flow.n)


def mse_loss(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """Mean squared difference over all elements."""
    if x_hat.shape != x_true.shape:
        raise ShapeError.mismatch("mse_loss inputs", x_hat.shape, x_true.shape)
    d = x_hat - x_true
    return float((d * d).mean())


def psnr(x_hat: np.ndarray, x_true: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse) in dB, capped at 99.0 for near-zero error."""
    mse = mse_loss(x_hat, x_true)
    if mse < 1e-12:
        return 99.0
    return 10.0 * math.log10(peak * peak / mse)


# -- optimizer --------------------------------------------------------------------


class AdamState:
    """First/second moment buffers mirroring a ParamStore, plus step count."""

    def __init__(self, store: ParamStore):
        self.m = {p.name: np.zeros_like(p.value) for p in store}
        self.v = {p.name: np.zeros_like(p.value) for p in store}
        self.t = 0


def make_lr_map(cfg: TrainConfig) -> dict[str, float]:
    """Scalar step/shrinkage parameters train faster than flow weights."""
    return {"*.mu": cfg.scalar_lr, "*.rho": cfg.scalar_lr, "*": cfg.lr}


def _lr_for(name: str, lr_map: dict[str, float]) -> float:
    for pattern, lr in lr_map.items():
        if fnmatchcase(name, pattern):
            return lr
    raise ConfigError(f"no learning-rate pattern matches parameter {name!r}")


def adam_update(
    store: ParamStore,
    state: AdamState,
    lr_map: dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step on every parameter; zeroes gradients."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p in store:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value -= _lr_for(p.name, lr_map) * step
    zero_grads(store)


# -- early stopping ----------------------------------------------------------------


class EarlyStopper:
    """Tracks the best validation value; snapshots parameters when it improves
    and restores that snapshot at the end, so training returns the best epoch
    rather than the last one."""

    def __init__(self, store: ParamStore, patience: int):
        self.store = store
        self.patience = patience
        self.best_val = math.inf
        self.best_epoch = 0
        self._since = 0
        self._snap = None

    def update(self, epoch: int, val: float) -> bool:
        """Record one epoch's validation value; True means stop now."""
        if val < self.best_val:
            self.best_val = val
            self.best_epoch = epoch
            self._snap = self.store.snapshot()
            self._since = 0
            return False
        self._since += 1
        return self._since >= self.patience

    def restore_best(self) -> None:
        if self._snap is not None:
            self.store.restore(self._snap)


# -- shared loop helpers ------------------------------------------------------------


def _shuffled_indices(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = Prng(derive_seed(seed, _TAG_SHUFFLE, epoch))
    return np.argsort(rng.uniform_array(n), kind="stable")


def _batches(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


def _emit(log, epoch: int, train_loss: float, val_loss: float, t0: float) -> None:
    if log is not None:
        log(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{time.monotonic() - t0:.3f}")


def _check_split(dataset, name: str) -> np.ndarray:
    arr = getattr(dataset, name)
    if arr is None or len(arr) == 0:
        raise DataError(f"dataset has an empty {name} split")
    return np.asarray(arr, dtype=float)


# -- pretraining ---------------------------------------------------------------------


def pretrain(dataset, cfg: TrainConfig, log=None, on_step=None) -> FlowModel:
    """Maximum-likelihood training of a single flow prior.

    Actnorms are data-initialized on the first batch; Adam then minimizes
    nats/dim with early stopping on validation NLL.  Returns the
    best-validation model.
    """
    cfg.validate()
    train = _check_split(dataset, "train")
    val = _check_split(dataset, "val")
    shape = train.shape[1:]

    store = ParamStore()
    flow = FlowModel(
        shape,
        cfg.levels,
        cfg.depth,
        cfg.hidden,
        store,
        init="random",
        rng=Prng(derive_seed(cfg.seed, _TAG_INIT)),
    )
    first = train[_shuffled_indices(len(train), cfg.seed, 0)[: cfg.batch_size]]
    if len(first) < 2:
        raise DataError("pretraining needs at least 2 training images")
    flow.data_init(first)

    state = AdamState(store)
    lr_map = make_lr_map(cfg)
    stopper = EarlyStopper(store, cfg.patience)
    t0 = time.monotonic()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = _shuffled_indices(len(train), cfg.seed, epoch - 1)
        total, count = 0.0, 0
        for batch_idx in _batches(order, cfg.batch_size):
            loss = nll_loss_grad(train[batch_idx], flow)
            adam_update(store, state, lr_map, cfg.beta1, cfg.beta2, cfg.eps_adam)
            total += loss * len(batch_idx)
            count += len(batch_idx)
            if on_step is not None:
                on_step(step, loss)
            step += 1
        val_loss = nll_loss(val, flow)
        _emit(log, epoch, total / count, val_loss, t0)
        if stopper.update(epoch, val_loss):
            break
    stopper.restore_best()
    return flow


# -- end-to-end fine-tuning ------------------------------------------------------------


def _measure_batch(op, images, sigma_n, seed, tag, epoch, indices):
    out = np.empty_like(images)
    for row, idx in enumerate(indices):
        rng = Prng(derive_seed(seed, tag, epoch, int(idx)))
        out[row] = make_measurement(op, images[row], sigma_n, rng)
    return out


def train_unrolled(
    dataset, cfg: TrainConfig, pretrained: FlowModel | None, log=None
) -> UnrolledNet:
    """Fine-tune the K-fold unrolled network end to end on MSE.

    Every fold starts as an independent copy of ``pretrained`` when given
    (weight untying), or as the identity flow when None (the from-scratch
    ablation arm).  Measurements are synthesized on the fly; validation
    measurements reuse fixed per-sample sub-seeds so early stopping sees a
    stable metric.
    """
    cfg.validate()
    train = _check_split(dataset, "train")
    val = _check_split(dataset, "val")
    shape = train.shape[1:]

    op = operator_for_task(cfg.task, shape, cfg.mask_w, cfg.sigma_b, cfg.blur_radius)
    net = UnrolledNet(shape, cfg.folds, cfg.levels, cfg.depth, cfg.hidden)
    if pretrained is not None:
        if pretrained.arch() != (tuple(shape), cfg.levels, cfg.depth, cfg.hidden):
            raise ConfigError(
                f"pretrained flow {pretrained.arch()} does not match config "
                f"({tuple(shape)}, {cfg.levels}, {cfg.depth}, {cfg.hidden})"
            )
        net.load_pretrained_prior(pretrained)

    val_y = _measure_batch(
        op, val, cfg.sigma_n, cfg.seed, _TAG_VAL_NOISE, 0, np.arange(len(val))
    )

    state = AdamState(net.store)
    lr_map = make_lr_map(cfg)
    stopper = EarlyStopper(net.store, cfg.patience)
    t0 = time.monotonic()
    for epoch in range(1, cfg.max_epochs + 1):
        order = _shuffled_indices(len(train), cfg.seed, epoch - 1)
        total, count = 0.0, 0
        for batch_idx in _batches(order, cfg.batch_size):
            x_true = train[batch_idx]
            y = _measure_batch(
                op, x_true, cfg.sigma_n, cfg.seed, _TAG_TRAIN_NOISE, epoch - 1, batch_idx
            )
            x_hat, pipe = net.reconstruct_batch_grad(y, op)
            diff = x_hat - x_true
            loss = float((diff * diff).mean())
            net.reconstruct_backward(pipe, 2.0 * diff / diff.size)
            adam_update(net.store, state, lr_map, cfg.beta1, cfg.beta2, cfg.eps_adam)
            total += loss * len(batch_idx)
            count += len(batch_idx)
        val_loss = _val_mse(net, val, val_y, op, cfg.batch_size)
        _emit(log, epoch, total / count, val_loss, t0)
        if stopper.update(epoch, val_loss):
            break
    stopper.restore_best()
    return net


def _val_mse(net, val, val_y, op, batch_size) -> float:
    total = 0.0
    for start in range(0, len(val), batch_size):
        x_hat = net.reconstruct_batch(val_y[start : start + batch_size], op)
        d = x_hat - val[start : start + batch_size]
        total += float((d * d).sum())
    return total / val.size
