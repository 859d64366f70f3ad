"""AdamW training loop with class-balanced NoiseMix epochs.

The optimizer step consumes one logical minibatch; inside a minibatch the
forward/backward pass runs in accumulation chunks so the seq x seq attention
buffers stay small enough for modest RAM. Chunking does not change the
gradient: chunk losses are weighted by their share of the minibatch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .model import STConfig, forward, init, predict
from .noisemix import NoiseMixConfig, balanced_epoch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 300
    lr: float = 3e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    use_noisemix: bool = True
    noisemix: NoiseMixConfig = field(default_factory=NoiseMixConfig)
    selection: str = "best_val_accuracy"  # or "last"
    grad_accum_chunk: int = 32
    lr_schedule: str = "constant"  # or "warmup_cosine"
    warmup_steps: int = 10
    lr_min: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("need lr > 0 and weight_decay >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.selection not in ("last", "best_val_accuracy"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if self.lr_schedule not in ("constant", "warmup_cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.warmup_steps < 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need warmup_steps >= 0 and 0 <= lr_min <= lr")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate for optimizer step `step` (0-based) of `total_steps`.

    "constant" returns cfg.lr. "warmup_cosine" ramps linearly to cfg.lr over
    cfg.warmup_steps steps, then follows a half cosine down to cfg.lr_min.
    """
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, total_steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


class AdamWState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}


def adamw_step(params, state: AdamWState, cfg: TrainConfig, lr: float | None = None):
    """One decoupled-weight-decay Adam update from the accumulated gradients.

    `lr` overrides cfg.lr for this step (used by learning-rate schedules).
    """
    if lr is None:
        lr = cfg.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.named_parameters():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = p.data - lr * (update + cfg.weight_decay * p.data)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # {epoch, train_loss, val_accuracy, wall_ms}

    def to_dict(self, include_timing=True):
        rows = []
        for row in self.epochs:
            out = dict(row)
            if not include_timing:
                out.pop("wall_ms", None)
            rows.append(out)
        return {"epochs": rows}


def _minibatch_step(xs, ys, params, st_cfg, t_cfg, rng):
    """Forward/backward one minibatch in accumulation chunks; returns loss."""
    params.zero_grad()
    n = len(xs)
    total = 0.0
    for lo in range(0, n, t_cfg.grad_accum_chunk):
        xc = xs[lo : lo + t_cfg.grad_accum_chunk]
        yc = ys[lo : lo + t_cfg.grad_accum_chunk]
        logits = forward(xc, params, st_cfg, training=True, rng=rng)
        loss = nn.cross_entropy(logits, yc) * (len(xc) / n)
        nn.backward(loss)
        total += float(loss.data)
    return total


def evaluate_accuracy(params, st_cfg, xs, ys, chunk=64):
    preds = predict(xs, params, st_cfg, chunk=chunk)
    return float(np.mean(preds == np.asarray(ys)))


def train(ds_train, ds_val, st_cfg: STConfig, t_cfg: TrainConfig,
          params=None, log=None):
    """Train a model; returns (ModelParams, TrainReport).

    Fully deterministic given the seeds in the configs. Model selection
    follows t_cfg.selection; "best_val_accuracy" requires a non-empty
    validation set.
    """
    if ds_train.registry is not ds_val.registry and \
            ds_train.registry != ds_val.registry:
        raise ConfigError("train and val datasets must share a registry")
    if t_cfg.selection == "best_val_accuracy" and len(ds_val) == 0:
        raise ConfigError("validation set is empty but selection needs it")
    for c in range(len(ds_train.registry)):
        if len(ds_train.indices_of_class(c)) == 0:
            raise ConfigError(
                f"class {ds_train.registry.name_of(c)!r} absent from training data"
            )

    if params is None:
        params = init(st_cfg, seed=t_cfg.seed)
    rng = np.random.default_rng(t_cfg.seed + 1)
    epoch_rng = np.random.default_rng(t_cfg.noisemix.seed)
    report = TrainReport()
    x_val = ds_val.as_matrix() if len(ds_val) else None
    y_val = ds_val.labels if len(ds_val) else None
    best_acc, best_params = -1.0, None

    epoch_size = (
        t_cfg.noisemix.per_epoch_per_class * len(ds_train.registry)
        if t_cfg.use_noisemix
        else len(ds_train)
    )
    steps_per_epoch = max(1, -(-epoch_size // t_cfg.batch_size))
    total_steps = t_cfg.epochs * steps_per_epoch
    step = 0

    for epoch in range(t_cfg.epochs):
        t0 = time.perf_counter()
        epoch_ds = (
            balanced_epoch(ds_train, t_cfg.noisemix, epoch_rng)
            if t_cfg.use_noisemix
            else ds_train
        )
        xs = epoch_ds.as_matrix()
        ys = np.asarray(epoch_ds.labels)
        order = rng.permutation(len(xs))
        xs, ys = xs[order], ys[order]
        losses = []
        for lo in range(0, len(xs), t_cfg.batch_size):
            losses.append(
                _minibatch_step(
                    xs[lo : lo + t_cfg.batch_size],
                    ys[lo : lo + t_cfg.batch_size],
                    params, st_cfg, t_cfg, rng,
                )
            )
            adamw_step(params, _state_of(params, t_cfg), t_cfg,
                       lr=lr_at(step, total_steps, t_cfg))
            step += 1
        val_acc = (
            evaluate_accuracy(params, st_cfg, x_val, y_val)
            if x_val is not None
            else float("nan")
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_accuracy": val_acc,
            "wall_ms": wall_ms,
        }
        report.epochs.append(row)
        if log:
            log(f"epoch {epoch}: loss {row['train_loss']:.4f} "
                f"val_acc {val_acc:.4f} ({wall_ms:.0f} ms)")
        if t_cfg.selection == "best_val_accuracy" and val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
    _clear_state(params)
    if t_cfg.selection == "best_val_accuracy" and best_params is not None:
        return best_params, report
    return params, report


# Optimizer state is cached on the params object so `train` can be re-entered
# per minibatch without threading the state through every call site.
_STATE_ATTR = "_adamw_state"


def _state_of(params, t_cfg):
    state = getattr(params, _STATE_ATTR, None)
    if state is None:
        state = AdamWState(params)
        setattr(params, _STATE_ATTR, state)
    return state


def _clear_state(params):
    if hasattr(params, _STATE_ATTR):
        delattr(params, _STATE_ATTR)


# ---------------------------------------------------------------------------
# Nearest-centroid baseline (reporting reference for the transformer)


class NearestCentroid:
    def __init__(self):
        self.centroids = None

    def fit(self, ds):
        xs = ds.as_matrix()
        self.centroids = np.stack(
            [xs[ds.indices_of_class(c)].mean(axis=0) for c in range(len(ds.registry))]
        )
        return self

    def predict(self, xs):
        xs = np.asarray(xs, dtype=np.float64)
        d2 = ((xs[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
        return d2.argmin(axis=1)

    def accuracy(self, ds):
        return float(np.mean(self.predict(ds.as_matrix()) == ds.labels))


# ---------------------------------------------------------------------------
# Throughput benchmark


def benchmark_throughput(st_cfg: STConfig, t_cfg: TrainConfig, n_batches=10, seed=0):
    """Median/p90 wall-clock per batch for forward and forward+backward."""
    rng = np.random.default_rng(seed)
    params = init(st_cfg, seed=seed)
    fwd_ms, fwdbwd_ms = [], []
    for _ in range(n_batches):
        xs = rng.random((t_cfg.batch_size, st_cfg.seq_len))
        ys = rng.integers(0, st_cfg.n_classes, t_cfg.batch_size)
        t0 = time.perf_counter()
        for lo in range(0, len(xs), t_cfg.grad_accum_chunk):
            forward(xs[lo : lo + t_cfg.grad_accum_chunk], params, st_cfg,
                    training=False)
        fwd_ms.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        _minibatch_step(xs, ys, params, st_cfg, t_cfg, rng)
        fwdbwd_ms.append((time.perf_counter() - t0) * 1e3)
    params.zero_grad()

    def stats(samples):
        return {
            "samples_ms": samples,
            "median_ms": float(np.median(samples)),
            "p90_ms": float(np.percentile(samples, 90)),
        }

    return {
        "batch_size": t_cfg.batch_size,
        "config": st_cfg.to_dict(),
        "forward": stats(fwd_ms),
        "forward_backward": stats(fwdbwd_ms),
    }
