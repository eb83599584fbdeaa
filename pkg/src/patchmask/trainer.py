"""Mini-batch SGD with Nesterov momentum and plateau-driven learning-rate decay."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import resnet
from . import tensor_ops as ops
from .errors import ConfigurationError, TrainingAborted
from .sampler import extract_refs

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr_initial: float = 0.1
    lr_decay_factor: float = 10.0
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout_keep: float = 0.5
    max_epochs: int = 120
    min_epochs: int = 80
    lr_floor: float = 1e-5
    seed: int = 0
    dtype: str = "float32"
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch normalization)")
        for name in ("lr_initial", "lr_decay_factor", "dropout_keep", "lr_floor"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must exceed 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.plateau_patience < 1:
            raise ConfigurationError("plateau_patience must be at least 1")
        if not 1 <= self.min_epochs <= self.max_epochs:
            raise ConfigurationError("need 1 <= min_epochs <= max_epochs")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    epoch: int = 0
    decays: int = 0
    lr: float = 0.1
    velocity: dict = field(default_factory=dict)
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    history: list = field(default_factory=list)
    rng: np.random.Generator | None = None
    # plateau bookkeeping
    plateau_best: float = float("inf")
    plateau_wait: int = 0


def sgd_nesterov_step(params, grads, state, config):
    """In-place update of every learnable array named in ``grads``.

    ``v <- mu*v - lr*(g + wd*theta)``; ``theta <- theta + mu*v - lr*(g + wd*theta)``.
    """
    arrays = params.named_arrays()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name} at epoch {state.epoch}")
    mu, lr, wd = config.momentum, state.lr, config.weight_decay
    for name, g in grads.items():
        theta = arrays[name]
        step = g + wd * theta if wd else g
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = mu * v - lr * step
        state.velocity[name] = v.astype(theta.dtype, copy=False)
        theta += (mu * v - lr * step).astype(theta.dtype, copy=False)
    params.touch()
    return params, state


def plateau_scheduler(val_loss, state, config):
    """Divide the learning rate by ``lr_decay_factor`` after ``plateau_patience``
    consecutive epochs without an improvement larger than ``plateau_min_delta``.

    Returns True when the rate was reduced. The rate is always
    ``lr_initial / factor**k``.
    """
    if val_loss < state.plateau_best - config.plateau_min_delta:
        state.plateau_best = val_loss
        state.plateau_wait = 0
        return False
    state.plateau_wait += 1
    if state.plateau_wait >= config.plateau_patience:
        state.decays += 1
        state.lr = config.lr_initial / config.lr_decay_factor ** state.decays
        state.plateau_wait = 0
        return True
    return False


@dataclass
class TrainResult:
    params: resnet.ParameterSet
    history: list
    best_epoch: int
    best_val_loss: float
    checkpoint_path: str | None = None

    def history_csv(self):
        return history_to_csv(self.history)


def history_to_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def evaluate_loss(params, x, y, batch_size=1024):
    """Eval-mode mean cross entropy and accuracy (tie at 0.5 counts as positive)."""
    probs = np.empty((len(x), 2), dtype=params.dtype)
    for s in range(0, len(x), batch_size):
        probs[s:s + batch_size] = resnet.forward(params, x[s:s + batch_size], "eval")
    loss, _ = ops.cross_entropy_loss(probs, y)
    acc = float(np.mean((probs[:, 1] >= 0.5).astype(int) == y))
    return loss, acc


def epoch_batches(n, batch_size, rng):
    """Shuffled index batches for one epoch; the partial last batch is kept
    unless it holds a single sample, which batch normalization cannot use."""
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def _checkpoint_copy(params):
    # what a PMCK roundtrip would give back, so in-memory and on-disk bests agree
    return params.astype(np.float32).astype(params.dtype)


def train_arrays(x_train, y_train, x_val, y_val, network_config, config, out_dir=None, init=None):
    """Train on in-memory patches; returns the best-validation-loss checkpoint."""
    if len(x_val) == 0:
        raise ConfigurationError("validation set is empty")
    if len(x_train) < 2:
        raise ConfigurationError("training set needs at least 2 patches")
    dtype = np.dtype(config.dtype)
    x_train = np.asarray(x_train, dtype=dtype)
    x_val = np.asarray(x_val, dtype=dtype)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = init.astype(dtype) if init is not None else resnet.build(
        network_config, seed=int(seeds[0].generate_state(1)[0]), dtype=dtype)
    state = TrainState(lr=config.lr_initial, rng=np.random.default_rng(seeds[1]))
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "best.pmck")
    best = None

    n = len(x_train)
    while True:
        total, seen = 0.0, 0
        for idx in epoch_batches(n, config.batch_size, state.rng):
            loss, _, grads = resnet.loss_and_gradients(
                params, x_train[idx], y_train[idx], rng=state.rng, dropout_keep=config.dropout_keep)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite training loss at epoch {state.epoch}",
                                      _partial(best, state, ckpt_path))
            try:
                sgd_nesterov_step(params, grads, state, config)
            except TrainingAborted as exc:
                raise TrainingAborted(str(exc), _partial(best, state, ckpt_path)) from None
            if not params.all_finite():
                raise TrainingAborted(f"non-finite parameters after update at epoch {state.epoch}",
                                      _partial(best, state, ckpt_path))
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / seen
        val_loss, val_acc = evaluate_loss(params, x_val, y_val, config.eval_batch_size)
        if not np.isfinite(val_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {state.epoch}",
                                  _partial(best, state, ckpt_path))
        lr_used = state.lr
        state.history.append({"epoch": state.epoch, "train_loss": train_loss, "val_loss": val_loss,
                              "val_accuracy": val_acc, "lr": lr_used})
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f lr %g",
                 state.epoch, train_loss, val_loss, val_acc, lr_used)
        if val_loss < state.best_val_loss:
            state.best_val_loss, state.best_epoch = val_loss, state.epoch
            best = _checkpoint_copy(params)
            if ckpt_path:
                resnet.save_checkpoint(best, ckpt_path)
        plateau_scheduler(val_loss, state, config)
        state.epoch += 1
        if state.epoch >= config.max_epochs:
            break
        if state.lr < config.lr_floor and state.epoch >= config.min_epochs:
            break
    return TrainResult(best, state.history, state.best_epoch, state.best_val_loss, ckpt_path)


def _partial(best, state, ckpt_path):
    if best is None:
        return None
    return TrainResult(best, list(state.history), state.best_epoch, state.best_val_loss, ckpt_path)


def train(sample_set, scenes, network_config, config, out_dir=None, bands=None):
    """Train from a SampleSet whose refs point into ``scenes`` (id -> BandStack)."""
    missing = [s for s in sample_set.scene_ids() if s not in scenes]
    if missing:
        raise ConfigurationError(f"sample set references unknown scenes {missing}")
    train_refs, val_refs = sample_set.split("train"), sample_set.split("val")
    if not val_refs:
        raise ConfigurationError("validation set is empty")
    x_tr, y_tr = extract_refs(scenes, train_refs, bands)
    x_va, y_va = extract_refs(scenes, val_refs, bands)
    if x_tr.shape[1] != network_config.input_channels:
        raise ConfigurationError(f"patches have {x_tr.shape[1]} channels; network expects "
                                 f"{network_config.input_channels}")
    result = train_arrays(x_tr, y_tr, x_va, y_va, network_config, config, out_dir)
    if out_dir is not None:
        write_run_outputs(out_dir, result, network_config, config, sample_set)
    return result


def write_run_outputs(out_dir, result, network_config, config, sample_set=None):
    with open(os.path.join(out_dir, "history.csv"), "w") as fh:
        fh.write(result.history_csv())
    manifest = {
        "train_config": config.to_dict(),
        "network_config": network_config.to_dict(),
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }
    if sample_set is not None:
        sample_set.write(os.path.join(out_dir, "samples.txt"))
        manifest["sample_manifest_sha256"] = sample_set.checksum()
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
