"""Training loop: Adam with plateau LR halving, per-epoch CSV metrics, and
best-validation checkpointing.

Runs are deterministic for a fixed seed: the batch order comes from one
seeded generator, gradient reduction order is fixed by the tape, and every
batch is evaluated as one vectorized forward. wall_seconds in metrics.csv
is the one nondeterministic column, kept for run diagnostics.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import model as mdl
from . import nbody

METRICS_HEADER = ["epoch", "train_mse", "val_mse", "lr", "wall_seconds"]


@dataclass
class RunConfig:
    dataset: str
    out_dir: str
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = mdl.ModelConfig.from_dict(self.model)
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_factor < 1:
            raise ValueError(f"lr_factor must be in (0,1), got {self.lr_factor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


@dataclass
class MetricsRow:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    wall_seconds: float

    def __post_init__(self):
        if self.train_mse < 0 or self.val_mse < 0:
            raise ValueError("mse must be non-negative")


@dataclass
class TrainResult:
    best_val_mse: float
    final_train_mse: float
    rows: list
    checkpoint_path: str
    metrics_path: str
    aborted: bool
    param_count: int


def _stack(samples: list):
    xs = np.array([s["positions"] for s in samples])
    vs = np.array([s["velocities"] for s in samples])
    qs = np.array([s["charges"] for s in samples])
    ys = np.array([s["target_positions"] for s in samples])
    return xs, vs, qs, ys


def evaluate_mse(params: dict, config: mdl.ModelConfig, data,
                 batch_size: int = 64) -> float:
    """Mean squared prediction error over every node coordinate."""
    xs, vs, qs, ys = data
    total, count = 0.0, 0
    for k in range(0, len(xs), batch_size):
        pred = mdl.predict_batch(params, config, xs[k:k + batch_size],
                                 vs[k:k + batch_size], qs[k:k + batch_size])
        diff = pred - ys[k:k + batch_size]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] = params[k] - self.lr * scale * self.m[k] / (
                np.sqrt(self.v[k]) + self.eps)


def _train_step(params, config, batch, adam):
    xs, vs, qs, ys = batch
    tape = ad.Tape()
    pvars = {k: tape.leaf(v) for k, v in params.items()}
    pred = mdl.forward_tape(tape, pvars, xs, vs, qs, config)
    loss = mdl.mse_loss(tape, pred, ys)
    loss_val = float(loss.value)
    if not np.isfinite(loss_val):
        return loss_val, False
    grads = ad.backward_grads(tape, loss)
    gdict = {k: grads.of(pvars[k]) for k in params}
    if any(not np.all(np.isfinite(g)) for g in gdict.values()):
        return loss_val, False
    adam.step(params, gdict)
    return loss_val, True


def train(rc: RunConfig, log=print) -> TrainResult:
    samples = nbody.read_dataset(rc.dataset)
    if not samples:
        raise ValueError(f"dataset {rc.dataset} is empty")
    splits = nbody.split_dataset(samples)
    train_set = splits["train"] or samples
    val_set = splits["val"] or train_set
    train_data = _stack(train_set)
    val_data = _stack(val_set)

    params = mdl.init_params(rc.model, rc.seed)
    n_params = mdl.count_params(params)
    log(f"training {rc.model.variant} | {n_params} parameters | "
        f"{len(train_set)} train / {len(val_set)} val samples")

    os.makedirs(rc.out_dir, exist_ok=True)
    ckpt_path = os.path.join(rc.out_dir, "checkpoint.json")
    metrics_path = os.path.join(rc.out_dir, "metrics.csv")
    ckpt.save_checkpoint(ckpt_path, rc.model, params,
                         extra={"epoch": 0, "val_mse": None, "seed": rc.seed})

    adam = _Adam(params, rc.lr, rc.beta1, rc.beta2, rc.adam_eps)
    rng = np.random.default_rng(rc.seed)
    best_val = np.inf
    bad_epochs = 0
    rows = []
    aborted = False
    train_mse = np.inf
    start = time.perf_counter()

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch in range(1, rc.epochs + 1):
            order = rng.permutation(len(train_set))
            sq_sum, n_seen = 0.0, 0
            for k in range(0, len(order), rc.batch_size):
                idx = order[k:k + rc.batch_size]
                batch = tuple(a[idx] for a in train_data)
                loss_val, ok = _train_step(params, rc.model, batch, adam)
                if not ok:
                    log(f"abort: non-finite loss/gradient at epoch {epoch}; "
                        f"keeping last good checkpoint")
                    aborted = True
                    break
                sq_sum += loss_val * batch[0].shape[0]
                n_seen += batch[0].shape[0]
            if aborted:
                break
            train_mse = sq_sum / n_seen
            val_mse = evaluate_mse(params, rc.model, val_data)
            if not np.isfinite(val_mse):
                log(f"abort: non-finite validation loss at epoch {epoch}")
                aborted = True
                break
            wall = time.perf_counter() - start
            rows.append(MetricsRow(epoch, train_mse, val_mse, adam.lr, wall))
            writer.writerow([epoch, repr(train_mse), repr(val_mse),
                             repr(adam.lr), f"{wall:.3f}"])
            fh.flush()
            if val_mse < best_val:
                best_val = val_mse
                bad_epochs = 0
                ckpt.save_checkpoint(
                    ckpt_path, rc.model, params,
                    extra={"epoch": epoch, "val_mse": val_mse, "seed": rc.seed})
            else:
                bad_epochs += 1
                if bad_epochs >= rc.patience:
                    adam.lr = max(adam.lr * rc.lr_factor, rc.min_lr)
                    bad_epochs = 0

    return TrainResult(best_val_mse=float(best_val),
                       final_train_mse=float(train_mse),
                       rows=rows, checkpoint_path=ckpt_path,
                       metrics_path=metrics_path, aborted=aborted,
                       param_count=n_params)


def read_metrics(path: str) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        last_epoch = 0
        for rec in reader:
            row = MetricsRow(int(rec[0]), float(rec[1]), float(rec[2]),
                             float(rec[3]), float(rec[4]))
            if row.epoch <= last_epoch:
                raise ValueError(f"epochs not strictly increasing at {row.epoch}")
            last_epoch = row.epoch
            rows.append(row)
    return rows


def evaluate_checkpoint(checkpoint_path: str, dataset_path: str,
                        split: str = "test") -> dict:
    """Test-set MSE of a saved model; returns the eval report dict."""
    config, params, _ = ckpt.load_checkpoint(checkpoint_path)
    samples = nbody.read_dataset(dataset_path)
    if not samples:
        raise ValueError(f"dataset {dataset_path} is empty")
    n_particles = len(samples[0]["positions"])
    chosen = nbody.split_dataset(samples)[split] if split != "all" else samples
    if not chosen:
        raise ValueError(f"split {split!r} of {dataset_path} is empty")
    mse = evaluate_mse(params, config, _stack(chosen))
    return {"test_mse": mse, "n_samples": len(chosen),
            "field": samples[0]["meta"]["field"],
            "n_particles": n_particles, "split": split}
