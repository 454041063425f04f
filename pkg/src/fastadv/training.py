"""Training loops: standard, FGSM, PGD, and free adversarial training.

All four variants share minibatch SGD with a triangular cyclic learning
rate. Adversarial variants additionally run the catastrophic-overfitting
probe at epoch boundaries and can early-stop back to the best checkpoint.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import (
    AttackSpec,
    clamp_to_image,
    delta_gradient,
    init_delta,
    pgd_attack,
    project_linf,
)
from .autodiff import NonFiniteError, Tape, Tensor
from .data import Dataset, batches, num_batches

TRAIN_METHODS = ("standard", "fgsm", "pgd", "free")


class DivergenceError(Exception):
    """Training loss became non-finite."""

    def __init__(self, epoch, message="non-finite training loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


def cyclic_lr(t, total_epochs, max_lr):
    """Triangular schedule: 0 -> max_lr at total_epochs/2 -> 0.

    ``t`` is a real-valued epoch fraction so the schedule can be evaluated
    per minibatch.
    """
    if not 0 <= t <= total_epochs:
        raise ValueError(f"t={t} outside [0, {total_epochs}]")
    half = total_epochs / 2.0
    if t <= half:
        return max_lr * t / half
    return max_lr * (total_epochs - t) / half


@dataclass
class DetectorSpec:
    """Probe config for catastrophic-overfitting detection (PGD on one fixed
    training minibatch at every epoch boundary)."""

    pgd_steps: int = 5
    restarts: int = 1
    alpha: Optional[float] = None  # default 2.5 * epsilon / pgd_steps
    probe_batch_index: int = 0
    floor: float = 0.20
    drop_margin: float = 0.50

    def __post_init__(self):
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")

    def attack_spec(self, epsilon, clamp_image):
        alpha = self.alpha if self.alpha is not None else 2.5 * epsilon / self.pgd_steps
        return AttackSpec(
            epsilon=epsilon,
            alpha=alpha,
            steps=self.pgd_steps,
            restarts=self.restarts,
            init="uniform",
            clamp_image=clamp_image,
        )


def detect_catastrophic_overfitting(probe_acc, peak_acc, detector: DetectorSpec):
    """Trigger when probe accuracy falls below the floor or drops more than
    drop_margin below the running peak."""
    return probe_acc < detector.floor or (peak_acc - probe_acc) > detector.drop_margin


@dataclass
class TrainSpec:
    method: str = "fgsm"
    epochs: int = 10
    batch_size: int = 128
    max_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: Optional[AttackSpec] = None
    replay: int = 1  # minibatch replays, free training only
    early_stop: Optional[DetectorSpec] = None
    seed: int = 0
    shuffle: bool = True
    monitor_examples: int = 512  # fixed subset for epoch-end clean/FGSM metrics

    def __post_init__(self):
        if self.method not in TRAIN_METHODS:
            raise ValueError(f"unknown training method {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.method != "standard" and self.attack is None:
            raise ValueError(f"method {self.method!r} requires an attack spec")
        if self.method == "fgsm" and self.attack.steps != 1:
            raise ValueError("fgsm training requires attack.steps == 1")
        if self.method == "pgd" and self.attack.steps < 1:
            raise ValueError("pgd training requires attack.steps >= 1")
        if self.method == "free":
            if self.replay < 1:
                raise ValueError("free training requires replay >= 1")
            if self.epochs // self.replay < 1:
                raise ValueError("free training requires epochs >= replay")


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    clean_acc: float
    fgsm_acc: float
    probe_pgd_acc: float


@dataclass
class RunRecord:
    spec: TrainSpec
    rows: list = field(default_factory=list)
    early_stop_epoch: Optional[int] = None
    best_epoch: Optional[int] = None
    gradient_passes: int = 0
    model_updates: int = 0
    final_metrics: Optional[dict] = None
    best_metrics: Optional[dict] = None

    def add_row(self, row: EpochRow):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.rows.append(row)


class SGD:
    """SGD with momentum and coupled weight decay:
    v <- momentum * v + (grad + wd * param); param <- param - lr * v."""

    def __init__(self, params, momentum=0.0, weight_decay=0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            update = lr * v
            if not np.all(np.isfinite(update)):
                raise NonFiniteError(f"non-finite update for {name}")
            p.data = p.data - update.astype(p.data.dtype)


def _theta_backward(model, x, y, delta=None):
    """Mean-CE loss at x (+ delta) with gradients into model parameters."""
    tape = Tape()
    xt = Tensor(x if delta is None else x + delta.astype(x.dtype))
    loss = tape.softmax_cross_entropy(model.forward(tape, xt), y)
    tape.backward(loss)
    return float(loss.data)


def _shared_backward(model, x, y, delta):
    """One backward pass yielding both the delta gradient and parameter
    gradients (free training's simultaneous update)."""
    x = np.asarray(x)
    tape = Tape()
    dt = Tensor(delta.astype(x.dtype), requires_grad=True)
    adv = tape.add(Tensor(x), dt)
    loss = tape.softmax_cross_entropy(model.forward(tape, adv), y)
    tape.backward(loss)
    if not np.all(np.isfinite(dt.grad)):
        raise NonFiniteError("non-finite perturbation gradient")
    return dt.grad, float(loss.data)


def _accuracy(model, x, y):
    return float(np.mean(model.predict(x) == y))


class _Monitor:
    """Epoch-boundary metrics on fixed subsets of the training data."""

    def __init__(self, dataset, spec, rng):
        n = min(spec.monitor_examples, len(dataset))
        self.x = dataset.images[:n]
        self.y = dataset.labels[:n]
        self.attack = spec.attack
        self.clamp = spec.attack.clamp_image if spec.attack else True
        if spec.attack is not None:
            detector = spec.early_stop or DetectorSpec()
            self.detector = detector
            self.probe_attack = detector.attack_spec(spec.attack.epsilon, self.clamp)
            bs = spec.batch_size
            start = detector.probe_batch_index * bs
            if start >= len(dataset):
                start = 0
            self.probe_x = dataset.images[start : start + bs]
            self.probe_y = dataset.labels[start : start + bs]
        else:
            self.detector = None
        self.rng = rng

    def fgsm_acc(self, model):
        if self.attack is None:
            return float("nan")
        eps = self.attack.epsilon
        spec = AttackSpec(epsilon=eps, alpha=eps, steps=1, init="zero", clamp_image=self.clamp)
        _, success = pgd_attack(model, self.x, self.y, spec, self.rng)
        clean_ok = model.predict(self.x) == self.y
        return float(np.mean(clean_ok & ~success))

    def probe_acc(self, model):
        if self.detector is None:
            return float("nan")
        _, success = pgd_attack(model, self.probe_x, self.probe_y, self.probe_attack, self.rng)
        clean_ok = model.predict(self.probe_x) == self.probe_y
        return float(np.mean(clean_ok & ~success))

    def metrics(self, model):
        return {
            "clean_acc": _accuracy(model, self.x, self.y),
            "fgsm_acc": self.fgsm_acc(model),
            "probe_pgd_acc": self.probe_acc(model),
        }


def _rng_streams(seed, *names):
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def train(spec: TrainSpec, model, dataset: Dataset):
    """Dispatch to the configured training loop. Returns (model, RunRecord)."""
    if spec.method == "free":
        return _train_free(spec, model, dataset)
    return _train_epochwise(spec, model, dataset)


def train_standard(spec, model, dataset):
    assert spec.method == "standard"
    return _train_epochwise(spec, model, dataset)


def train_fgsm(spec, model, dataset):
    assert spec.method == "fgsm"
    return _train_epochwise(spec, model, dataset)


def train_pgd(spec, model, dataset):
    assert spec.method == "pgd"
    return _train_epochwise(spec, model, dataset)


def train_free(spec, model, dataset):
    assert spec.method == "free"
    return _train_free(spec, model, dataset)


def _epoch_end(spec, model, monitor, record, epoch, lr, losses, best):
    row_metrics = monitor.metrics(model)
    record.add_row(
        EpochRow(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            **row_metrics,
        )
    )
    probe = row_metrics["probe_pgd_acc"]
    stop = False
    if monitor.detector is not None and spec.early_stop is not None:
        if detect_catastrophic_overfitting(probe, best["peak"], monitor.detector):
            # best checkpoint stays strictly before the trigger epoch
            record.early_stop_epoch = epoch
            stop = True
        else:
            if best["epoch"] is None or probe > best["probe"]:
                best.update(epoch=epoch, probe=probe, snap=model.snapshot(), metrics=row_metrics)
            best["peak"] = max(best["peak"], probe)
    else:
        best.update(epoch=epoch, probe=probe, snap=None, metrics=row_metrics)
    return stop


def _finish(model, record, best):
    record.final_metrics = record.rows[-1].__dict__.copy() if record.rows else None
    if record.early_stop_epoch is not None and best["snap"] is not None:
        model.restore(best["snap"])
        record.best_epoch = best["epoch"]
        record.best_metrics = best["metrics"]
    else:
        record.best_epoch = best["epoch"]
        record.best_metrics = best["metrics"]
    return model, record


def _train_epochwise(spec, model, dataset):
    rngs = _rng_streams(spec.seed, "shuffle", "attack", "monitor")
    monitor = _Monitor(dataset, spec, rngs["monitor"])
    record = RunRecord(spec=spec)
    opt = SGD(model.params, spec.momentum, spec.weight_decay)
    nb = num_batches(len(dataset), spec.batch_size)
    best = {"epoch": None, "probe": -1.0, "peak": -1.0, "snap": None, "metrics": None}
    carried = None

    for epoch in range(spec.epochs):
        losses = []
        lr = 0.0
        for batch in batches(dataset, spec.batch_size, spec.shuffle, rngs["shuffle"]):
            t = epoch + batch.index / nb
            lr = cyclic_lr(t, spec.epochs, spec.max_lr)
            x, y = batch.x, batch.y
            if spec.method == "standard":
                loss = _theta_backward(model, x, y)
                record.gradient_passes += 1
            else:
                a = spec.attack
                delta = init_delta(a, x.shape, rngs["attack"], carried).astype(x.dtype)
                delta = project_linf(delta, a.epsilon)
                if a.clamp_image:
                    delta = clamp_to_image(x, delta)
                for _ in range(a.steps):
                    g, _ = delta_gradient(model, x, y, delta)
                    record.gradient_passes += 1
                    delta = project_linf(delta + a.alpha * np.sign(g), a.epsilon)
                    if a.clamp_image:
                        delta = clamp_to_image(x, delta)
                if a.init == "previous":
                    carried = delta
                model.zero_grads()
                loss = _theta_backward(model, x, y, delta)
                record.gradient_passes += 1
            if not np.isfinite(loss):
                raise DivergenceError(epoch + 1)
            opt.step(lr)
            record.model_updates += 1
            model.zero_grads()
            losses.append(loss)
        # log the lr of the epoch's last minibatch
        if _epoch_end(spec, model, monitor, record, epoch + 1, lr, losses, best):
            break
    return _finish(model, record, best)


def _train_free(spec, model, dataset):
    rngs = _rng_streams(spec.seed, "shuffle", "attack", "monitor")
    monitor = _Monitor(dataset, spec, rngs["monitor"])
    record = RunRecord(spec=spec)
    opt = SGD(model.params, spec.momentum, spec.weight_decay)
    nb = num_batches(len(dataset), spec.batch_size)
    best = {"epoch": None, "probe": -1.0, "peak": -1.0, "snap": None, "metrics": None}
    a = spec.attack
    m = spec.replay
    outer = spec.epochs // m
    # persistent perturbation, sized to the configured batch size
    sample_shape = dataset.images.shape[1:]
    delta = np.zeros((spec.batch_size,) + sample_shape, dtype=dataset.images.dtype)
    total_updates = spec.epochs * nb
    update = 0

    for outer_pass in range(outer):
        losses = []
        lr = 0.0
        for batch in batches(dataset, spec.batch_size, spec.shuffle, rngs["shuffle"]):
            x, y = batch.x, batch.y
            n = len(y)
            for _ in range(m):
                t = spec.epochs * update / total_updates
                lr = cyclic_lr(t, spec.epochs, spec.max_lr)
                g, loss = _shared_backward(model, x, y, delta[:n])
                record.gradient_passes += 1
                if not np.isfinite(loss):
                    raise DivergenceError((outer_pass + 1) * m)
                step = delta[:n] + a.epsilon * np.sign(g)
                step = project_linf(step, a.epsilon)
                if a.clamp_image:
                    step = clamp_to_image(x, step)
                delta[:n] = step
                opt.step(lr)
                record.model_updates += 1
                model.zero_grads()
                update += 1
                losses.append(loss)
        epoch_equiv = (outer_pass + 1) * m
        if _epoch_end(spec, model, monitor, record, epoch_equiv, lr, losses, best):
            break
    return _finish(model, record, best)
