"""l-infinity perturbation machinery: init schemes, FGSM step, PGD with restarts."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, cross_entropy_values

INIT_SCHEMES = ("zero", "uniform", "hypercube_surface", "normal", "previous")


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    alpha: float = 0.0
    steps: int = 0
    restarts: int = 1
    init: str = "zero"
    clamp_image: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps > 0 and not self.alpha > 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init!r}")

    def with_restarts(self, restarts):
        return replace(self, restarts=restarts)


def project_linf(delta, epsilon):
    """Componentwise clip into [-epsilon, epsilon]."""
    return np.clip(delta, -epsilon, epsilon)


def clamp_to_image(x, delta):
    """Shrink delta so x + delta stays in [0, 1]; never grows |delta|."""
    return np.clip(delta, -x, 1.0 - x)


def init_delta(spec: AttackSpec, batch_shape, rng=None, carried_delta=None):
    """Draw the starting perturbation for one attack run."""
    eps = spec.epsilon
    if spec.init == "zero":
        return np.zeros(batch_shape)
    if spec.init == "previous":
        if carried_delta is None:
            raise ValueError("init='previous' requires carried_delta")
        n = batch_shape[0]
        if carried_delta.shape[1:] != tuple(batch_shape[1:]):
            raise ValueError("carried_delta shape incompatible with batch")
        if len(carried_delta) >= n:
            return carried_delta[:n].copy()
        out = np.zeros(batch_shape)
        out[: len(carried_delta)] = carried_delta
        return out
    if rng is None:
        raise ValueError(f"init={spec.init!r} requires an rng")
    if spec.init == "uniform":
        return rng.uniform(-eps, eps, size=batch_shape)
    if spec.init == "hypercube_surface":
        return (eps / 2.0) * np.sign(rng.standard_normal(batch_shape))
    if spec.init == "normal":
        return project_linf((eps / 2.0) * rng.standard_normal(batch_shape), eps)
    raise ValueError(spec.init)


def delta_gradient(model, x, y, delta):
    """d loss / d delta of the mean cross-entropy at x + delta (one backward pass).

    Model parameters are frozen for the pass so attacks never touch
    parameter gradient slots.
    """
    x = np.asarray(x)
    flags = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        tape = Tape()
        dt = Tensor(np.asarray(delta, dtype=x.dtype), requires_grad=True)
        adv = tape.add(Tensor(x), dt)
        loss = tape.softmax_cross_entropy(model.forward(tape, adv), y)
        tape.backward(loss)
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
    if not np.all(np.isfinite(dt.grad)):
        raise NonFiniteError("non-finite attack gradient")
    return dt.grad, float(loss.data)


def fgsm_step(model, x, y, delta, alpha, epsilon, clamp_image=False):
    """One signed-gradient ascent step followed by l-inf projection.

    With alpha == epsilon and a zero init this is exactly the one-shot FGSM
    perturbation epsilon * sign(grad_x loss).
    """
    g, _ = delta_gradient(model, x, y, delta)
    delta = project_linf(delta + alpha * np.sign(g), epsilon)
    if clamp_image:
        delta = clamp_to_image(x, delta)
    return delta


def _final_losses(model, x, y, delta):
    logits = model.logits(x + delta)
    losses = cross_entropy_values(logits, y)
    preds = logits.argmax(axis=1)
    return losses, preds


def pgd_attack(model, x, y, spec: AttackSpec, rng=None, carried_delta=None):
    """PGD with random restarts.

    Returns (delta, success) where delta holds, per example, the max-loss
    final point across restarts, and success marks examples misclassified
    by at least one restart's final point.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    best_delta = None
    best_loss = None
    success = np.zeros(len(y), dtype=bool)
    for _ in range(spec.restarts):
        delta = init_delta(spec, x.shape, rng, carried_delta).astype(x.dtype)
        delta = project_linf(delta, spec.epsilon)
        if spec.clamp_image:
            delta = clamp_to_image(x, delta)
        for _ in range(spec.steps):
            delta = fgsm_step(model, x, y, delta, spec.alpha, spec.epsilon, spec.clamp_image)
        losses, preds = _final_losses(model, x, y, delta)
        if not np.all(np.isfinite(losses)):
            raise NonFiniteError("non-finite loss during attack")
        success |= preds != y
        if best_delta is None:
            best_delta, best_loss = delta, losses
        else:
            better = losses > best_loss
            best_delta = np.where(
                better.reshape((-1,) + (1,) * (x.ndim - 1)), delta, best_delta
            )
            best_loss = np.maximum(best_loss, losses)
    return best_delta, success
