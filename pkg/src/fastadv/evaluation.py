"""Robust-accuracy evaluation suites, sweeps, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, pgd_attack
from .data import Dataset, batches
from .training import TrainSpec, train


@dataclass
class EvalReport:
    clean_acc: float
    per_attack_acc: dict  # attack name -> robust accuracy
    suite_robust_acc: float
    examples: int
    attack_specs: dict  # attack name -> AttackSpec
    seed: int

    def __post_init__(self):
        if self.per_attack_acc:
            lo = min(self.per_attack_acc.values())
            if self.suite_robust_acc > lo + 1e-12:
                raise ValueError("suite robust accuracy exceeds per-attack minimum")


def fgsm_attack_spec(epsilon, clamp_image=True) -> AttackSpec:
    """Single full-step signed-gradient attack from a zero start."""
    return AttackSpec(epsilon=epsilon, alpha=epsilon, steps=1, restarts=1,
                      init="zero", clamp_image=clamp_image)


def mnist_eval_suite(epsilon, steps=50, alpha=0.01, restarts=10, clamp_image=True):
    """Default evaluation suite: multi-restart PGD plus one FGSM candidate."""
    return {
        "pgd": AttackSpec(epsilon=epsilon, alpha=alpha, steps=steps,
                          restarts=restarts, init="uniform", clamp_image=clamp_image),
        "fgsm": fgsm_attack_spec(epsilon, clamp_image),
    }


def evaluate(model, dataset: Dataset, attack_suite, rng, batch_size=256, seed=-1) -> EvalReport:
    """Robust accuracy under every attack in the suite.

    An example is robust iff it is correctly classified clean AND no attack
    in the suite succeeds on it, making robust <= clean exact.
    """
    if not attack_suite:
        raise ValueError("attack suite must be non-empty")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    clean_ok = np.zeros(len(dataset), dtype=bool)
    success = {name: np.zeros(len(dataset), dtype=bool) for name in attack_suite}
    pos = 0
    for batch in batches(dataset, batch_size):
        n = len(batch.y)
        clean_ok[pos : pos + n] = model.predict(batch.x) == batch.y
        for name, spec in attack_suite.items():
            _, s = pgd_attack(model, batch.x, batch.y, spec, rng)
            success[name][pos : pos + n] = s
        pos += n
    any_success = np.zeros(len(dataset), dtype=bool)
    per_attack = {}
    for name, s in success.items():
        per_attack[name] = float(np.mean(clean_ok & ~s))
        any_success |= s
    return EvalReport(
        clean_acc=float(np.mean(clean_ok)),
        per_attack_acc=per_attack,
        suite_robust_acc=float(np.mean(clean_ok & ~any_success)),
        examples=len(dataset),
        attack_specs=dict(attack_suite),
        seed=seed,
    )


@dataclass
class SweepCell:
    alpha: float
    mean_robust_acc: float
    stderr: float
    failures: list = field(default_factory=list)


def stepsize_sweep(base_spec: TrainSpec, alphas, seeds, model_builder, dataset,
                   eval_dataset=None, eval_suite=None, eval_batch=256):
    """Train one model per (alpha, seed) and tabulate robust accuracy.

    Training failures are recorded per cell instead of aborting the sweep.
    """
    if eval_dataset is None:
        eval_dataset = dataset
    rows = []
    for alpha in alphas:
        if not alpha > 0:
            raise ValueError("step sizes must be > 0")
        accs, failures = [], []
        for seed in seeds:
            spec = replace(base_spec, seed=seed,
                           attack=replace(base_spec.attack, alpha=alpha))
            try:
                model = model_builder(seed)
                model, _ = train(spec, model, dataset)
                suite = eval_suite or mnist_eval_suite(
                    spec.attack.epsilon, clamp_image=spec.attack.clamp_image)
                report = evaluate(model, eval_dataset, suite,
                                  np.random.default_rng(seed), eval_batch)
                accs.append(report.suite_robust_acc)
            except Exception as exc:  # cell-local failure, not fatal
                failures.append(f"seed {seed}: {exc}")
        mean = float(np.mean(accs)) if accs else float("nan")
        stderr = float(np.std(accs, ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
        rows.append(SweepCell(alpha=float(alpha), mean_robust_acc=mean,
                              stderr=stderr, failures=failures))
    return rows


def perturbation_histogram(model, dataset: Dataset, attack_spec: AttackSpec,
                           bins, rng, batch_size=256):
    """Histogram of final PGD perturbation coordinates over [-eps, eps].

    ``bins`` must be odd and >= 3 so a central bin straddles zero.
    Returns (counts, bin_edges).
    """
    if bins < 3 or bins % 2 == 0:
        raise ValueError("bins must be an odd integer >= 3")
    eps = attack_spec.epsilon
    edges = np.linspace(-eps, eps, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    for batch in batches(dataset, batch_size):
        delta, _ = pgd_attack(model, batch.x, batch.y, attack_spec, rng)
        c, _ = np.histogram(delta.ravel(), bins=edges)
        counts += c
    return counts, edges


def extract_learning_curves(record):
    """Aligned (epoch, train_loss, fgsm_error, probe_pgd_error) series."""
    return [
        (row.epoch, row.train_loss, 1.0 - row.fgsm_acc, 1.0 - row.probe_pgd_acc)
        for row in record.rows
    ]
