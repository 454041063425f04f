"""Command-line entry point: train | eval | sweep | diagnose | lr-find."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from .autodiff import FLOAT_DTYPES, cross_entropy_values
from .config import ConfigError, ExperimentConfig
from .data import load_mnist, synthetic_margin_dataset
from .evaluation import evaluate, mnist_eval_suite, perturbation_histogram, stepsize_sweep
from .models import build_linear, build_mnist_cnn, init_parameters
from .training import DivergenceError, train

METRICS_COLUMNS = ["epoch", "lr", "train_loss", "clean_acc", "fgsm_acc", "probe_pgd_acc"]
METRICS_VERSION = 1


def _load_datasets(cfg, dtype):
    ds = cfg.data["dataset"]
    if ds["kind"] == "mnist":
        root = cfg.dataset_dir()
        train_set = load_mnist(root, "train", dtype=dtype)
        test_set = load_mnist(root, "test", dtype=dtype)
        return train_set, test_set
    rng = np.random.default_rng(np.random.SeedSequence((cfg.data["seed"], 0xDA7A)))
    train_set, w = synthetic_margin_dataset(ds["n"], ds["d"], ds["margin"], ds["eps_max"], rng)
    test_set, _ = synthetic_margin_dataset(
        ds["test_n"], ds["d"], ds["margin"], ds["eps_max"], rng, split="test", w=w
    )
    test_set.oracle_w = w  # not part of the schema; handy for diagnostics
    train_set.images = train_set.images.astype(dtype)
    test_set.images = test_set.images.astype(dtype)
    return train_set, test_set


def _build_model(cfg, train_set, dtype):
    kind = cfg.data["model"]["kind"]
    seed_rng = np.random.default_rng(np.random.SeedSequence((cfg.data["seed"], 0x1217)))
    if kind == "mnist_cnn":
        model = build_mnist_cnn(dtype=dtype)
    elif kind == "linear":
        d = int(np.prod(train_set.images.shape[1:]))
        classes = cfg.data["model"]["num_classes"] or int(train_set.labels.max()) + 1
        model = build_linear(d, classes, dtype=dtype)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return init_parameters(model, seed_rng)


def _eval_suite(cfg):
    ev = cfg.data["eval"]
    clamp = cfg.data["train"]["attack"]["clamp_image"]
    return mnist_eval_suite(
        cfg.data["train"]["attack"]["epsilon"],
        steps=ev["pgd_steps"],
        alpha=ev["alpha"],
        restarts=ev["restarts"],
        clamp_image=clamp,
    )


def write_metrics_csv(path, record):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in record.rows:
            writer.writerow([
                row.epoch,
                repr(float(row.lr)),
                repr(float(row.train_loss)),
                repr(float(row.clean_acc)),
                repr(float(row.fgsm_acc)),
                repr(float(row.probe_pgd_acc)),
            ])


def _report_dict(report):
    return {
        "clean_acc": report.clean_acc,
        "per_attack_acc": report.per_attack_acc,
        "suite_robust_acc": report.suite_robust_acc,
        "examples": report.examples,
        "attack_specs": {k: v.__dict__ for k, v in report.attack_specs.items()},
        "seed": report.seed,
    }


def _write_summary(out, name, payload, cfg):
    payload = dict(payload)
    payload["config"] = cfg.data  # every artifact embeds its resolved config
    payload["metrics_version"] = METRICS_VERSION
    with open(os.path.join(out, name), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _prepare_out(cfg):
    out = cfg.data["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config_resolved.json"), "w") as f:
        f.write(cfg.to_json())
    return out


def cmd_train(cfg):
    t0 = time.monotonic()
    dtype = FLOAT_DTYPES[cfg.data["precision"]]
    out = _prepare_out(cfg)
    train_set, test_set = _load_datasets(cfg, dtype)
    model = _build_model(cfg, train_set, dtype)
    spec = cfg.train_spec()
    try:
        model, record = train(spec, model, train_set)
    except DivergenceError as exc:
        _write_summary(out, "run_summary.json", {"error": str(exc), "failed_epoch": exc.epoch}, cfg)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    write_metrics_csv(os.path.join(out, "metrics.csv"), record)
    state = {"epoch": record.rows[-1].epoch if record.rows else 0,
             "early_stop_epoch": record.early_stop_epoch,
             "best_epoch": record.best_epoch}
    ckpt.save_checkpoint(os.path.join(out, "final.ckpt"), model, state)
    ckpt.save_checkpoint(os.path.join(out, "best.ckpt"), model, state)
    subset = cfg.data["eval"]["subset"]
    eval_set = test_set.subset(subset) if subset else test_set
    rng = np.random.default_rng(np.random.SeedSequence((cfg.data["seed"], 0x3A71)))
    report = evaluate(model, eval_set, _eval_suite(cfg), rng,
                      cfg.data["eval"]["batch_size"], seed=cfg.data["seed"])
    _write_summary(out, "run_summary.json", {
        "eval": _report_dict(report),
        "early_stop_epoch": record.early_stop_epoch,
        "gradient_passes": record.gradient_passes,
        "model_updates": record.model_updates,
    }, cfg)
    with open(os.path.join(out, "timings.json"), "w") as f:
        json.dump({"wall_seconds": time.monotonic() - t0}, f)
    print(f"train done: clean={report.clean_acc:.4f} robust={report.suite_robust_acc:.4f}")
    return 0


def cmd_eval(cfg, checkpoint_path):
    dtype = FLOAT_DTYPES[cfg.data["precision"]]
    out = _prepare_out(cfg)
    train_set, test_set = _load_datasets(cfg, dtype)
    model = _build_model(cfg, train_set, dtype)
    ckpt.load_checkpoint(checkpoint_path, model)
    subset = cfg.data["eval"]["subset"]
    eval_set = test_set.subset(subset) if subset else test_set
    rng = np.random.default_rng(np.random.SeedSequence((cfg.data["seed"], 0x3A71)))
    report = evaluate(model, eval_set, _eval_suite(cfg), rng,
                      cfg.data["eval"]["batch_size"], seed=cfg.data["seed"])
    _write_summary(out, "eval_summary.json", {"eval": _report_dict(report)}, cfg)
    print(f"eval done: clean={report.clean_acc:.4f} robust={report.suite_robust_acc:.4f}")
    return 0


def cmd_sweep(cfg, alphas, seeds):
    dtype = FLOAT_DTYPES[cfg.data["precision"]]
    out = _prepare_out(cfg)
    train_set, test_set = _load_datasets(cfg, dtype)
    base_spec = cfg.train_spec()

    def builder(seed):
        sub = ExperimentConfig(json.loads(cfg.to_json()))
        sub.data["seed"] = seed
        return _build_model(sub, train_set, dtype)

    subset = cfg.data["eval"]["subset"]
    eval_set = test_set.subset(subset) if subset else test_set
    rows = stepsize_sweep(base_spec, alphas, seeds, builder, train_set,
                          eval_dataset=eval_set, eval_suite=_eval_suite(cfg),
                          eval_batch=cfg.data["eval"]["batch_size"])
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "mean_robust_acc", "stderr", "failures"])
        for cell in rows:
            writer.writerow([repr(cell.alpha), repr(cell.mean_robust_acc),
                             repr(cell.stderr), ";".join(cell.failures)])
    print(f"sweep done: {len(rows)} cells -> {out}/sweep.csv")
    return 0


def cmd_diagnose(cfg, checkpoint_path, bins):
    dtype = FLOAT_DTYPES[cfg.data["precision"]]
    out = _prepare_out(cfg)
    train_set, test_set = _load_datasets(cfg, dtype)
    model = _build_model(cfg, train_set, dtype)
    ckpt.load_checkpoint(checkpoint_path, model)
    suite = _eval_suite(cfg)
    subset = cfg.data["eval"]["subset"] or 256
    rng = np.random.default_rng(np.random.SeedSequence((cfg.data["seed"], 0xD1A6)))
    counts, edges = perturbation_histogram(
        model, test_set.subset(subset), replace(suite["pgd"], restarts=1), bins, rng
    )
    with open(os.path.join(out, "histogram.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    print(f"diagnose done -> {out}/histogram.csv")
    return 0


def cmd_lr_find(cfg, lambdas, probe_epochs):
    """Largest max-lr whose short run keeps the loss finite and below
    10x the initial loss."""
    dtype = FLOAT_DTYPES[cfg.data["precision"]]
    out = _prepare_out(cfg)
    train_set, _ = _load_datasets(cfg, dtype)
    results = {}
    best = None
    for lam in sorted(lambdas):
        sub = ExperimentConfig(json.loads(cfg.to_json()))
        sub.data["train"]["max_lr"] = lam
        sub.data["train"]["epochs"] = probe_epochs
        model = _build_model(sub, train_set, dtype)
        bs = sub.data["train"]["batch_size"]
        initial_loss = float(np.mean(cross_entropy_values(
            model.logits(train_set.images[:bs]), train_set.labels[:bs]
        )))
        try:
            _, record = train(sub.train_spec(), model, train_set)
            final_loss = record.rows[-1].train_loss
            diverged = not np.isfinite(final_loss) or final_loss > 10 * initial_loss
        except DivergenceError:
            final_loss, diverged = float("nan"), True
        results[repr(lam)] = {"final_loss": final_loss, "diverged": diverged}
        if not diverged:
            best = lam
    _write_summary(out, "lr_find.json", {"results": results, "best_max_lr": best}, cfg)
    print(f"lr-find done: best max_lr = {best}")
    return 0


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def build_parser():
    parser = argparse.ArgumentParser(prog="fastadv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--subset", type=int, help="cap evaluation examples")
        p.add_argument("--precision", type=int, choices=(32, 64), help="float width")
        p.add_argument("--no-clamp", action="store_true",
                       help="disable [0,1] image clamping of perturbations")

    common(sub.add_parser("train", help="train a model and evaluate it"))
    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_sweep = sub.add_parser("sweep", help="train/evaluate over attack step sizes")
    common(p_sweep)
    p_sweep.add_argument("--alphas", type=_float_list, required=True)
    p_sweep.add_argument("--seeds", type=_int_list, default=[0])
    p_diag = sub.add_parser("diagnose", help="perturbation histogram for a checkpoint")
    common(p_diag)
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--bins", type=int, default=21)
    p_lr = sub.add_parser("lr-find", help="largest non-diverging max learning rate")
    common(p_lr)
    p_lr.add_argument("--lambdas", type=_float_list, required=True)
    p_lr.add_argument("--probe-epochs", type=int, default=2)
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if args.out is not None:
        cfg.data["out"] = args.out
    if args.subset is not None:
        cfg.data["eval"]["subset"] = args.subset
    if args.precision is not None:
        cfg.data["precision"] = args.precision
    if args.no_clamp:
        cfg.data["train"]["attack"]["clamp_image"] = False
    cfg.train_spec()  # re-validate after overrides
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(ExperimentConfig.from_file(args.config), args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.alphas, args.seeds)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.checkpoint, args.bins)
        if args.command == "lr-find":
            return cmd_lr_find(cfg, args.lambdas, args.probe_epochs)
        raise AssertionError(args.command)
    except (ConfigError, FileNotFoundError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
