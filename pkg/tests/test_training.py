import numpy as np
import pytest

from fastadv.attacks import AttackSpec
from fastadv.autodiff import Tensor
from fastadv.data import num_batches, synthetic_margin_dataset
from fastadv.models import build_linear, init_parameters
from fastadv.training import (
    DetectorSpec,
    SGD,
    TrainSpec,
    cyclic_lr,
    detect_catastrophic_overfitting,
    train_fgsm,
    train_free,
    train_pgd,
    train_standard,
)
import fastadv.training as training_mod


def margin_problem(seed=0, n=256, d=16, margin=0.5, eps_max=0.3):
    rng = np.random.default_rng(seed)
    ds, w = synthetic_margin_dataset(n, d, margin, eps_max, rng)
    model = init_parameters(build_linear(d, 2), np.random.default_rng(seed + 1))
    return ds, w, model


def spec_for(method, **kw):
    attack = kw.pop("attack", None)
    if attack is None and method != "standard":
        steps = 1 if method in ("fgsm", "free") else kw.pop("steps", 3)
        attack = AttackSpec(epsilon=0.2, alpha=0.2 if method != "pgd" else 0.1,
                            steps=steps, init="uniform", clamp_image=False)
    defaults = dict(method=method, epochs=2, batch_size=32, max_lr=0.1,
                    momentum=0.9, weight_decay=5e-4, attack=attack, seed=0)
    defaults.update(kw)
    return TrainSpec(**defaults)


class TestCyclicLr:
    def test_endpoints_zero(self):
        assert cyclic_lr(0, 30, 0.2) == 0.0
        assert cyclic_lr(30, 30, 0.2) == 0.0

    def test_peak(self):
        assert cyclic_lr(15, 30, 0.2) == pytest.approx(0.2)

    def test_linear_midpoint(self):
        assert cyclic_lr(7.5, 30, 0.2) == pytest.approx(0.1)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cyclic_lr(-0.1, 30, 0.2)
        with pytest.raises(ValueError):
            cyclic_lr(30.5, 30, 0.2)


class TestSGD:
    def _params(self, value):
        return {"p": Tensor(np.array([value]), requires_grad=True)}

    def test_plain_gradient_descent(self):
        params = self._params(1.0)
        params["p"].grad = np.array([0.5])
        SGD(params).step(lr=0.1)
        assert params["p"].data[0] == pytest.approx(1.0 - 0.05)

    def test_zero_lr_identity(self):
        params = self._params(2.0)
        params["p"].grad = np.array([3.0])
        SGD(params, momentum=0.9, weight_decay=5e-4).step(lr=0.0)
        assert params["p"].data[0] == 2.0

    def test_two_momentum_steps_displacement(self):
        # v1 = g, v2 = mu*g + g -> total displacement lr*g*(2 + mu)
        mu, lr, g = 0.9, 0.1, 2.0
        params = self._params(0.0)
        opt = SGD(params, momentum=mu)
        for _ in range(2):
            params["p"].grad = np.array([g])
            opt.step(lr)
            params["p"].zero_grad()
        assert params["p"].data[0] == pytest.approx(-lr * g * (2 + mu))

    def test_weight_decay_coupled(self):
        params = self._params(10.0)
        params["p"].grad = np.array([0.0])
        SGD(params, weight_decay=0.1).step(lr=1.0)
        assert params["p"].data[0] == pytest.approx(10.0 - 1.0)


class TestDetectorRule:
    def _run(self, seq, floor=0.20, margin=0.50):
        det = DetectorSpec(floor=floor, drop_margin=margin)
        peak = -1.0
        for epoch, acc in enumerate(seq, start=1):
            if detect_catastrophic_overfitting(acc, peak, det):
                return epoch
            peak = max(peak, acc)
        return None

    def test_both_rules_fire(self):
        assert self._run([0.60, 0.65, 0.70, 0.02]) == 4

    def test_monotone_improvement_never_triggers(self):
        assert self._run([0.40, 0.55, 0.70]) is None

    def test_boundary_of_rule(self):
        assert self._run([0.70, 0.35]) is None  # drop 0.35 <= 0.50, value >= floor

    def test_floor_rule_alone(self):
        assert self._run([0.70, 0.19]) == 2

    def test_drop_rule_alone(self):
        assert self._run([0.90, 0.35]) == 2


class TestStandardTraining:
    def test_reaches_full_clean_accuracy(self):
        ds, w, model = margin_problem()
        spec = spec_for("standard", epochs=3, max_lr=0.5)
        model, record = train_standard(spec, model, ds)
        assert np.mean(model.predict(ds.images) == ds.labels) == 1.0

    def test_initial_loss_near_ln_classes(self):
        ds, w, model = margin_problem()
        for p in model.params.values():  # shrink init so logits are near zero
            p.data = p.data * 0.01
        spec = spec_for("standard", epochs=1, max_lr=0.0)
        _, record = train_standard(spec, model, ds)
        assert record.rows[0].train_loss == pytest.approx(np.log(2), rel=0.02)

    def test_same_seed_identical_record(self):
        def run():
            ds, w, model = margin_problem()
            spec = spec_for("standard", epochs=2)
            _, record = train_standard(spec, model, ds)
            return [(r.epoch, r.lr, r.train_loss, r.clean_acc) for r in record.rows]

        assert run() == run()


class TestAccounting:
    def test_fgsm_two_passes_per_minibatch(self):
        ds, w, model = margin_problem()
        spec = spec_for("fgsm", epochs=3)
        _, record = train_fgsm(spec, model, ds)
        nb = num_batches(len(ds), spec.batch_size)
        assert record.gradient_passes == 2 * nb * spec.epochs
        assert record.model_updates == nb * spec.epochs

    def test_pgd_n_plus_one_passes(self):
        ds, w, model = margin_problem()
        spec = spec_for("pgd", steps=4, epochs=2)
        _, record = train_pgd(spec, model, ds)
        nb = num_batches(len(ds), spec.batch_size)
        assert record.gradient_passes == (4 + 1) * nb * spec.epochs

    def test_free_total_updates(self):
        ds, w, model = margin_problem()
        spec = spec_for("free", epochs=4, replay=2)
        _, record = train_free(spec, model, ds)
        nb = num_batches(len(ds), spec.batch_size)
        assert record.model_updates == spec.epochs * nb
        assert record.gradient_passes == spec.epochs * nb  # one shared pass per replay

    def test_free_m1_single_update_per_minibatch(self):
        ds, w, model = margin_problem()
        spec = spec_for("free", epochs=2, replay=1)
        _, record = train_free(spec, model, ds)
        nb = num_batches(len(ds), spec.batch_size)
        assert record.model_updates == 2 * nb


class TestEquivalence:
    def test_pgd1_equals_fgsm_with_zero_init(self):
        attack = AttackSpec(epsilon=0.2, alpha=0.2, steps=1, init="zero", clamp_image=False)
        traces = {}
        for method, fn in (("fgsm", train_fgsm), ("pgd", train_pgd)):
            ds, w, model = margin_problem()
            spec = spec_for(method, attack=attack, epochs=2)
            model, record = fn(spec, model, ds)
            traces[method] = ([r.train_loss for r in record.rows], model.param_vector())
        assert traces["fgsm"][0] == traces["pgd"][0]
        np.testing.assert_array_equal(traces["fgsm"][1], traces["pgd"][1])


class TestRunRecord:
    def test_lr_matches_cyclic_schedule_at_logged_points(self):
        ds, w, model = margin_problem()
        spec = spec_for("fgsm", epochs=3)
        _, record = train_fgsm(spec, model, ds)
        nb = num_batches(len(ds), spec.batch_size)
        for row in record.rows:
            expected = cyclic_lr(row.epoch - 1 + (nb - 1) / nb, spec.epochs, spec.max_lr)
            assert row.lr == expected

    def test_rows_strictly_increasing(self):
        ds, w, model = margin_problem()
        spec = spec_for("free", epochs=4, replay=2)
        _, record = train_free(spec, model, ds)
        epochs = [r.epoch for r in record.rows]
        assert epochs == sorted(set(epochs)) == [2, 4]

    def test_spec_echoed(self):
        ds, w, model = margin_problem()
        spec = spec_for("fgsm")
        _, record = train_fgsm(spec, model, ds)
        assert record.spec is spec


class TestAdversarialTraining:
    def test_fgsm_training_yields_robust_linear_model(self):
        ds, w, model = margin_problem(n=512)
        spec = spec_for("fgsm", epochs=6, max_lr=0.5)
        model, _ = train_fgsm(spec, model, ds)
        eps = spec.attack.epsilon
        y = 2.0 * ds.labels - 1.0
        logit_w = model.params["w"].data[:, 1] - model.params["w"].data[:, 0]
        adv = ds.images - eps * y[:, None] * np.sign(logit_w)[None, :]
        assert np.mean(model.predict(adv) == ds.labels) > 0.95

    def test_free_training_robust_on_margin_data(self):
        ds, w, model = margin_problem(n=512)
        spec = spec_for("free", epochs=6, replay=2, max_lr=0.5)
        model, _ = train_free(spec, model, ds)
        eps = spec.attack.epsilon
        y = 2.0 * ds.labels - 1.0
        logit_w = model.params["w"].data[:, 1] - model.params["w"].data[:, 0]
        adv = ds.images - eps * y[:, None] * np.sign(logit_w)[None, :]
        assert np.mean(model.predict(adv) == ds.labels) == 1.0

    def test_training_delta_feasibility(self, monkeypatch):
        seen = []
        import fastadv.training as tm
        orig = tm.project_linf

        def spy(delta, eps):
            out = orig(delta, eps)
            seen.append(np.abs(out).max() <= eps)
            return out

        monkeypatch.setattr(tm, "project_linf", spy)
        ds, w, model = margin_problem()
        spec = spec_for("pgd", steps=2)
        train_pgd(spec, model, ds)
        assert seen and all(seen)


class TestEarlyStopping:
    def _probe_sequence(self, monkeypatch, seq):
        it = iter(seq)
        monkeypatch.setattr(training_mod._Monitor, "probe_acc", lambda self, model: next(it))

    def test_trigger_restores_best_prior_checkpoint(self, monkeypatch):
        self._probe_sequence(monkeypatch, [0.60, 0.65, 0.70, 0.02, 0.0])
        ds, w, model = margin_problem()
        spec = spec_for("fgsm", epochs=5, early_stop=DetectorSpec())
        model, record = train_fgsm(spec, model, ds)
        assert record.early_stop_epoch == 4
        assert record.best_epoch == 3
        assert len(record.rows) == 4  # truncated at the trigger epoch

    def test_no_trigger_on_improving_sequence(self, monkeypatch):
        self._probe_sequence(monkeypatch, [0.40, 0.55, 0.70])
        ds, w, model = margin_problem()
        spec = spec_for("fgsm", epochs=3, early_stop=DetectorSpec())
        _, record = train_fgsm(spec, model, ds)
        assert record.early_stop_epoch is None
        assert len(record.rows) == 3

    def test_best_checkpoint_parameters_restored(self, monkeypatch):
        snaps = {}
        orig_end = training_mod._epoch_end

        def capture(spec, model, monitor, record, epoch, lr, losses, best):
            out = orig_end(spec, model, monitor, record, epoch, lr, losses, best)
            snaps[epoch] = model.param_vector()
            return out

        self._probe_sequence(monkeypatch, [0.50, 0.80, 0.01])
        monkeypatch.setattr(training_mod, "_epoch_end", capture)
        ds, w, model = margin_problem()
        spec = spec_for("fgsm", epochs=3, early_stop=DetectorSpec())
        model, record = train_fgsm(spec, model, ds)
        assert record.early_stop_epoch == 3 and record.best_epoch == 2
        np.testing.assert_array_equal(model.param_vector(), snaps[2])


class TestSpecValidation:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            TrainSpec(method="adam")

    def test_fgsm_needs_single_step_attack(self):
        with pytest.raises(ValueError):
            spec_for("fgsm", attack=AttackSpec(epsilon=0.1, alpha=0.1, steps=2))

    def test_free_replay_positive(self):
        with pytest.raises(ValueError):
            spec_for("free", replay=0)

    def test_free_outer_loop_nonempty(self):
        with pytest.raises(ValueError):
            spec_for("free", epochs=2, replay=4)
