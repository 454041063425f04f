import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastadv.attacks import (
    AttackSpec,
    clamp_to_image,
    fgsm_step,
    init_delta,
    pgd_attack,
    project_linf,
)
from fastadv.autodiff import cross_entropy_values
from fastadv.data import oracle_linear_model, synthetic_margin_dataset


def analytic_worst_case_losses(w, x, labels, eps):
    """Closed-form l-inf worst-case CE loss for the binary oracle model."""
    y = 2.0 * labels - 1.0
    worst_margin = y * (x @ w) - eps * np.abs(w).sum()
    return np.log1p(np.exp(-worst_margin))


@pytest.fixture
def oracle_problem(rng):
    ds, w = synthetic_margin_dataset(64, 12, margin=0.5, eps_max=0.3, rng=rng)
    return ds, w, oracle_linear_model(w)


class TestInitDelta:
    def test_zero(self):
        spec = AttackSpec(epsilon=0.3)
        assert not init_delta(spec, (4, 3)).any()

    def test_uniform_statistics(self, rng):
        spec = AttackSpec(epsilon=0.3, init="uniform")
        d = init_delta(spec, (100, 100), rng)
        assert np.abs(d).max() <= 0.3
        sigma = 0.3 / np.sqrt(3)  # stddev of U(-eps, eps)
        assert abs(d.mean()) < 3 * sigma / 100

    def test_hypercube_surface_exact(self, rng):
        spec = AttackSpec(epsilon=0.3, init="hypercube_surface")
        d = init_delta(spec, (50, 7), rng)
        np.testing.assert_allclose(np.abs(d), 0.15)

    def test_normal_variant_respects_ball(self, rng):
        spec = AttackSpec(epsilon=0.2, init="normal")
        d = init_delta(spec, (200, 20), rng)
        assert np.abs(d).max() <= 0.2

    def test_previous_requires_carried(self):
        spec = AttackSpec(epsilon=0.3, init="previous")
        with pytest.raises(ValueError):
            init_delta(spec, (4, 3))

    def test_previous_truncates_and_pads(self):
        spec = AttackSpec(epsilon=0.3, init="previous")
        carried = np.ones((8, 3))
        np.testing.assert_array_equal(init_delta(spec, (4, 3), carried_delta=carried), np.ones((4, 3)))
        grown = init_delta(spec, (10, 3), carried_delta=carried)
        assert grown[:8].all() and not grown[8:].any()


class TestProjectAndClamp:
    def test_feasible_unchanged(self):
        d = np.array([0.1, -0.2])
        np.testing.assert_array_equal(project_linf(d, 0.3), d)

    def test_oversized_clipped(self):
        np.testing.assert_allclose(project_linf(np.full(5, 0.6), 0.3), np.full(5, 0.3))

    def test_idempotent(self, rng):
        d = rng.standard_normal(20)
        once = project_linf(d, 0.25)
        np.testing.assert_array_equal(project_linf(once, 0.25), once)

    def test_clamp_at_zero_pixel(self):
        assert clamp_to_image(np.array([0.0]), np.array([-0.3]))[0] == 0.0

    def test_clamp_noop_inside_range(self):
        assert clamp_to_image(np.array([0.5]), np.array([0.3]))[0] == 0.3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 999))
    def test_clamp_never_grows_delta(self, seed):
        g = np.random.default_rng(seed)
        x = g.random(30)
        d = g.uniform(-0.4, 0.4, 30)
        out = clamp_to_image(x, d)
        assert np.all(np.abs(out) <= np.abs(d) + 1e-15)
        assert np.all((x + out >= 0) & (x + out <= 1))


class TestFgsmStep:
    def test_full_step_zero_init_is_sign_gradient(self, oracle_problem):
        ds, w, model = oracle_problem
        eps = 0.2
        x, y = ds.images[:8], ds.labels[:8]
        delta = fgsm_step(model, x, y, np.zeros_like(x), alpha=eps, epsilon=eps)
        ysign = 2.0 * y - 1.0
        expected = -eps * ysign[:, None] * np.sign(w)[None, :]
        np.testing.assert_allclose(delta, expected, atol=1e-12)

    def test_zero_gradient_coordinate_untouched(self, rng):
        ds, w_full = synthetic_margin_dataset(8, 5, 0.5, 0.2, rng)
        w = w_full.copy()
        w[2] = 0.0  # dead coordinate: gradient exactly zero there
        model = oracle_linear_model(w)
        delta = fgsm_step(model, ds.images, ds.labels, np.zeros_like(ds.images), 0.1, 0.1)
        assert not delta[:, 2].any()

    def test_projection_applied(self, oracle_problem):
        ds, w, model = oracle_problem
        x, y = ds.images[:4], ds.labels[:4]
        start = np.full_like(x, 0.19)
        delta = fgsm_step(model, x, y, start, alpha=0.5, epsilon=0.2)
        assert np.abs(delta).max() <= 0.2


class TestPgdAttack:
    def test_zero_steps_identity(self, oracle_problem):
        ds, w, model = oracle_problem
        spec = AttackSpec(epsilon=0.2, steps=0, restarts=1, init="zero", clamp_image=False)
        delta, success = pgd_attack(model, ds.images, ds.labels, spec)
        assert not delta.any()
        np.testing.assert_array_equal(success, model.predict(ds.images) != ds.labels)

    @pytest.mark.parametrize("steps,alpha", [(1, 0.2), (5, 0.05), (10, 0.03)])
    def test_linear_oracle_reaches_closed_form_worst_case(self, oracle_problem, steps, alpha):
        ds, w, model = oracle_problem
        eps = 0.2
        assert steps * alpha >= eps
        spec = AttackSpec(epsilon=eps, alpha=alpha, steps=steps, init="zero", clamp_image=False)
        delta, _ = pgd_attack(model, ds.images, ds.labels, spec)
        losses = cross_entropy_values(model.logits(ds.images + delta), ds.labels)
        expected = analytic_worst_case_losses(w, ds.images, ds.labels, eps)
        np.testing.assert_allclose(losses, expected, atol=1e-6)

    def test_feasibility_invariant(self, oracle_problem, rng):
        ds, w, model = oracle_problem
        spec = AttackSpec(epsilon=0.15, alpha=0.07, steps=4, restarts=3,
                          init="uniform", clamp_image=False)
        delta, _ = pgd_attack(model, ds.images, ds.labels, spec, rng)
        assert np.abs(delta).max() <= 0.15

    def test_restart_success_monotonicity(self, oracle_problem):
        ds, w, model = oracle_problem
        base = AttackSpec(epsilon=0.6, alpha=0.2, steps=3, init="uniform", clamp_image=False)
        succ = {}
        for r in (1, 10):
            _, succ[r] = pgd_attack(model, ds.images, ds.labels, base.with_restarts(r),
                                    np.random.default_rng(0))
        assert np.all(succ[10] | ~succ[1])  # 1-restart successes survive

    def test_determinism_under_fixed_seed(self, oracle_problem):
        ds, w, model = oracle_problem
        spec = AttackSpec(epsilon=0.2, alpha=0.05, steps=5, restarts=2,
                          init="uniform", clamp_image=False)
        d1, s1 = pgd_attack(model, ds.images, ds.labels, spec, np.random.default_rng(3))
        d2, s2 = pgd_attack(model, ds.images, ds.labels, spec, np.random.default_rng(3))
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_array_equal(s1, s2)

    def test_single_restart_ascent_never_decreases_loss_on_linear(self, oracle_problem):
        ds, w, model = oracle_problem
        x, y = ds.images[:16], ds.labels[:16]
        delta = np.zeros_like(x)
        prev = cross_entropy_values(model.logits(x + delta), y)
        for _ in range(6):
            delta = fgsm_step(model, x, y, delta, alpha=0.03, epsilon=0.2)
            cur = cross_entropy_values(model.logits(x + delta), y)
            assert np.all(cur >= prev - 1e-12)
            prev = cur

    def test_clamped_attack_respects_image_range(self, rng):
        from fastadv.models import build_mnist_cnn, init_parameters

        model = init_parameters(build_mnist_cnn(), rng)
        x = rng.random((4, 1, 28, 28)).astype(np.float32)
        y = rng.integers(0, 10, size=4)
        spec = AttackSpec(epsilon=0.3, alpha=0.1, steps=3, init="uniform", clamp_image=True)
        delta, _ = pgd_attack(model, x, y, spec, rng)
        adv = x + delta
        assert adv.min() >= -1e-6 and adv.max() <= 1 + 1e-6
        assert np.abs(delta).max() <= np.float32(0.3) + 1e-7


class TestSpecValidation:
    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            AttackSpec(epsilon=-0.1)

    def test_steps_require_alpha(self):
        with pytest.raises(ValueError):
            AttackSpec(epsilon=0.3, steps=2, alpha=0.0)

    def test_unknown_init(self):
        with pytest.raises(ValueError):
            AttackSpec(epsilon=0.3, init="cube")

    def test_restarts_positive(self):
        with pytest.raises(ValueError):
            AttackSpec(epsilon=0.3, restarts=0)
