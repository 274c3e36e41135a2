import math

import numpy as np
import pytest
from scipy.integrate import simpson

from helpers import model_param_vector, rebuild_model
from vsde.data import PermutationSpec
from vsde.density import (
    ARModelParams,
    DegenerateNetworkError,
    MonotoneNetParams,
    PNNConfig,
    _conditional_batch,
    _conditioner_batch,
    _monotone_batch,
    batch_log_density,
    conditional_log_density,
    conditioner_forward,
    flatten_monotone_params,
    grad_log_density,
    init_ar_model,
    load_model,
    model_log_density,
    monotone_forward,
    monotone_param_size,
    normalized_cdf,
    positive_transform,
    random_monotone_params,
    save_model,
    unflatten_monotone_params,
)
from vsde.numerics import DomainError, RngStream, finite_diff_check


def sigmoid_net(out_logit=0.0):
    """Single hidden unit with effective weight 1 and zero bias: the CDF
    is exactly the logistic function."""
    raw = math.log(math.expm1(1.0))  # positivity inverse of 1
    return MonotoneNetParams(
        [np.array([[raw]])], [np.zeros(1)], np.array([out_logit]), (-10.0, 10.0)
    )


class TestPositiveTransform:
    def test_at_zero(self):
        assert positive_transform(0.0) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_never_exactly_zero(self):
        assert positive_transform(-1000.0) > 0.0

    def test_inverse_closed_form(self):
        assert positive_transform(math.log(math.e - 1.0)) == pytest.approx(1.0, abs=1e-12)

    def test_monotone(self):
        grid = np.linspace(-30, 30, 301)
        out = positive_transform(grid)
        assert np.all(np.diff(out) > 0)


class TestMonotoneForward:
    def test_logistic_closed_form(self):
        f, df = monotone_forward(sigmoid_net(), 0.0)
        assert f == pytest.approx(0.5, abs=1e-12)
        assert df == pytest.approx(0.25, abs=1e-12)

    def test_strictly_monotone_random_params(self):
        rng = RngStream(1)
        cfg = PNNConfig((16, 16))
        for _ in range(20):
            p = random_monotone_params(cfg, rng)
            t1, t2 = sorted(rng.generator.uniform(-10, 10, 2))
            if t1 == t2:
                continue
            assert monotone_forward(p, t1)[0] < monotone_forward(p, t2)[0]

    def test_derivative_positive_and_matches_finite_difference(self):
        rng = RngStream(2)
        cfg = PNNConfig((16, 16))
        h = 1e-6
        for _ in range(100):
            p = random_monotone_params(cfg, rng)
            t = rng.generator.uniform(-9, 9)
            f, df = monotone_forward(p, t)
            assert 0.0 < f < 1.0
            assert df > 0.0
            fd = (monotone_forward(p, t + h)[0] - monotone_forward(p, t - h)[0]) / (2 * h)
            assert abs(df - fd) / (abs(df) + 1e-12) < 1e-6

    def test_outside_support_rejected(self):
        with pytest.raises(DomainError):
            monotone_forward(sigmoid_net(), 11.0)

    def test_flatten_round_trip(self):
        cfg = PNNConfig((4, 3))
        p = random_monotone_params(cfg, RngStream(9))
        vec = flatten_monotone_params(p)
        assert vec.size == monotone_param_size(cfg)
        back = unflatten_monotone_params(vec, cfg)
        for a, b in zip(back.weights, p.weights):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.out_weights, p.out_weights)


class TestConditionalLogDensity:
    def test_normalized_cdf_endpoints_exact(self):
        rng = RngStream(3)
        cfg = PNNConfig((16, 16))
        for _ in range(20):
            p = random_monotone_params(cfg, rng)
            assert normalized_cdf(p, -10.0) == 0.0
            assert normalized_cdf(p, 10.0) == 1.0

    def test_quadrature_normalization(self):
        # independent oracle: composite Simpson on 4096 subintervals
        rng = RngStream(4)
        cfg = PNNConfig((16, 16))
        grid = np.linspace(-10, 10, 4097)
        for _ in range(10):
            p = random_monotone_params(cfg, rng)
            theta = np.repeat(flatten_monotone_params(p)[None, :], grid.size, axis=0)
            log_dens, _ = _conditional_batch(theta, grid, cfg)
            integral = simpson(np.exp(log_dens), x=grid)
            assert abs(integral - 1.0) < 1e-3

    def test_logistic_closed_form_value(self):
        # density 0.25 / (sigmoid(10) - sigmoid(-10)) at t = 0
        expected = math.log(0.25 / (1 / (1 + math.e**-10) - 1 / (1 + math.e**10)))
        assert conditional_log_density(sigmoid_net(), 0.0) == pytest.approx(expected, abs=1e-12)

    def test_degenerate_network_detected(self):
        # effective weights at the softplus floor: F is constant in float64
        p = MonotoneNetParams(
            [np.full((1, 2), -800.0)], [np.zeros(2)], np.zeros(2), (-10.0, 10.0)
        )
        with pytest.raises(DegenerateNetworkError):
            conditional_log_density(p, 0.0)


def small_model(dim=2, seed=0, hidden=(8,), cond=(16,), dropout=0.1, jitter=0.0):
    rng = RngStream(seed)
    model = init_ar_model(dim, PermutationSpec.identity(dim), PNNConfig(hidden), cond, dropout, rng)
    if jitter:
        for cond_params in model.conditioners:
            for key in cond_params:
                cond_params[key] = cond_params[key] + jitter * rng.generator.standard_normal(
                    cond_params[key].shape
                )
    return model


class TestConditionerForward:
    def test_first_dimension_is_stored_vector(self):
        model = small_model()
        out = conditioner_forward(model, [], 1)
        np.testing.assert_array_equal(
            flatten_monotone_params(out), model.conditioners[0]["theta"]
        )

    def test_eval_mode_deterministic(self):
        model = small_model(dim=3)
        a = conditioner_forward(model, [0.3, -0.7], 3)
        b = conditioner_forward(model, [0.3, -0.7], 3)
        np.testing.assert_array_equal(
            flatten_monotone_params(a), flatten_monotone_params(b)
        )

    def test_train_mode_needs_rng(self):
        model = small_model(dim=2)
        with pytest.raises(DomainError):
            conditioner_forward(model, [0.1], 2, mode="train")

    def test_inverted_dropout_unbiased(self):
        # the post-dropout activation must average to the eval activation
        model = small_model(dim=2, cond=(16, 16))
        prefix = np.array([[0.6]])
        _, (hidden_eval, _) = _conditioner_batch(model.conditioners[1], prefix, None)
        eval_act = hidden_eval[0][1][0]  # first hidden layer, tanh output
        rng = RngStream(77)
        keep = 1.0 - model.dropout
        total = np.zeros_like(eval_act)
        n = 10_000
        for _ in range(n):
            mask = (rng.generator.random(eval_act.shape) < keep) / keep
            total += eval_act * mask
        averaged = total / n
        np.testing.assert_allclose(averaged, eval_act, rtol=0.02, atol=1e-3)

    def test_prefix_length_checked(self):
        model = small_model(dim=3)
        with pytest.raises(DomainError):
            conditioner_forward(model, [0.1], 3)


class TestModelLogDensity:
    def test_single_dimension_equals_conditional(self):
        model = small_model(dim=1)
        p = unflatten_monotone_params(model.conditioners[0]["theta"], model.pnn)
        x = 0.37
        assert model_log_density(model, [x]) == pytest.approx(
            conditional_log_density(p, x), abs=1e-12
        )

    def test_independent_dimensions_factorize(self):
        # zero conditioner weights: dimension 2 ignores its prefix
        model = small_model(dim=2)
        cond = model.conditioners[1]
        for key in ("W0", "Wout"):
            cond[key] = np.zeros_like(cond[key])
        first = unflatten_monotone_params(model.conditioners[0]["theta"], model.pnn)
        second = unflatten_monotone_params(cond["bout"], model.pnn)
        x = [0.5, -1.25]
        expected = conditional_log_density(first, x[0]) + conditional_log_density(second, x[1])
        assert model_log_density(model, x) == pytest.approx(expected, abs=1e-10)

    def test_joint_quadrature_2d(self):
        # tensor-grid Simpson over the square must integrate to 1
        model = small_model(dim=2, jitter=0.3)
        n = 257
        grid = np.linspace(-10, 10, n)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
        dens = np.exp(batch_log_density(model, points)).reshape(n, n)
        integral = simpson(simpson(dens, x=grid, axis=1), x=grid)
        assert abs(integral - 1.0) < 5e-3

    def test_eval_deterministic(self):
        model = small_model(dim=3)
        x = [0.1, -0.2, 0.9]
        assert model_log_density(model, x) == model_log_density(model, x)

    def test_permutation_respected(self):
        perm = PermutationSpec((1, 0))
        rng = RngStream(11)
        model = init_ar_model(2, perm, PNNConfig((8,)), (16,), 0.1, rng)
        identity_twin = ARModelParams(
            model.conditioners, model.pnn, PermutationSpec.identity(2),
            model.conditioner_widths, model.dropout,
        )
        x = np.array([0.4, -1.1])
        assert model_log_density(model, x) == pytest.approx(
            model_log_density(identity_twin, x[[1, 0]]), abs=1e-12
        )


class TestGradLogDensity:
    def test_matches_finite_differences(self):
        worst = 0.0
        for trial in range(5):
            model = small_model(dim=3, seed=trial, hidden=(4,), cond=(8, 8), jitter=0.2)
            x = RngStream(50, trial).generator.uniform(-2, 2, 3)
            grads = grad_log_density(model, x)
            flat_g, spec = model_param_vector([dict(g) for g in grads])
            theta0, _ = model_param_vector(model.conditioners)

            def objective(vec):
                return model_log_density(rebuild_model(model, vec, spec), x)

            worst = max(worst, finite_diff_check(objective, theta0, flat_g))
        assert worst < 1e-4

    def test_zero_prefix_zeroes_input_weight_gradient(self):
        # with prefix x1 = 0 the first-layer weight gradient of the second
        # conditioner is an outer product with the zero input
        model = small_model(dim=2)
        grads = grad_log_density(model, [0.0, 0.5])
        np.testing.assert_array_equal(grads[1]["W0"], np.zeros_like(grads[1]["W0"]))
        assert np.any(grads[1]["b0"] != 0)

    def test_batch_mean_gradient_linearity(self):
        model = small_model(dim=2, jitter=0.1)
        rng = RngStream(8)
        batch = rng.generator.uniform(-2, 2, (5, 2))
        per_sample = [grad_log_density(model, row) for row in batch]
        mean_direct = [
            {k: np.mean([g[i][k] for g in per_sample], axis=0) for k in per_sample[0][i]}
            for i in range(2)
        ]
        from vsde.training import _loss_grads

        # lam = 0 loss is -mean(s): its gradient is -(mean of per-sample grads)
        _, _, _, grads = _loss_grads(model, batch, 0.0, None, mode="eval")
        for i in range(2):
            for key in grads[i]:
                np.testing.assert_allclose(grads[i][key], -np.asarray(mean_direct[i][key]),
                                           rtol=1e-10, atol=1e-12)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(dim=3, jitter=0.25)
        path = tmp_path / "model.npz"
        save_model(path, model)
        back = load_model(path)
        assert back.dim == model.dim
        assert back.permutation == model.permutation
        assert back.pnn == model.pnn
        assert back.conditioner_widths == model.conditioner_widths
        assert back.dropout == model.dropout
        for mine, theirs in zip(model.conditioners, back.conditioners):
            assert sorted(mine) == sorted(theirs)
            for key in mine:
                np.testing.assert_array_equal(mine[key], theirs[key])

    def test_scores_survive_round_trip(self, tmp_path):
        model = small_model(dim=2, jitter=0.3)
        path = tmp_path / "model.npz"
        save_model(path, model)
        back = load_model(path)
        x = np.array([0.2, -0.8])
        assert model_log_density(back, x) == model_log_density(model, x)
