import numpy as np
import pytest

from syncmotion.diffusion import (
    LossWeights,
    forward_noise,
    loss_align,
    loss_dc,
    loss_norm,
    make_schedule,
    posterior_mean,
    quat_norm_penalty,
    total_loss,
    total_loss_and_grads,
)
from syncmotion.kinematics import (
    RigidTrajectory,
    SkeletonTrajectory,
    StateLayout,
    assemble_state,
    quat_canonical,
    relative_from_individuals,
)

import oracles


def random_unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return quat_canonical(q / np.linalg.norm(q, axis=1, keepdims=True))


def random_state(rng, m=2, n=1, d=3, frames=6):
    rigids = [
        RigidTrajectory(rng.uniform(-1, 1, (frames, 3)), random_unit_quats(rng, frames))
        for _ in range(m)
    ]
    skels = [SkeletonTrajectory(rng.uniform(-1, 1, (frames, d, 3))) for _ in range(n)]
    return assemble_state(rigids, skels)


class TestSchedule:
    def test_endpoints(self):
        sched = make_schedule(1000, 1e-4, 0.01)
        assert sched.beta[0] == 1e-4
        assert sched.beta[-1] == 0.01

    def test_first_alpha_bar(self):
        sched = make_schedule(1000, 1e-4, 0.01)
        np.testing.assert_allclose(sched.alpha_bar[0], 0.9999, atol=1e-15)

    def test_alpha_bar_cumulative_product(self):
        sched = make_schedule(200, 1e-4, 0.01)
        prod = 1.0
        for t in range(200):
            prod *= sched.alpha[t]
            assert abs(sched.alpha_bar[t] - prod) < 1e-12
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_sigma_identity(self):
        sched = make_schedule(100, 1e-4, 0.02)
        for t in range(1, 101):
            want = sched.beta[t - 1] * (1 - sched.abar(t - 1)) / (1 - sched.abar(t))
            assert abs(sched.sigma[t - 1] ** 2 - want) < 1e-12

    def test_single_step(self):
        sched = make_schedule(1, 1e-4, 0.01)
        np.testing.assert_allclose(sched.alpha_bar[0], 1 - 1e-4, atol=1e-15)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            make_schedule(10, 0.0, 0.01)
        with pytest.raises(ValueError):
            make_schedule(10, 0.02, 0.01)
        with pytest.raises(ValueError):
            make_schedule(0, 1e-4, 0.01)


class TestForwardNoise:
    def test_zero_noise(self):
        sched = make_schedule(100, 1e-4, 0.02)
        x0 = np.ones((4, 3))
        got = forward_noise(x0, 50, np.zeros_like(x0), sched)
        np.testing.assert_allclose(got, np.sqrt(sched.abar(50)) * x0, atol=1e-15)

    def test_known_value(self):
        # schedule-independent check: with abar := 0.25, x0=2, eps=1 the mix is
        # 1 + sqrt(0.75)
        sched = make_schedule(100, 1e-4, 0.02)
        t = int(np.argmin(np.abs(sched.alpha_bar - 0.25))) + 1
        abar = sched.abar(t)
        got = forward_noise(np.array([2.0]), t, np.array([1.0]), sched)
        np.testing.assert_allclose(got, np.sqrt(abar) * 2 + np.sqrt(1 - abar), atol=1e-12)
        manual = np.sqrt(0.25) * 2.0 + np.sqrt(0.75) * 1.0
        assert abs(manual - 1.8660254037844386) < 1e-12

    def test_zero_everything(self):
        sched = make_schedule(10, 1e-4, 0.02)
        np.testing.assert_array_equal(
            forward_noise(np.zeros(3), 5, np.zeros(3), sched), np.zeros(3)
        )

    def test_step_range(self):
        sched = make_schedule(10, 1e-4, 0.02)
        with pytest.raises(ValueError):
            forward_noise(np.zeros(3), 0, np.zeros(3), sched)
        with pytest.raises(ValueError):
            forward_noise(np.zeros(3), 11, np.zeros(3), sched)


class TestPosteriorMean:
    def test_t1_returns_prediction(self):
        sched = make_schedule(100, 1e-4, 0.02)
        x_t = np.array([3.0, -1.0])
        x0 = np.array([0.5, 0.25])
        np.testing.assert_allclose(posterior_mean(x_t, x0, 1, sched), x0, atol=1e-12)

    def test_plugin_oracle(self):
        sched = make_schedule(100, 1e-4, 0.02)
        for t in (1, 2, 17, 50, 100):
            abar, abar_prev = sched.abar(t), sched.abar(t - 1)
            alpha, beta = sched.alpha[t - 1], sched.beta[t - 1]
            got = posterior_mean(np.array([1.0]), np.array([0.0]), t, sched)
            want = np.sqrt(alpha) * (1 - abar_prev) / (1 - abar)
            np.testing.assert_allclose(got, [want], atol=1e-15)

    def test_coefficient_sum(self):
        # The two coefficients sum to (sqrt(alpha_t) + sqrt(abar_{t-1})) /
        # (1 + sqrt(abar_t)); this equals 1 only at t = 1.
        sched = make_schedule(100, 1e-4, 0.02)
        for t in (1, 2, 50, 100):
            got = posterior_mean(np.array([1.0]), np.array([1.0]), t, sched)
            want = (np.sqrt(sched.alpha[t - 1]) + np.sqrt(sched.abar(t - 1))) / (
                1 + np.sqrt(sched.abar(t))
            )
            np.testing.assert_allclose(got, [want], atol=1e-12)
        assert abs(posterior_mean(np.ones(1), np.ones(1), 1, sched)[0] - 1.0) < 1e-12


class TestLosses:
    def test_loss_dc_zero(self):
        x = np.ones((3, 4))
        assert loss_dc(x, x) == 0.0

    def test_loss_dc_definition(self):
        pred = np.ones(10)
        assert loss_dc(pred, np.zeros(10)) == 10.0

    def test_loss_dc_matches_naive(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        naive = sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel()))
        assert abs(loss_dc(a, b) - naive) < 1e-9

    def test_loss_norm_unit(self):
        rng = np.random.default_rng(1)
        state = random_state(rng)
        assert loss_norm(state.data, state.layout) < 1e-12

    def test_loss_norm_single_violation(self):
        rng = np.random.default_rng(2)
        state = random_state(rng, m=1, n=0, frames=4)
        data = state.data.copy()
        sl = state.layout.rigid_quat_slice(1)
        data[2, sl] = [2.0, 0, 0, 0]
        assert abs(loss_norm(data, state.layout) - 1.0) < 1e-9

    def test_loss_norm_matches_loop(self):
        rng = np.random.default_rng(3)
        state = random_state(rng)
        data = state.data + rng.standard_normal(state.data.shape) * 0.3
        total = 0.0
        for j in range(1, state.layout.m + 1):
            q = data[:, state.layout.rigid_quat_slice(j)]
            for row in q:
                total += (1.0 - np.sqrt(np.sum(row**2))) ** 2
        assert abs(loss_norm(data, state.layout) - total) < 1e-6

    def test_quat_norm_penalty_example(self):
        assert abs(quat_norm_penalty(np.array([[2.0, 0, 0, 0]])) - 1.0) < 1e-9

    def test_loss_align_zero_for_assembled(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            state = random_state(rng, m=3, n=2, d=4)
            assert loss_align(state.data, state.layout) == 0.0

    def test_loss_align_single_perturbation(self):
        rng = np.random.default_rng(5)
        state = random_state(rng)
        data = state.data.copy()
        sl = state.layout.rel_rigid_slice(1, 2)
        data[3, sl.start + 1] += 0.25
        assert abs(loss_align(data, state.layout) - 0.25**2) < 1e-12

    def test_loss_align_matches_independent_recompute(self):
        rng = np.random.default_rng(6)
        state = random_state(rng, m=2, n=2, d=3)
        data = state.data + rng.standard_normal(state.data.shape) * 0.1
        expected = relative_from_individuals(data, state.layout)
        manual = sum(
            float(np.sum((data[:, state.layout.block_slice(name)] - want) ** 2))
            for name, want in expected.items()
        )
        assert abs(loss_align(data, state.layout) - manual) < 1e-9

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(dc=-1.0)
        with pytest.raises(ValueError):
            LossWeights(ac=float("nan"))

    def test_total_loss_zero_weights(self):
        rng = np.random.default_rng(7)
        state = random_state(rng)
        zeros = np.zeros_like(state.data)
        w = LossWeights(0.0, 0.0, 0.0, 0.0)
        breakdown = total_loss(state.data, zeros, state.data, zeros, state.layout, w)
        assert breakdown.total == 0.0

    def test_total_loss_consistent_prediction(self):
        rng = np.random.default_rng(8)
        state = random_state(rng)
        zeros = np.zeros_like(state.data)
        w = LossWeights(1.0, 2.5, 0.1, 0.3)
        breakdown = total_loss(state.data, zeros, state.data, zeros, state.layout, w)
        assert breakdown.dc == 0.0 and breakdown.ac == 0.0 and breakdown.align == 0.0
        assert breakdown.norm < 1e-12
        assert breakdown.total < 1e-12

    def test_total_loss_nonnegative(self):
        rng = np.random.default_rng(9)
        state = random_state(rng)
        w = LossWeights(1.0, 2.5, 0.1, 0.3)
        pred_dc = state.data + rng.standard_normal(state.data.shape) * 0.1
        pred_ac = rng.standard_normal(state.data.shape) * 0.1
        breakdown = total_loss(pred_dc, pred_ac, state.data, np.zeros_like(pred_ac), state.layout, w)
        assert breakdown.total > 0.0

    def test_total_loss_grads_match_fd(self):
        rng = np.random.default_rng(10)
        state = random_state(rng, m=2, n=1, d=2, frames=4)
        gt_dc = state.data
        gt_ac = np.zeros_like(gt_dc)
        pred_dc = gt_dc + rng.standard_normal(gt_dc.shape) * 0.2
        pred_ac = rng.standard_normal(gt_dc.shape) * 0.2
        w = LossWeights(1.0, 2.5, 0.1, 0.3)
        _, g_dc, g_ac = total_loss_and_grads(pred_dc, pred_ac, gt_dc, gt_ac, state.layout, w)
        h = 1e-6
        for arr, grad in ((pred_dc, g_dc), (pred_ac, g_ac)):
            for flat in rng.choice(arr.size, size=40, replace=False):
                orig = arr.flat[flat]
                arr.flat[flat] = orig + h
                plus = total_loss(pred_dc, pred_ac, gt_dc, gt_ac, state.layout, w).total
                arr.flat[flat] = orig - h
                minus = total_loss(pred_dc, pred_ac, gt_dc, gt_ac, state.layout, w).total
                arr.flat[flat] = orig
                fd = (plus - minus) / (2 * h)
                assert abs(fd - grad.flat[flat]) < 1e-5 * max(1.0, abs(fd))
