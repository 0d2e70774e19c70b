import numpy as np
import pytest

from syncmotion.denoiser import (
    DenoiserConfig,
    SceneConditioning,
    TrainItem,
    TrainSettings,
    analytic_gaussian_denoise,
    build_condition,
    denoise,
    init_params,
    load_checkpoint,
    sample_loss_and_grads,
    save_checkpoint,
    sinusoidal_embed,
    timestep_embed,
    train,
    zero_params,
)
from syncmotion.diffusion import LossWeights, make_schedule
from syncmotion.scenes import SceneSpec, conditioning_for_spec, gen_scene, pad_and_mask
from syncmotion.geometry_metrics import BasisPointSet

import oracles


def small_config(**kw):
    defaults = dict(m=2, n=1, d_joints=2, hidden=16, action_vocab=4, object_vocab=8)
    defaults.update(kw)
    return DenoiserConfig(**defaults)


def toy_conditioning(cfg, rng):
    return SceneConditioning(
        action_id=1,
        object_label_ids=rng.integers(0, cfg.object_vocab, size=cfg.m),
        bps_features=rng.standard_normal((cfg.m, 1024, 3)),
        shape_params=rng.standard_normal((cfg.n, 10)),
    )


def toy_item(cfg, rng, n_frames=32, n_real=None):
    from syncmotion.kinematics import RigidTrajectory, SkeletonTrajectory, assemble_state
    from syncmotion.kinematics import quat_canonical

    n_real = n_real or n_frames
    rigids = []
    for _ in range(cfg.m):
        q = rng.standard_normal((n_real, 4))
        q = quat_canonical(q / np.linalg.norm(q, axis=1, keepdims=True))
        rigids.append(RigidTrajectory(rng.uniform(-1, 1, (n_real, 3)), q))
    skels = [SkeletonTrajectory(rng.uniform(-1, 1, (n_real, cfg.d_joints, 3))) for _ in range(cfg.n)]
    state = assemble_state(rigids, skels)
    data = np.zeros((n_frames, cfg.d_sum))
    data[:n_real] = state.data
    mask = np.zeros(n_frames)
    mask[:n_real] = 1.0
    return TrainItem(data=data, mask=mask, cond=toy_conditioning(cfg, rng))


class TestTimestepEmbed:
    def test_base_phase_zero(self):
        emb = sinusoidal_embed(0, 64)
        np.testing.assert_array_equal(emb[:32], 0.0)
        np.testing.assert_array_equal(emb[32:], 1.0)

    def test_distinct_timesteps(self):
        seen = {}
        for t in range(1, 1001):
            key = timestep_embed(t).tobytes()
            assert key not in seen
            seen[key] = t

    def test_deterministic(self):
        np.testing.assert_array_equal(timestep_embed(17, seed=3), timestep_embed(17, seed=3))
        assert not np.array_equal(timestep_embed(17, seed=3), timestep_embed(17, seed=4))


class TestCondition:
    def test_width_m2_n2(self):
        cfg = small_config(m=2, n=2)
        rng = np.random.default_rng(0)
        params = init_params(cfg, 0)
        cond = build_condition(params, toy_conditioning(cfg, rng), np.ones(8), 5)
        assert cond.static_vector().shape == (128 * 5 + 20,)

    def test_width_m1_n0(self):
        cfg = small_config(m=1, n=0)
        rng = np.random.default_rng(1)
        params = init_params(cfg, 0)
        cond = build_condition(params, toy_conditioning(cfg, rng), np.ones(8), 5)
        assert cond.static_vector().shape == (128 * 3,)

    def test_pure(self):
        cfg = small_config()
        rng = np.random.default_rng(2)
        params = init_params(cfg, 0)
        inputs = toy_conditioning(cfg, rng)
        a = build_condition(params, inputs, np.ones(8), 5).static_vector()
        b = build_condition(params, inputs, np.ones(8), 5).static_vector()
        np.testing.assert_array_equal(a, b)

    def test_unknown_label(self):
        cfg = small_config()
        rng = np.random.default_rng(3)
        params = init_params(cfg, 0)
        bad = toy_conditioning(cfg, rng)
        bad.object_label_ids = np.array([0, cfg.object_vocab])
        with pytest.raises(ValueError):
            build_condition(params, bad, np.ones(8), 5)


class TestDenoise:
    def test_zero_params_zero_output(self):
        cfg = small_config()
        rng = np.random.default_rng(4)
        params = zero_params(cfg)
        cond = build_condition(params, toy_conditioning(cfg, rng), np.ones(16), 3)
        out_dc, out_f = denoise(params, rng.standard_normal((16, cfg.d_sum)),
                                rng.standard_normal((16, cfg.d_sum)), cond)
        np.testing.assert_array_equal(out_dc, 0.0)
        np.testing.assert_array_equal(out_f, 0.0)

    def test_deterministic(self):
        cfg = small_config()
        rng = np.random.default_rng(5)
        params = init_params(cfg, 7)
        cond = build_condition(params, toy_conditioning(cfg, rng), np.ones(16), 3)
        x_dc = rng.standard_normal((16, cfg.d_sum))
        x_f = rng.standard_normal((16, cfg.d_sum))
        a = denoise(params, x_dc, x_f, cond)
        b = denoise(params, x_dc, x_f, cond)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_nonfinite_rejected(self):
        cfg = small_config()
        rng = np.random.default_rng(6)
        params = init_params(cfg, 7)
        cond = build_condition(params, toy_conditioning(cfg, rng), np.ones(4), 3)
        bad = np.full((4, cfg.d_sum), np.nan)
        with pytest.raises(ValueError):
            denoise(params, bad, np.zeros((4, cfg.d_sum)), cond)

    def test_mask_contract(self):
        """Altering inputs at masked frames never changes the loss."""
        cfg = small_config()
        rng = np.random.default_rng(7)
        params = init_params(cfg, 8)
        item = toy_item(cfg, rng, n_frames=40, n_real=32)
        sched = make_schedule(50, 1e-4, 0.02)
        settings = TrainSettings(cutoff=4, steps=1)
        weights = LossWeights(1.0, 2.5, 0.1, 0.3)
        eps = rng.standard_normal((32, cfg.d_sum))
        base, _ = sample_loss_and_grads(params, item, sched, weights, settings, 11, eps)

        altered = TrainItem(data=item.data.copy(), mask=item.mask, cond=item.cond)
        altered.data[32:] = rng.standard_normal((8, cfg.d_sum)) * 100.0
        # padded rows of the clean state are ignored: the pipeline only reads
        # real frames, so the loss must be bitwise identical
        again, _ = sample_loss_and_grads(params, altered, sched, weights, settings, 11, eps)
        assert base.total == again.total


class TestAnalyticDenoiser:
    def test_degenerate_prior(self):
        sched = make_schedule(100, 1e-4, 0.02)
        mu0 = np.array([1.5, -2.0])
        got = analytic_gaussian_denoise(mu0, 0.0, np.array([100.0, -100.0]), 50, sched)
        np.testing.assert_allclose(got, mu0, atol=1e-12)

    def test_no_noise_limit(self):
        sched = make_schedule(100, 1e-6, 1e-6)
        x_t = np.array([0.7])
        got = analytic_gaussian_denoise(np.array([0.0]), 1.0, x_t, 1, sched)
        np.testing.assert_allclose(got, x_t, atol=1e-3)

    def test_known_value(self):
        # v0=1, abar=0.25, mu0=0, x_t=1 -> 0.5 / (0.25 + 0.75) = 0.5
        sched = make_schedule(300, 1e-4, 0.03)
        t = int(np.argmin(np.abs(sched.alpha_bar - 0.25))) + 1
        abar = sched.abar(t)
        got = analytic_gaussian_denoise(np.array([0.0]), 1.0, np.array([1.0]), t, sched)
        want = (np.sqrt(abar)) / (abar + 1 - abar)
        np.testing.assert_allclose(got, [want], atol=1e-12)
        assert abs(0.5 / (0.25 + 0.75) - 0.5) < 1e-15

    def test_matches_bayes_oracle(self):
        sched = make_schedule(100, 1e-4, 0.02)
        rng = np.random.default_rng(8)
        for _ in range(50):
            t = int(rng.integers(1, 101))
            mu0, v0 = rng.standard_normal(), rng.uniform(0.1, 3.0)
            x_t = rng.standard_normal()
            got = analytic_gaussian_denoise(np.array([mu0]), v0, np.array([x_t]), t, sched)
            want = oracles.gaussian_posterior(mu0, v0, x_t, sched.abar(t))
            assert abs(got[0] - want) < 1e-9


class TestGradients:
    def test_pipeline_grads_match_fd(self):
        cfg = small_config()
        rng = np.random.default_rng(9)
        params = init_params(cfg, 1)
        item = toy_item(cfg, rng, n_frames=32)
        sched = make_schedule(60, 1e-4, 0.02)
        weights = LossWeights(1.0, 2.5, 0.1, 0.3)
        settings = TrainSettings(cutoff=8, steps=1)
        t = 30
        eps = rng.standard_normal((32, cfg.d_sum))

        _, grads = sample_loss_and_grads(params, item, sched, weights, settings, t, eps)

        def loss_of(p):
            return sample_loss_and_grads(p, item, sched, weights, settings, t, eps)[0].total

        h = 1e-3
        flat = params.flatten()
        analytic = np.concatenate([grads[k].ravel() for k in sorted(grads)])
        probe = rng.choice(flat.size, size=60, replace=False)
        for idx in probe:
            vec = flat.copy()
            vec[idx] = flat[idx] + h
            plus = loss_of(params.with_flat(vec))
            vec[idx] = flat[idx] - h
            minus = loss_of(params.with_flat(vec))
            fd = (plus - minus) / (2 * h)
            denom = max(abs(fd), abs(analytic[idx]), 1e-8)
            assert abs(fd - analytic[idx]) / denom < 1e-4, idx

    def test_single_branch_grads_match_fd(self):
        cfg = small_config(dual_branch=False)
        rng = np.random.default_rng(10)
        params = init_params(cfg, 2)
        item = toy_item(cfg, rng, n_frames=24)
        sched = make_schedule(60, 1e-4, 0.02)
        weights = LossWeights(1.0, 2.5, 0.1, 0.3)
        settings = TrainSettings(cutoff=4, steps=1, decomposition=False)
        eps = rng.standard_normal((24, cfg.d_sum))
        _, grads = sample_loss_and_grads(params, item, sched, weights, settings, 12, eps)

        def loss_of(p):
            return sample_loss_and_grads(p, item, sched, weights, settings, 12, eps)[0].total

        h = 1e-3
        flat = params.flatten()
        analytic = np.concatenate([grads[k].ravel() for k in sorted(grads)])
        for idx in rng.choice(flat.size, size=30, replace=False):
            vec = flat.copy()
            vec[idx] = flat[idx] + h
            plus = loss_of(params.with_flat(vec))
            vec[idx] = flat[idx] - h
            minus = loss_of(params.with_flat(vec))
            fd = (plus - minus) / (2 * h)
            denom = max(abs(fd), abs(analytic[idx]), 1e-8)
            assert abs(fd - analytic[idx]) / denom < 1e-4, idx


class TestTraining:
    def test_zero_steps_unchanged(self):
        cfg = small_config()
        rng = np.random.default_rng(11)
        params = init_params(cfg, 3)
        item = toy_item(cfg, rng)
        sched = make_schedule(50, 1e-4, 0.02)
        out, log = train(params, [item], sched, LossWeights(), TrainSettings(steps=0, cutoff=8), 0)
        assert log == []
        for k in params.arrays:
            np.testing.assert_array_equal(out.arrays[k], params.arrays[k])

    def test_deterministic(self):
        cfg = small_config()
        rng = np.random.default_rng(12)
        params = init_params(cfg, 4)
        items = [toy_item(cfg, rng) for _ in range(3)]
        sched = make_schedule(50, 1e-4, 0.02)
        settings = TrainSettings(steps=20, cutoff=8, lr=0.02)
        a, _ = train(params, items, sched, LossWeights(), settings, 123)
        b, _ = train(params, items, sched, LossWeights(), settings, 123)
        for k in a.arrays:
            np.testing.assert_array_equal(a.arrays[k], b.arrays[k])

    def test_overfit_single_sample(self):
        cfg = small_config(hidden=32)
        rng = np.random.default_rng(13)
        params = init_params(cfg, 5)
        item = toy_item(cfg, rng, n_frames=32)
        sched = make_schedule(50, 1e-4, 0.02)
        settings = TrainSettings(steps=2000, cutoff=8, lr=0.05)
        out, log = train(params, [item], sched, LossWeights(), settings, 7)
        first = np.mean([b.total for _, b in log[:50]])
        last = np.mean([b.total for _, b in log[-50:]])
        assert last < 0.01 * first

    def test_empty_dataset(self):
        cfg = small_config()
        with pytest.raises(ValueError):
            train(init_params(cfg, 0), [], make_schedule(10, 1e-4, 0.02),
                  LossWeights(), TrainSettings(steps=1), 0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 6)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, params, extra={"note": "x"})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": "x"}
        assert loaded.config == cfg
        for k in params.arrays:
            np.testing.assert_array_equal(loaded.arrays[k], params.arrays[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        path.write_bytes(b"NOTAMAGI" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 6)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, params)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ValueError):
            load_checkpoint(path)
