import math

import numpy as np
import pytest
from scipy import stats

from csiwm import model as wm
from csiwm.simulator import MotionConfig, SceneConfig, generate_dataset
from csiwm.trainer import (
    LOG_FIELDS,
    AdamState,
    NumericalError,
    RunSpec,
    SegmentData,
    TrainConfig,
    adamw_step,
    compute_step,
    init_state,
    lr_schedule,
    sample_rollout_segments,
    train,
    train_step,
    warmup_steps,
    wd_schedule,
)


def fake_data(lengths, rows=4, taps=4):
    inputs = [np.full((n, 2, rows, taps), float(i)) + np.arange(n)[:, None, None, None] * 1e-3
              for i, n in enumerate(lengths)]
    actions = [np.tile(np.arange(n - 1, dtype=float)[:, None], (1, 2)) for n in lengths]
    positions = [np.zeros((n, 3)) for n in lengths]
    return SegmentData(inputs, actions, positions)


def tiny_spec(**train_kw):
    enc = wm.EncoderConfig(depths=[1, 1], channels=[4, 4], latent_dim=4)
    model = wm.ModelConfig(encoder=enc, dyn_hidden=8, idm_hidden=8)
    kw = dict(epochs=1, batch_size=4, horizon=3, steps_per_epoch=3)
    kw.update(train_kw)
    return RunSpec(model=model, train=TrainConfig(**kw))


@pytest.fixture(scope="module")
def small_data():
    scene = SceneConfig(n_subcarriers=32)
    return SegmentData.from_trajectories(generate_dataset(scene, MotionConfig(), 2, 20, seed=0), 8)


class TestSampling:
    def test_single_segment(self):
        data = fake_data([4])
        frames, actions, pick = sample_rollout_segments(data, 3, 5, np.random.default_rng(0))
        assert frames.shape == (5, 4, 2, 4, 4) and actions.shape == (5, 3, 2)
        assert np.all(pick == [0, 0])

    def test_start_count(self):
        assert len(fake_data([11]).valid_starts(3)) == 11 - 3

    def test_no_straddling(self):
        data = fake_data([6, 9])
        frames, actions, pick = sample_rollout_segments(data, 4, 200, np.random.default_rng(1))
        for f, a, (i, s) in zip(frames, actions, pick):
            assert np.all(np.floor(f[:, 0, 0, 0]) == i)
            np.testing.assert_array_equal(a[:, 0], np.arange(s, s + 4))

    def test_too_short(self):
        with pytest.raises(ValueError):
            fake_data([3, 2]).valid_starts(3)

    def test_deterministic(self):
        data = fake_data([8, 8])
        a = sample_rollout_segments(data, 2, 10, 7)[2]
        b = sample_rollout_segments(data, 2, 10, 7)[2]
        np.testing.assert_array_equal(a, b)

    def test_uniform_chi_square(self):
        data = fake_data([8, 6])
        starts = data.valid_starts(2)
        _, _, pick = sample_rollout_segments(data, 2, 10_000, np.random.default_rng(3))
        keys = [tuple(p) for p in starts.tolist()]
        counts = np.array([np.sum((pick[:, 0] == i) & (pick[:, 1] == s)) for i, s in keys])
        assert counts.sum() == 10_000
        _, p = stats.chisquare(counts)
        assert p > 0.003  # 3-sigma


class TestSchedules:
    cfg = TrainConfig()

    def test_lr_endpoints(self):
        total = 1000
        w = warmup_steps(total, self.cfg)
        assert w == 50
        assert lr_schedule(0, total, self.cfg) == 1e-4
        assert lr_schedule(w, total, self.cfg) == 3e-4
        assert lr_schedule(total, total, self.cfg) == 1e-6

    def test_lr_continuous_at_junction(self):
        total = 777
        w = warmup_steps(total, self.cfg)
        assert w == math.ceil(0.05 * total)
        assert abs(lr_schedule(w + 1, total, self.cfg) - 3e-4) < 1e-6
        assert abs(lr_schedule(w - 1, total, self.cfg) - 3e-4) < 1e-5

    def test_lr_shape(self):
        total = 400
        v = [lr_schedule(s, total, self.cfg) for s in range(total + 1)]
        w = warmup_steps(total, self.cfg)
        assert all(a < b for a, b in zip(v[:w], v[1:w + 1]))
        assert all(a >= b for a, b in zip(v[w:], v[w + 1:]))

    def test_wd(self):
        assert wd_schedule(0, 100, self.cfg) == 0.04
        assert wd_schedule(100, 100, self.cfg) == 0.4
        assert wd_schedule(50, 100, self.cfg) == pytest.approx(0.22)

    def test_out_of_range(self):
        for f in (lr_schedule, wd_schedule):
            with pytest.raises(ValueError):
                f(-1, 10, self.cfg)
            with pytest.raises(ValueError):
                f(11, 10, self.cfg)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_frac=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(horizon=0)
        with pytest.raises(ValueError):
            TrainConfig(ablate=["nope"])


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"x.w": np.array([1.0, -2.0])}
        adamw_step(p, {"x.w": np.zeros(2)}, AdamState(), lr=0.01, wd=0.0)
        np.testing.assert_array_equal(p["x.w"], [1.0, -2.0])

    def test_decoupled_decay(self):
        p = {"x.w": np.array(1.0)}
        adamw_step(p, {"x.w": np.array(0.0)}, AdamState(), lr=0.01, wd=0.1)
        assert float(p["x.w"]) == pytest.approx(0.999, abs=1e-15)

    def test_no_decay_on_bias_and_norm(self):
        p = {"x.b": np.array(1.0), "bn.g": np.array(1.0)}
        adamw_step(p, {k: np.array(0.0) for k in p}, AdamState(), lr=0.01, wd=0.1)
        assert float(p["x.b"]) == 1.0 and float(p["bn.g"]) == 1.0

    def test_first_step(self):
        lr, eps = 1e-3, 1e-8
        p = {"x.w": np.array(0.0)}
        adamw_step(p, {"x.w": np.array(1.0)}, AdamState(), lr=lr, wd=0.0, eps=eps)
        assert float(p["x.w"]) == pytest.approx(-lr / (1 + eps), rel=1e-12)

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            adamw_step({"x.w": np.ones(2)}, {"x.w": np.array([1.0, np.nan])}, AdamState(), 0.1, 0.0)


class TestTrain:
    def test_zero_epochs(self, small_data):
        spec = tiny_spec(epochs=0)
        params, rows = train(spec, small_data)
        fresh = wm.init_model(spec.model, small_data.input_shape, spec.train.seed)
        assert rows == []
        assert wm.params_hash(params.theta) == wm.params_hash(fresh.theta)

    def test_reproducible_and_psi_frozen(self, small_data):
        spec = tiny_spec()
        p1, r1 = train(spec, small_data)
        p2, r2 = train(spec, small_data)
        fresh = wm.init_model(spec.model, small_data.input_shape, 0)
        for a, b in ((p1.theta, p2.theta), (p1.dyn, p2.dyn), (p1.theta_ema, p2.theta_ema)):
            assert wm.params_hash(a) == wm.params_hash(b)
        assert wm.params_hash(p1.psi) == wm.params_hash(fresh.psi)
        assert [r["total"] for r in r1] == [r["total"] for r in r2]
        assert wm.params_hash(p1.theta) != wm.params_hash(fresh.theta)

    def test_ema_recursion(self, small_data):
        spec = tiny_spec(ema_decay=0.9)
        state = init_state(spec, small_data.input_shape)
        expected = {k: v.copy() for k, v in state.params.theta_ema.items()}
        for _ in range(3):
            train_step(state, small_data, spec, total_steps=3)
            expected = {k: 0.9 * expected[k] + 0.1 * state.params.theta[k] for k in expected}
        for k in expected:
            np.testing.assert_allclose(state.params.theta_ema[k], expected[k], rtol=0, atol=1e-12)

    def test_ablate_equals_zero_weight(self, small_data):
        a = tiny_spec(ablate=["var", "cov", "idm"])
        b = tiny_spec()
        b = b.model_copy(update={"loss": b.loss.model_copy(update={"var": 0.0, "cov": 0.0, "idm": 0.0})})
        pa, ra = train(a, small_data)
        pb, rb = train(b, small_data)
        assert wm.params_hash(pa.theta) == wm.params_hash(pb.theta)
        assert [r["total"] for r in ra] == [r["total"] for r in rb]

    def test_disabled_terms_zero_gradient(self, small_data):
        spec = tiny_spec()
        params = wm.init_model(spec.model, small_data.input_shape, 0)
        frames, actions, _ = sample_rollout_segments(small_data, 3, 4, 0)
        mask = np.zeros((4,) + frames.shape[-2:], bool)
        only = compute_step(params.copy(), frames, actions, mask, spec.loss,
                            disabled=("tf", "roll", "var", "idm"), update_stats=False)
        # cov alone; scaling its weight scales gradients, disabling it zeroes them
        none = compute_step(params.copy(), frames, actions, mask, spec.loss,
                            disabled=("tf", "roll", "var", "cov", "idm"), update_stats=False)
        assert any(np.any(g != 0) for g in only.grads.values())
        assert all(np.all(g == 0) for g in none.grads.values())

    def test_log_csv(self, small_data, tmp_path):
        path = tmp_path / "log.csv"
        _, rows = train(tiny_spec(), small_data, log_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(LOG_FIELDS)
        assert len(lines) == len(rows) + 1 == 4
        assert [r["step"] for r in rows] == [0, 1, 2]

    def test_resume_matches_uninterrupted(self, small_data):
        full = tiny_spec(epochs=2)
        _, rows_full = train(full, small_data)
        state = init_state(full, small_data.input_shape)

        class Interrupt(Exception):
            pass

        def stop(st, epoch):
            raise Interrupt

        with pytest.raises(Interrupt):
            train(full, small_data, state=state, on_epoch_end=stop)
        assert state.step == 3
        _, rows_rest = train(full, small_data, state=state)
        assert [r["total"] for r in rows_full[3:]] == [r["total"] for r in rows_rest]

    def test_non_finite_loss_aborts(self, small_data):
        spec = tiny_spec()
        state = init_state(spec, small_data.input_shape)
        state.params.theta["enc.out.g"][:] = np.nan
        with pytest.raises(NumericalError):
            train(spec, small_data, state=state)

    def test_input_shape_mismatch(self, small_data):
        spec = tiny_spec()
        state = init_state(spec, (2, 8, 4))
        with pytest.raises(ValueError):
            train(spec, small_data, state=state)

    @pytest.mark.slow
    def test_overfit_smoke(self):
        # one trajectory, one fixed unmasked segment and a frozen target: the loss should fall steadily
        scene = SceneConfig(n_subcarriers=32)
        data = SegmentData.from_trajectories(generate_dataset(scene, MotionConfig(), 1, 200, seed=2), 8)
        base = tiny_spec(epochs=1, steps_per_epoch=200, lr_peak=1e-3, lr_start=3e-4,
                         ema_decay=1.0)
        spec = RunSpec(model=base.model, loss=base.loss, train=base.train, mask_ratio=0.0)
        state = init_state(spec, data.input_shape)
        starts = data.valid_starts(spec.train.horizon)[:1]
        total = np.array([train_step(state, data, spec, 200, starts)[0].total for _ in range(200)])
        avg = total.reshape(10, 20).mean(1)
        assert avg[-1] < avg[0]
        assert np.all(np.diff(avg) < 0)
