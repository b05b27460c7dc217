import numpy as np
import pytest

from opcert import autodiff as ad
from opcert import neuralop as no
from opcert.core import GridError, GridSpec, SeededRng


def small_config(**kwargs):
    defaults = dict(grid=GridSpec((64,)), width=8, layers=2, levels=2, wavelet="db6")
    defaults.update(kwargs)
    return no.WnoConfig(**defaults)


class TestForward:
    def test_zero_parameters_zero_output(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(0))
        for p in model.parameters():
            p.value[...] = 0.0
        x = SeededRng(1).generator().standard_normal((3, 64))
        assert np.array_equal(model.predict(x), np.zeros((3, 64)))

    def test_random_init_bounded(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(2))
        x = SeededRng(3).generator().standard_normal((4, 64))
        y = model.predict(x)
        assert np.all(np.isfinite(y))
        assert np.max(np.abs(y)) < 1e3

    def test_vsn_zero_params_zero_output(self):
        model = no.WnoModel.initialize(small_config(activation="vsn"), SeededRng(4))
        for p in model.parameters():
            p.value[...] = 0.0
        x = SeededRng(5).generator().standard_normal((2, 64))
        assert np.array_equal(model.predict(x), np.zeros((2, 64)))

    def test_linear_path_matches_dense_oracle(self):
        # identity activations and identity wavelet weights collapse the
        # network to a per-point affine composition
        cfg = no.WnoConfig(
            grid=GridSpec((16,)), width=4, layers=2, levels=2,
            wavelet="db4", activation="identity", proj_hidden=5,
        )
        model = no.WnoModel.initialize(cfg, SeededRng(6))
        for i in range(cfg.layers):
            model.params[f"layer{i}.r"].value[...] = np.eye(4)
        x = SeededRng(7).generator().standard_normal((2, 16))
        got = model.predict(x)
        coords = np.linspace(0, 1, 16)[:, None]
        p = model.params
        for b in range(2):
            feats = np.concatenate([x[b][:, None], coords], axis=1)
            v = feats @ p["uplift.w"].value + p["uplift.b"].value
            for i in range(cfg.layers):
                v = v + v @ p[f"layer{i}.k"].value + p[f"layer{i}.b"].value
            out = (v @ p["proj1.w"].value + p["proj1.b"].value) @ p["proj2.w"].value
            out = out + p["proj2.b"].value
            assert np.max(np.abs(got[b] - out[:, 0])) < 1e-10

    def test_grid_mismatch_rejected(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(8))
        with pytest.raises(GridError):
            model.predict(np.zeros((1, 65)))
        with pytest.raises(GridError):
            model.predict(np.zeros((1, 96)))  # 1.5x is not dyadic

    def test_dyadic_refinement_accepted(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(9))
        assert model.predict(np.zeros((1, 128))).shape == (1, 128)
        assert model.predict(np.zeros((1, 32))).shape == (1, 32)

    def test_resolution_consistency_after_training(self):
        # refined-grid output restricted to the coarse grid stays within
        # 10x the training error of the coarse-grid output
        cfg = small_config(width=8, layers=2)
        model = no.WnoModel.initialize(cfg, SeededRng(10))
        xs = np.arange(64) / 64
        u = np.sin(2 * np.pi * xs)[None, :]
        y = np.cos(2 * np.pi * xs)[None, :] * 0.3
        no.train(model, u, y, no.LossConfig("l2"), 300, 1, SeededRng(11), lr=2e-3)
        coarse = model.predict(u)[0]
        train_err = float(np.sqrt(np.mean((coarse - y[0]) ** 2)))
        fine_in = np.sin(2 * np.pi * np.arange(128) / 128)[None, :]
        fine = model.predict(fine_in)[0]
        drift = float(np.sqrt(np.mean((fine[::2] - coarse) ** 2)))
        assert drift < 10 * max(train_err, 1e-6)


class TestVsnForward:
    def test_subthreshold_sequence(self):
        params = no.VsnParams(np.array(0.5), np.array(1.0), steps=2)
        out, spikes = no.vsn_forward(np.array([[0.6], [0.6]]), params)
        # membranes 0.6 then 0.9: never reaches 1.0
        assert spikes == 0
        assert np.array_equal(out, np.zeros((2, 1)))

    def test_immediate_spike(self):
        params = no.VsnParams(np.array(0.5), np.array(1.0), steps=1)
        out, spikes = no.vsn_forward(np.array([[2.0]]), params)
        assert spikes == 1
        expected, _ = ad.gelu_value_grad(np.array(2.0))
        assert abs(out[0, 0] - expected) < 1e-15

    def test_zero_input_silent(self):
        params = no.VsnParams(np.array(0.9), np.array(0.5), steps=4)
        out, spikes = no.vsn_forward(np.zeros((4, 3)), params)
        assert spikes == 0
        assert np.array_equal(out, np.zeros((4, 3)))

    def test_matches_hand_stepped_oracle(self):
        gen = SeededRng(12).generator()
        for _ in range(50):
            steps = int(gen.integers(1, 6))
            width = int(gen.integers(1, 4))
            beta = gen.uniform(0.0, 1.2, width)
            th = gen.uniform(-0.5, 1.5, width)
            z = gen.standard_normal((steps, width)) * 2.0
            out, spikes = no.vsn_forward(z, no.VsnParams(beta, th, steps))
            # independent scalar re-implementation
            exp_spikes = 0
            for c in range(width):
                m = 0.0
                for t in range(steps):
                    m = beta[c] * m + z[t, c]
                    if m >= th[c]:
                        exp_spikes += 1
                        m = 0.0
                        ref, _ = ad.gelu_value_grad(np.array(z[t, c]))
                    else:
                        ref = 0.0
                    assert out[t, c] == pytest.approx(float(ref), abs=0.0)
            assert spikes == exp_spikes

    def test_surrogate_grad_contract(self):
        assert no.vsn_surrogate_grad(1.0, 1.0, 10.0) == pytest.approx(2.5)
        assert no.vsn_surrogate_grad(0.1, 0.0, 10.0) == pytest.approx(1.9661, abs=1e-3)
        with pytest.raises(ValueError):
            no.vsn_surrogate_grad(0.0, 0.0, -1.0)


class TestSpikingActivity:
    def test_high_threshold_silences(self):
        model = no.WnoModel.initialize(small_config(activation="vsn"), SeededRng(13))
        for i in range(model.config.layers):
            model.params[f"layer{i}.th"].value[...] = 1e6
        x = SeededRng(14).generator().standard_normal((3, 64))
        assert np.array_equal(no.spiking_activity(model, x), np.zeros(2))

    def test_very_low_threshold_saturates(self):
        model = no.WnoModel.initialize(small_config(activation="vsn"), SeededRng(15))
        for i in range(model.config.layers):
            model.params[f"layer{i}.th"].value[...] = -1e6
            model.params[f"layer{i}.beta"].value[...] = 0.0
        x = np.abs(SeededRng(16).generator().standard_normal((3, 64))) + 0.1
        assert np.array_equal(no.spiking_activity(model, x), np.full(2, 100.0))

    def test_matches_recount_oracle(self):
        model = no.WnoModel.initialize(small_config(activation="vsn"), SeededRng(17))
        x = SeededRng(18).generator().standard_normal((5, 64))
        reported = no.spiking_activity(model, x)
        _, gates = model.forward_nodes(x)
        recounted = [
            100.0 * np.count_nonzero(g.value) / g.value.size for g in gates
        ]
        assert np.allclose(reported, recounted, atol=1e-12)

    def test_rejects_non_spiking(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(19))
        with pytest.raises(no.NonSpikingModelError):
            no.spiking_activity(model, np.zeros((1, 64)))


class TestLosses:
    def test_pinball_half_is_half_gap_norm(self):
        gen = SeededRng(20).generator()
        y, p = gen.standard_normal(32), gen.standard_normal(32)
        expected = 0.5 * np.linalg.norm(y - p)
        assert no.loss_pinball(p, y, 0.5) == pytest.approx(expected, rel=1e-12)

    def test_pinball_branches(self):
        y = np.array([2.0])  # \|y\| > \|p\|
        p = np.array([1.0])
        assert no.loss_pinball(p, y, 0.9) == pytest.approx(0.9)
        assert no.loss_pinball(y, p, 0.9) == pytest.approx(0.1)

    def test_pinball_rejects_bad_quantile(self):
        with pytest.raises(ValueError):
            no.loss_pinball(np.ones(2), np.ones(2), 1.5)

    def test_slf_reduces_to_base(self):
        assert no.loss_slf(0.7, 0.3, 1.0, 0.0) == pytest.approx(0.7)
        assert no.loss_slf(0.7, 0.3, 2.0, 0.5) == pytest.approx(1.55)

    def test_l2_is_mse(self):
        assert no.loss_l2(np.zeros(4), np.full(4, 2.0)) == pytest.approx(4.0)

    @pytest.mark.parametrize("eta", [0.025, 0.5, 0.975])
    def test_constant_pinball_minimizer_is_quantile(self, eta):
        # positive draws make the norm comparison equivalent to the usual
        # sign comparison, so the minimizer must be the empirical quantile
        gen = SeededRng(21).generator()
        draws = gen.uniform(1.0, 3.0, 1000)
        order = np.sort(draws)
        losses = [
            sum(no.loss_pinball(np.array([c]), np.array([y]), eta) for y in draws)
            for c in order
        ]
        c_star = order[int(np.argmin(losses))]
        k = int(np.ceil(eta * 1000)) - 1
        k = min(max(k, 0), 999)
        lo = order[max(k - 1, 0)]
        hi = order[min(k + 1, 999)]
        assert lo <= c_star <= hi


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ad.Parameter(np.array([1.0, 2.0]), "p")
        before = p.value.copy()
        no.adam_step([p], no.AdamState(), lr=0.1)
        assert np.array_equal(p.value, before)

    def test_first_step_magnitude_close_to_lr(self):
        p = ad.Parameter(np.array([1.0]), "p")
        p.grad[...] = 0.5
        no.adam_step([p], no.AdamState(), lr=0.01)
        assert abs((1.0 - p.value[0]) - 0.01) < 1e-6

    def test_quadratic_matches_reference_oracle(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = ad.Parameter(np.array([0.0]), "p")
        state = no.AdamState()
        # independent scalar reimplementation
        x_ref, m_ref, v_ref = 0.0, 0.0, 0.0
        for t in range(1, 51):
            g = 2.0 * (p.value[0] - 3.0)
            p.zero_grad()
            p.grad[...] = g
            no.adam_step([p], state, lr=lr, beta1=b1, beta2=b2, eps=eps)
            g_ref = 2.0 * (x_ref - 3.0)
            m_ref = b1 * m_ref + (1 - b1) * g_ref
            v_ref = b2 * v_ref + (1 - b2) * g_ref * g_ref
            x_ref -= lr * (m_ref / (1 - b1**t)) / (np.sqrt(v_ref / (1 - b2**t)) + eps)
            assert p.value[0] == pytest.approx(x_ref, abs=1e-12)
        assert abs(p.value[0] - 3.0) < 0.5


class TestTraining:
    def test_overfit_single_sample(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(22))
        x = SeededRng(23).generator().standard_normal((1, 64))
        y = np.cos(2 * np.pi * np.arange(64) / 64)[None, :] * 0.4
        trace = no.train(model, x, y, no.LossConfig("l2"), 500, 1, SeededRng(24), lr=2e-3)
        assert trace[-1] < 1e-4

    def test_zero_epochs_no_change(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(25))
        before = model.parameter_vector()
        trace = no.train(
            model, np.zeros((2, 64)), np.zeros((2, 64)), no.LossConfig("l2"), 0, 2,
            SeededRng(26),
        )
        assert trace == []
        assert np.array_equal(model.parameter_vector(), before)

    def test_deterministic_given_seed(self):
        def run():
            model = no.WnoModel.initialize(small_config(), SeededRng(27))
            x = SeededRng(28).generator().standard_normal((6, 64))
            y = SeededRng(29).generator().standard_normal((6, 64)) * 0.1
            trace = no.train(model, x, y, no.LossConfig("l2"), 5, 3, SeededRng(30))
            return trace, model.parameter_vector()

        t1, v1 = run()
        t2, v2 = run()
        assert t1 == t2
        assert np.array_equal(v1, v2)

    def test_empty_dataset_rejected(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(31))
        with pytest.raises(ValueError):
            no.train(model, np.zeros((0, 64)), np.zeros((0, 64)),
                     no.LossConfig("l2"), 1, 1, SeededRng(32))

    def test_divergence_aborts_with_diagnostic(self):
        model = no.WnoModel.initialize(small_config(), SeededRng(33))
        x = SeededRng(34).generator().standard_normal((2, 64))
        y = np.full((2, 64), np.nan)
        with pytest.raises(no.TrainingDiverged, match="epoch 0"):
            no.train(model, x, y, no.LossConfig("l2"), 1, 2, SeededRng(35))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = small_config(activation="vsn", width=6, proj_hidden=13)
        model = no.WnoModel.initialize(cfg, SeededRng(36))
        model.norm = no.NormStats(0.1, 2.0, -0.3, 1.7)
        path = tmp_path / "model.ckpt"
        no.save_model(model, path)
        loaded = no.load_model(path)
        assert loaded.config == cfg
        assert loaded.norm == model.norm
        assert np.array_equal(loaded.parameter_vector(), model.parameter_vector())
        x = SeededRng(37).generator().standard_normal((2, 64))
        assert np.array_equal(loaded.predict(x), model.predict(x))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        from opcert.serialio import FormatError

        with pytest.raises(FormatError):
            no.load_model(path)
