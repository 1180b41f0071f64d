import numpy as np
import pytest
from conftest import fd_gradient_check, tiny_batch

from tsecl import dsp, model
from tsecl.datagen import make_profile, mix_at_sdr, synth_utterance
from tsecl.metrics import isdr_db, si_sdr_db, snr_db
from tsecl.model import MaskNetConfig

TINY = MaskNetConfig(blocks=1, hidden_dim=4, embed_dim=4, stft=dsp.StftConfig(8, 2, 8))


class TestShapes:
    def test_tiny_param_count(self):
        # W 4x(10+4) + U 4x4 + b 4 + head 10x4 + 10
        assert TINY.n_bins == 5
        assert model.count_params(TINY) == 56 + 16 + 4 + 40 + 10 == 126

    def test_init_deterministic(self):
        a, b = model.init(TINY, 3), model.init(TINY, 3)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
        c = model.init(TINY, 4)
        assert not np.array_equal(a.params["block0.W"], c.params["block0.W"])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            MaskNetConfig(hidden_dim=0)
        with pytest.raises(ValueError):
            MaskNetConfig(loss_kind="L1")

    def test_config_dict_round_trip(self):
        assert MaskNetConfig.from_dict(TINY.to_dict()) == TINY

    def test_embedding_shape_checked(self):
        m = model.init(TINY, 0)
        with pytest.raises(ValueError):
            model.forward(m, np.zeros(40), np.zeros(3))


class TestMasking:
    def test_identity_mask_returns_mixture(self):
        w = np.random.default_rng(0).standard_normal(3000)
        cfg = MaskNetConfig()
        est, _ = model.forward(model.identity_mask_model(cfg), w, np.ones(32) / np.sqrt(32))
        assert np.max(np.abs(est - w)) < 1e-10

    def test_zero_mask_returns_silence(self):
        w = np.random.default_rng(1).standard_normal(1000)
        cfg = MaskNetConfig()
        est, _ = model.forward(model.identity_mask_model(cfg, value=0.0), w, np.zeros(32))
        assert np.all(est == 0)

    def test_fresh_init_is_identity(self):
        w = np.random.default_rng(2).standard_normal(2000)
        est, _ = model.forward(model.init(MaskNetConfig(), 0), w, np.ones(32) / np.sqrt(32))
        assert np.max(np.abs(est - w)) < 0.2 * np.max(np.abs(w))

    def test_mask_linearity(self):
        rng = np.random.default_rng(3)
        cfg = dsp.StftConfig()
        w = rng.standard_normal(2000)
        shape = (cfg.n_frames(2000), cfg.n_bins)
        m1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        m2 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        lhs = model.apply_mask(w, 2.0 * m1 - 0.5 * m2, cfg)
        rhs = 2.0 * model.apply_mask(w, m1, cfg) - 0.5 * model.apply_mask(w, m2, cfg)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_oracle_mask_ceiling(self):
        cfg = dsp.StftConfig()
        s = synth_utterance(make_profile("a", "A", 1), 1.0, 1)
        i = synth_utterance(make_profile("b", "B", 2), 1.0, 2)
        m, _ = mix_at_sdr(s, i, 0.0)
        est = model.apply_mask(m, model.oracle_mask(m, s, cfg), cfg)
        assert isdr_db(m, est, s) >= 20.0


class TestLoss:
    def test_values(self):
        s = np.random.default_rng(4).standard_normal(200)
        assert model.loss(s, s, "negSNR") == -100.0
        assert model.loss(3 * s, s, "negSISDR") == -100.0
        w = s + 0.1 * np.random.default_rng(5).standard_normal(200)
        assert model.loss(w, s, "negSNR") == -snr_db(s, w)
        assert model.loss(w, s, "negSISDR") == -si_sdr_db(w, s)
        with pytest.raises(ValueError):
            model.loss(w, s, "L2")

    @pytest.mark.parametrize("kind", model.LOSS_KINDS)
    def test_loss_grad_matches_fd(self, kind):
        rng = np.random.default_rng(6)
        s, w = rng.standard_normal((2, 30))
        w = s + 0.5 * w
        g = model.loss_grad(w, s, kind)
        h = 1e-6
        for i in range(30):
            e = np.zeros(30)
            e[i] = h
            num = (model.loss(w + e, s, kind) - model.loss(w - e, s, kind)) / (2 * h)
            assert g[i] == pytest.approx(num, rel=1e-6, abs=1e-9)

    def test_clipped_value_has_zero_gradient(self):
        s = np.random.default_rng(7).standard_normal(50)
        assert np.all(model.loss_grad(s, s, "negSNR") == 0)


class TestBackward:
    @pytest.mark.parametrize("kind", model.LOSS_KINDS)
    @pytest.mark.parametrize("seed", range(2))
    def test_finite_difference(self, kind, seed):
        m = model.init(TINY, seed)
        assert fd_gradient_check(m, tiny_batch(TINY, seed=seed), kind) < 1e-4

    def test_finite_difference_two_blocks(self):
        cfg = MaskNetConfig(blocks=2, hidden_dim=3, embed_dim=2, stft=dsp.StftConfig(8, 4, 8))
        m = model.init(cfg, 5)
        assert fd_gradient_check(m, tiny_batch(cfg, seed=5), "negSNR") < 1e-4

    def test_zero_influence_coordinates(self):
        # imaginary mask at DC and Nyquist multiplies a real bin and is dropped by the ISTFT
        m = model.init(TINY, 0)
        g = model.batch_gradient(m, tiny_batch(TINY), "negSNR").grads
        f = TINY.n_bins
        for row in (f, 2 * f - 1):
            assert np.all(g["out.W"][row] == 0)
            assert g["out.b"][row] == 0

    def test_keep_mask_selects_samples(self):
        m = model.init(TINY, 1)
        batch = tiny_batch(TINY, n=3, seed=2)
        partial = model.batch_gradient(m, batch, keep_mask=[True, False, True])
        sub = model.batch_gradient(m, [batch[0], batch[2]])
        for k in m.params:
            np.testing.assert_allclose(partial.grads[k], sub.grads[k], atol=1e-14)
        full = model.batch_gradient(m, batch, keep_mask=[True, True, True])
        plain = model.batch_gradient(m, batch)
        for k in m.params:
            assert np.array_equal(full.grads[k], plain.grads[k])

    def test_nothing_kept(self):
        m = model.init(TINY, 1)
        bg = model.batch_gradient(m, tiny_batch(TINY), keep_mask=[False, False])
        assert bg.skipped
        assert all(np.all(v == 0) for v in bg.grads.values())

    def test_stale_cache(self):
        m = model.init(TINY, 0)
        (mix, e, s), = tiny_batch(TINY, n=1)
        est, cache = model.forward(m, mix, e)
        m.version += 1
        with pytest.raises(ValueError):
            model.backward(m, cache, est, s)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = model.init(TINY, 9)
        model.save_checkpoint(tmp_path / "c.npz", m, step=12, seed=9, extra={"phase": 1})
        back, meta = model.load_checkpoint(tmp_path / "c.npz")
        assert back.config == TINY
        assert meta["step"] == 12 and meta["seed"] == 9 and meta["extra"] == {"phase": 1}
        for k in m.params:
            assert back.params[k].tobytes() == m.params[k].tobytes()

    def test_bytes_stable(self, tmp_path):
        m = model.init(TINY, 9)
        model.save_checkpoint(tmp_path / "a.npz", m)
        model.save_checkpoint(tmp_path / "b.npz", m)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        np.savez(tmp_path / "x.npz", __meta__=np.frombuffer(b'{"format": "other"}', np.uint8))
        with pytest.raises(ValueError):
            model.load_checkpoint(tmp_path / "x.npz")
