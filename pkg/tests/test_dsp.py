import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsecl import dsp
from tsecl.dsp import Spectrogram, StftConfig, istft, istft_adjoint, real_inner, stft

PAPER = StftConfig.from_ms(32, 8, 512)
TINY = StftConfig(8, 4, 8)


def dense_istft_matrix(cfg: StftConfig, n_frames: int, length: int) -> np.ndarray:
    """Explicit synthesis matrix built from the inverse-DFT sum, column per
    (frame, bin, real|imag) coordinate."""
    n, w, hop, pad = cfg.fft_len, cfg.window, cfg.hop, cfg.pad
    total = (n_frames - 1) * hop + cfg.window_len
    wsum = np.zeros(total)
    for t in range(n_frames):
        wsum[t * hop:t * hop + cfg.window_len] += w ** 2
    cols = []
    k = np.arange(cfg.window_len)
    for t in range(n_frames):
        for f in range(cfg.n_bins):
            edge = f == 0 or (n % 2 == 0 and f == n // 2)
            c = 1.0 if edge else 2.0
            for part in ("re", "im"):
                frame = np.zeros(total)
                if part == "re":
                    basis = c * np.cos(2 * np.pi * f * k / n) / n
                else:
                    basis = np.zeros_like(k, float) if edge else -c * np.sin(2 * np.pi * f * k / n) / n
                frame[t * hop:t * hop + cfg.window_len] = w * basis
                with np.errstate(divide="ignore", invalid="ignore"):
                    col = np.where(wsum > 1e-10, frame / wsum, 0.0)
                cols.append(col[pad:pad + length])
    return np.array(cols).T


def _pack(spec: np.ndarray) -> np.ndarray:
    return np.stack([spec.real, spec.imag], axis=-1).reshape(-1)


class TestConfig:
    def test_paper_sizes(self):
        assert (PAPER.window_len, PAPER.hop, PAPER.fft_len) == (512, 128, 512)
        assert PAPER.n_bins == 257

    @pytest.mark.parametrize("args", [(512, 0, 512), (512, 128, 256), (512, 100, 512), (600, 256, 512)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            StftConfig(*args)


class TestStft:
    def test_bins_at_16k(self):
        w = np.random.default_rng(0).standard_normal(16000)
        assert stft(w, PAPER).frames.shape[1] == 257

    def test_zero_in_zero_out(self):
        assert np.all(stft(np.zeros(1000), PAPER).frames == 0)

    @pytest.mark.parametrize("k", [5, 40, 100])
    def test_bin_centred_sinusoid_peaks_at_bin(self, k):
        n = np.arange(16000)
        w = np.sin(2 * np.pi * k * n / PAPER.fft_len)
        mags = np.abs(stft(w, PAPER).frames)
        # interior frames only; edge frames see the reflect padding
        assert np.all(np.argmax(mags[4:-4], axis=1) == k)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            stft(np.array([]), PAPER)

    def test_nonfinite_raises(self):
        with pytest.raises(ValueError):
            stft(np.array([0.0, np.nan, 1.0]), TINY)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 3000))
        lhs = stft(2.5 * x - 0.75 * y, PAPER).frames
        rhs = 2.5 * stft(x, PAPER).frames - 0.75 * stft(y, PAPER).frames
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * np.max(np.abs(rhs))

    def test_frame_parseval_against_dense_dft(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(40)
        spec = stft(w, TINY).frames
        padded = np.pad(np.pad(w, TINY.pad, mode="reflect"), (0, TINY.padded_length(40) - 48))
        n = TINY.fft_len
        dft = np.exp(-2j * np.pi * np.outer(np.arange(TINY.n_bins), np.arange(n)) / n)
        for t in range(spec.shape[0]):
            seg = padded[t * TINY.hop:t * TINY.hop + TINY.window_len] * TINY.window
            np.testing.assert_allclose(spec[t], dft @ seg, atol=1e-12)
            energy = (abs(spec[t, 0]) ** 2 + abs(spec[t, -1]) ** 2
                      + 2 * np.sum(np.abs(spec[t, 1:-1]) ** 2)) / n
            assert energy == pytest.approx(np.sum(seg ** 2), rel=1e-12)


class TestIstft:
    def test_round_trip(self):
        w = np.random.default_rng(3).uniform(-1, 1, 16000)
        assert np.max(np.abs(istft(stft(w, PAPER)) - w)) < 1e-6

    def test_round_trip_relative_l2(self):
        w = np.random.default_rng(4).standard_normal(16000)
        err = np.linalg.norm(istft(stft(w, PAPER)) - w) / np.linalg.norm(w)
        assert err < 1e-10

    def test_zero_spectrogram(self):
        spec = Spectrogram(np.zeros((10, 257), complex), PAPER, 1000)
        assert np.all(istft(spec) == 0)

    def test_no_frames_raises(self):
        with pytest.raises(ValueError):
            istft(Spectrogram(np.zeros((0, 257), complex), PAPER))

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(5, 400), hop_div=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2 ** 16))
    def test_round_trip_property(self, n, hop_div, seed):
        cfg = StftConfig(16, 16 // hop_div, 32) if hop_div > 1 else StftConfig(16, 8, 16)
        w = np.random.default_rng(seed).uniform(-1, 1, n)
        assert np.max(np.abs(istft(stft(w, cfg)) - w)) < 1e-6 * max(np.max(np.abs(w)), 1e-12)


class TestAdjoint:
    @pytest.mark.parametrize("seed", range(5))
    def test_identity(self, seed):
        rng = np.random.default_rng(seed)
        n = 4000
        t = PAPER.n_frames(n)
        s = rng.standard_normal((t, 257)) + 1j * rng.standard_normal((t, 257))
        g = rng.standard_normal(n)
        lhs = float(np.dot(istft(Spectrogram(s, PAPER, n)), g))
        rhs = real_inner(s, istft_adjoint(g, PAPER, t).frames)
        assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_zero_gradient(self):
        assert np.all(istft_adjoint(np.zeros(500), PAPER).frames == 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            istft_adjoint(np.zeros(500), PAPER, n_frames=2)

    def test_dense_matrix_oracle(self):
        length = 24
        t = TINY.n_frames(length)
        a = dense_istft_matrix(TINY, t, length)
        # istft applied to every basis spectrogram reproduces the dense columns
        cols = []
        for j in range(a.shape[1]):
            basis = np.zeros(2 * t * TINY.n_bins)
            basis[j] = 1.0
            spec = basis.reshape(t, TINY.n_bins, 2)
            cols.append(istft(Spectrogram(spec[..., 0] + 1j * spec[..., 1], TINY, length)))
        np.testing.assert_allclose(np.array(cols).T, a, atol=1e-13)
        # impulses through the adjoint recover the rows of A, i.e. columns of A^T
        for i in range(length):
            g = np.zeros(length)
            g[i] = 1.0
            np.testing.assert_allclose(_pack(istft_adjoint(g, TINY, t).frames), a[i], atol=1e-13)


class TestBatched:
    def test_analyze_matches_stft_per_row(self):
        w = np.random.default_rng(5).standard_normal((3, 900))
        batched = dsp.analyze(w, PAPER)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], stft(w[i], PAPER).frames)

    def test_synthesize_inverts_analyze(self):
        w = np.random.default_rng(6).standard_normal((2, 1200))
        out = dsp.synthesize(dsp.analyze(w, PAPER), PAPER, 1200)
        assert np.max(np.abs(out - w)) < 1e-10


class TestIO:
    def test_float_wav_round_trip(self, tmp_path):
        w = np.random.default_rng(7).uniform(-0.9, 0.9, 800)
        dsp.write_wav(tmp_path / "a.wav", w)
        back, sr = dsp.read_wav(tmp_path / "a.wav")
        assert sr == 16000
        np.testing.assert_allclose(back, w, atol=1e-7)

    def test_pcm16_wav_round_trip(self, tmp_path):
        w = np.random.default_rng(8).uniform(-0.9, 0.9, 800)
        dsp.write_wav(tmp_path / "a.wav", w, 8000, pcm16=True)
        back, sr = dsp.read_wav(tmp_path / "a.wav")
        assert sr == 8000
        np.testing.assert_allclose(back, w, atol=1.0 / 32767)

    def test_raw_float32_with_sidecar(self, tmp_path):
        w = np.random.default_rng(9).standard_normal(300)
        dsp.write_raw(tmp_path / "a.f32", w, 22050)
        back, sr = dsp.read_raw(tmp_path / "a.f32")
        assert sr == 22050
        np.testing.assert_array_equal(back, w.astype(np.float32).astype(np.float64))
        assert (tmp_path / "a.f32.json").exists()
