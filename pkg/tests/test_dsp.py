import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import mfcc_oracle

from coughscope import dsp
from coughscope.dsp import AudioBuffer, FrameSpec, Window

finite = st.floats(-1.0, 1.0, allow_nan=False)


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


# -- FFT -------------------------------------------------------------------------

@pytest.mark.parametrize("n", [8, 64, 1024])
def test_fft_magnitude_matches_naive_dft(n, rng):
    for _ in range(10):
        x = rng.standard_normal(n)
        ref = np.abs(naive_dft(x))[: n // 2 + 1]
        got = dsp.fft_magnitude(x)
        assert np.max(np.abs(got - ref) / np.maximum(ref, 1e-12)) < 1e-6


def test_fft_degenerate_frames():
    assert np.all(dsp.fft_magnitude(np.zeros(16)) == 0)
    impulse = np.zeros(8)
    impulse[0] = 1.0
    np.testing.assert_allclose(dsp.fft_magnitude(impulse), np.ones(5))


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="power of two"):
        dsp.fft(np.zeros(12))


@given(arrays(np.float64, st.sampled_from([2, 4, 32, 256]), elements=finite))
def test_parseval_full_spectrum(x):
    spec = dsp.fft(x)
    lhs = np.sum(np.abs(spec) ** 2)
    rhs = len(x) * np.sum(x ** 2)
    assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-9)


def test_parseval_hermitian_half(rng):
    # one-sided magnitudes: bins 1..N/2-1 count twice, DC and Nyquist once
    x = rng.standard_normal(64)
    mag = dsp.fft_magnitude(x)
    one_sided = mag[0] ** 2 + mag[-1] ** 2 + 2 * np.sum(mag[1:-1] ** 2)
    assert one_sided == pytest.approx(64 * np.sum(x ** 2), rel=1e-9)


def test_fft_matches_numpy_complex(rng):
    x = rng.standard_normal((5, 128)) + 1j * rng.standard_normal((5, 128))
    np.testing.assert_allclose(dsp.fft(x), np.fft.fft(x, axis=-1), atol=1e-10)


# -- resampling ----------------------------------------------------------------------

def test_resample_exact_two_to_one_length():
    buf = dsp.resample(AudioBuffer(np.zeros(2000), 32000), 16000)
    assert buf.sample_rate_hz == 16000 and len(buf) == 1000


@given(st.floats(-0.9, 0.9), st.sampled_from([8000, 22050, 44100, 48000]))
def test_resample_preserves_dc(c, rate):
    out = dsp.resample(AudioBuffer(np.full(rate // 10, c), rate), 16000)
    np.testing.assert_allclose(out.samples, c, atol=1e-9)


def test_resample_sine_48k_to_16k():
    t = np.arange(48000) / 48000
    out = dsp.resample(AudioBuffer(np.sin(2 * np.pi * 1000 * t), 48000), 16000)
    ref = np.sin(2 * np.pi * 1000 * np.arange(len(out)) / 16000)
    body = slice(200, len(out) - 200)  # skip the filter transient at both ends
    assert np.max(np.abs(out.samples[body] - ref[body])) < 1e-3


def test_resample_duration_within_one_sample():
    for src, n in [(44100, 44100), (8000, 12345), (48000, 777)]:
        out = dsp.resample(AudioBuffer(np.zeros(n), src), 16000)
        assert abs(out.duration_s - n / src) <= 1 / 16000


def test_resample_removes_content_above_new_nyquist():
    t = np.arange(48000) / 48000
    out = dsp.resample(AudioBuffer(np.sin(2 * np.pi * 12000 * t), 48000), 16000)
    assert np.max(np.abs(out.samples[200:-200])) < 1e-2


def test_resample_empty_and_nonfinite():
    assert len(dsp.resample(AudioBuffer(np.zeros(0), 44100), 16000)) == 0
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]), 16000)


# -- framing -------------------------------------------------------------------------

def test_detection_frame_geometry():
    spec = FrameSpec.detection_frames(16000)
    assert (spec.frame_len_samples, spec.hop_samples) == (5120, 2560)
    assert len(dsp.frame_signal(np.ones(5120), spec)) == 1
    assert list(dsp.frame_starts(10240, spec)) == [0, 2560, 5120]


def test_frame_signal_too_short():
    with pytest.raises(ValueError, match="input too short"):
        dsp.frame_signal(np.ones(100), FrameSpec.feature_frames())


@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2000))
def test_frame_starts_arithmetic(frame_len, hop, n):
    if hop > frame_len:
        hop, frame_len = frame_len, hop
    spec = FrameSpec(frame_len, hop, Window.RECTANGULAR)
    starts = dsp.frame_starts(n, spec)
    np.testing.assert_array_equal(starts, np.arange(len(starts)) * hop)
    if len(starts):
        assert starts[-1] + frame_len <= n < starts[-1] + frame_len + hop


def test_frame_signal_applies_window():
    spec = FrameSpec(16, 8, Window.HAMMING)
    frames = dsp.frame_signal(np.ones(32), spec)
    np.testing.assert_allclose(frames[0], np.hamming(16))


# -- silence removal ------------------------------------------------------------------

def test_silence_all_zero_and_uniform(rng):
    spec = FrameSpec(400, 200, Window.RECTANGULAR)
    assert dsp.remove_silence(AudioBuffer(np.zeros(4000), 16000), spec) == []
    square = np.tile([0.5, -0.5], 2000)
    assert dsp.remove_silence(AudioBuffer(square, 16000), spec) == [(0, 4000)]


def test_silence_loud_then_quiet(rng):
    x = np.concatenate([rng.standard_normal(16000), 0.01 * rng.standard_normal(16000)])
    spec = FrameSpec(800, 400, Window.RECTANGULAR)
    regions = dsp.remove_silence(AudioBuffer(x, 16000), spec, 0.5)
    assert len(regions) == 1
    start, end = regions[0]
    assert start == 0
    assert abs(end - 16000) <= spec.frame_len_samples


def test_silence_idempotent_on_voiced_output(rng):
    x = np.concatenate([0.01 * rng.standard_normal(32000), rng.standard_normal(8000),
                        0.01 * rng.standard_normal(32000)])
    spec = FrameSpec(800, 400, Window.RECTANGULAR)
    buf = AudioBuffer(x, 16000)
    voiced = dsp.extract_regions(buf, dsp.remove_silence(buf, spec))
    again = dsp.remove_silence(voiced, spec)
    assert again == [(0, len(voiced))]


# -- scalar features -------------------------------------------------------------------

def test_scalar_feature_examples():
    assert dsp.zero_crossing_rate(np.ones(10)) == 0.0
    assert dsp.zero_crossing_rate(np.tile([1.0, -1.0], 8)) == 1.0
    assert dsp.zero_crossing_rate(np.array([1.0, -1.0, 1.0, 1.0])) == pytest.approx(2 / 3)
    assert dsp.crest_factor(np.full(7, -0.3)) == pytest.approx(1.0)
    assert dsp.crest_factor(np.zeros(7)) == 0.0
    n = 1000
    assert dsp.crest_factor(np.sin(2 * np.pi * np.arange(n) / n)) == pytest.approx(np.sqrt(2), rel=1e-6)
    assert dsp.energy(np.zeros(5)) == 0.0
    assert dsp.energy(np.full(5, -0.25)) == pytest.approx(0.25)
    assert dsp.energy(np.array([3.0, 4.0])) == pytest.approx(np.sqrt(12.5))


@given(arrays(np.float64, st.integers(2, 200), elements=finite), st.floats(0.01, 100.0))
def test_scalar_features_negation_and_gain(x, g):
    assert dsp.zero_crossing_rate(-x) == dsp.zero_crossing_rate(x)
    assert dsp.energy(-x) == dsp.energy(x)
    assert dsp.crest_factor(-x) == dsp.crest_factor(x)
    assert dsp.energy(g * x) == pytest.approx(g * dsp.energy(x), rel=1e-9, abs=1e-300)
    assert dsp.crest_factor(g * x) == pytest.approx(dsp.crest_factor(x), rel=1e-9)
    assert 0.0 <= dsp.zero_crossing_rate(x) <= 1.0
    cf = dsp.crest_factor(x)
    assert cf == 0.0 or cf >= 1.0 - 1e-12


# -- MFCC -------------------------------------------------------------------------------

def test_mfcc_zero_frame_is_floor_dc():
    c = dsp.mfcc(np.zeros(1024))
    assert c[0] == pytest.approx(26 * np.log(1e-10) / np.sqrt(26))
    np.testing.assert_allclose(c[1:], 0.0, atol=1e-9)


@pytest.mark.parametrize("n", [700, 1024])
def test_mfcc_matches_loop_oracle(n, rng):
    for _ in range(5):
        x = rng.standard_normal(n) * rng.uniform(0.01, 1.0)
        padded = np.concatenate([x, np.zeros(1024 - n)])
        assert np.max(np.abs(dsp.mfcc(x) - mfcc_oracle(padded))) < 1e-8


def test_mfcc_deterministic(rng):
    x = rng.standard_normal(1024) * np.hamming(1024)
    assert np.array_equal(dsp.mfcc(x), dsp.mfcc(x.copy()))


def test_mfcc_short_frame_is_zero_padded(rng):
    x = rng.standard_normal(700)
    np.testing.assert_array_equal(dsp.mfcc(x), dsp.mfcc(np.concatenate([x, np.zeros(324)])))


def test_deltas_examples(rng):
    const = np.tile(rng.standard_normal(12), (6, 1))
    out = dsp.mfcc_deltas(const)
    assert out.shape == (6, 36)
    np.testing.assert_array_equal(out[:, 12:], 0.0)
    v = rng.standard_normal(12)
    ramp = np.arange(8)[:, None] * v[None, :]
    np.testing.assert_allclose(dsp.mfcc_deltas(ramp)[1:-1, 12:24], np.tile(v, (6, 1)))
    short = dsp.mfcc_deltas(rng.standard_normal((2, 12)))
    np.testing.assert_array_equal(short[:, 12:], 0.0)


def test_deltas_match_index_by_index_definition(rng):
    c = rng.standard_normal((10, 12))
    out = dsp.mfcc_deltas(c)

    def at(track, t):
        return track[min(max(t, 0), len(track) - 1)]

    d = np.array([(at(c, t + 1) - at(c, t - 1)) / 2 for t in range(10)])
    dd = np.array([(at(d, t + 1) - at(d, t - 1)) / 2 for t in range(10)])
    np.testing.assert_allclose(out, np.concatenate([c, d, dd], axis=1), atol=1e-14)


def test_feature_matrix_shape_and_frame_features(rng):
    buf = AudioBuffer(rng.uniform(-0.5, 0.5, 32000), 16000)
    m = dsp.feature_matrix(buf)
    assert m.shape == (61, 39)
    assert np.all(np.isfinite(m))
    feats = dsp.frame_features(buf)
    assert len(feats) == 61
    np.testing.assert_array_equal(feats[3].as_vector(), m[3])


# -- spectrogram -------------------------------------------------------------------------

def test_spectrogram_shape_and_silence():
    spec = dsp.spectrogram(AudioBuffer(np.zeros(32000), 16000))
    assert spec.data.shape == (513, 61)
    np.testing.assert_allclose(spec.data, np.log(1e-10))


def test_spectrogram_tone_at_bin_centre():
    k = 37
    t = np.arange(16000) / 16000
    spec = dsp.spectrogram(AudioBuffer(0.5 * np.sin(2 * np.pi * k * 16000 / 1024 * t), 16000))
    assert np.all(np.argmax(spec.data, axis=0) == k)


def test_spectrogram_too_short():
    with pytest.raises(ValueError):
        dsp.spectrogram(AudioBuffer(np.zeros(100), 16000))
