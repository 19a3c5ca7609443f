"""Tests for waveform I/O, STFT/mel analysis, and Griffin-Lim inversion."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.io import wavfile

from melrefine import dsp
from melrefine.dsp import AudioBuffer, ComplexSpectrogram, MelSpectrogram

SR = dsp.SAMPLE_RATE
QUANT = 2.0**-15


def snr_db(reference, estimate):
    noise = reference - estimate
    return 10 * np.log10(np.sum(reference**2) / np.sum(noise**2))


class TestAudioBuffer:
    def test_rejects_non_mono(self):
        with pytest.raises(ValueError, match="mono"):
            AudioBuffer(np.zeros((2, 10)), SR)

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            AudioBuffer(np.array([0.0, np.nan]), SR)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError, match="sample rate"):
            AudioBuffer(np.zeros(10), 0)

    def test_samples_are_immutable(self):
        buf = AudioBuffer(np.zeros(10), SR)
        with pytest.raises(ValueError):
            buf.samples[0] = 1.0


class TestWavRoundTrip:
    def test_silence(self, tmp_path):
        path = tmp_path / "silence.wav"
        dsp.save_wav(AudioBuffer(np.zeros(SR), SR), path)
        buf = dsp.load_wav(path)
        assert len(buf) == SR
        assert np.all(buf.samples == 0.0)

    def test_stereo_cancellation(self, tmp_path):
        path = tmp_path / "stereo.wav"
        left = (np.random.default_rng(0).uniform(-0.9, 0.9, 1000) * 32768).astype(np.int16)
        wavfile.write(path, SR, np.stack([left, -left], axis=1))
        buf = dsp.load_wav(path)
        assert np.max(np.abs(buf.samples)) <= QUANT  # -x averages against x up to int16 asymmetry

    def test_header_contract(self, tmp_path):
        path = tmp_path / "hdr.wav"
        dsp.save_wav(AudioBuffer(np.linspace(-0.1, 0.1, 100), SR), path)
        rate, data = wavfile.read(path)
        assert rate == SR
        assert data.shape == (100,)
        assert data.dtype == np.int16

    def test_clamps_out_of_range(self, tmp_path):
        path = tmp_path / "clip.wav"
        dsp.save_wav(AudioBuffer(np.array([1.5, -2.0, 0.0]), SR), path)
        buf = dsp.load_wav(path)
        assert buf.samples[0] == pytest.approx(1.0, abs=QUANT)
        assert buf.samples[1] == pytest.approx(-1.0, abs=QUANT)

    def test_quantization_bound(self, tmp_path, rng):
        x = rng.uniform(-1.0, 1.0, 4096)
        path = tmp_path / "rt.wav"
        dsp.save_wav(AudioBuffer(x, SR), path)
        back = dsp.load_wav(path)
        assert len(back) == len(x)
        assert np.max(np.abs(back.samples - x)) <= QUANT

    def test_float32_input(self, tmp_path, rng):
        path = tmp_path / "f32.wav"
        x = rng.uniform(-0.5, 0.5, 256).astype(np.float32)
        wavfile.write(path, SR, x)
        buf = dsp.load_wav(path)
        np.testing.assert_allclose(buf.samples, x, atol=1e-7)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            dsp.load_wav(tmp_path / "nope.wav")

    def test_unsupported_encoding(self, tmp_path):
        path = tmp_path / "u8.wav"
        wavfile.write(path, SR, np.zeros(100, dtype=np.uint8))
        with pytest.raises(ValueError, match="unsupported"):
            dsp.load_wav(path)

    def test_zero_length(self, tmp_path):
        path = tmp_path / "empty.wav"
        wavfile.write(path, SR, np.zeros(0, dtype=np.int16))
        with pytest.raises(ValueError, match="zero-length"):
            dsp.load_wav(path)

    def test_unwritable_path(self):
        with pytest.raises(OSError):
            dsp.save_wav(AudioBuffer(np.zeros(10), SR), "/nonexistent-dir/x.wav")


class TestResample:
    def test_identity(self):
        buf = dsp.sine_tone(440, 0.25)
        assert dsp.resample(buf, SR) is buf

    def test_length_arithmetic(self):
        buf = AudioBuffer(np.random.default_rng(0).uniform(-0.5, 0.5, 48000), 48000)
        out = dsp.resample(buf, 24000)
        assert out.sample_rate == 24000
        assert len(out) == 24000

    def test_sine_peak_preserved(self):
        buf = dsp.sine_tone(440, 1.0, sample_rate=48000)
        out = dsp.resample(buf, 24000)
        spectrum = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(len(out.samples), 1 / 24000)
        peak = freqs[spectrum.argmax()]
        assert abs(peak - 440.0) <= freqs[1]

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError, match="positive"):
            dsp.resample(dsp.sine_tone(440, 0.1), 0)


class TestStft:
    def test_zero_input(self):
        spec = dsp.stft(AudioBuffer(np.zeros(4096), SR))
        assert np.all(spec.values == 0)

    def test_frame_count(self):
        spec = dsp.stft(AudioBuffer(np.zeros(24000), SR))
        assert spec.n_frames == 24000 // dsp.HOP + 1

    def test_sine_bin(self):
        # 1125 Hz / (24000/1024) = bin 48 exactly.
        spec = dsp.stft(dsp.sine_tone(1125.0, 1.0))
        interior = np.abs(spec.values[3:-3])
        assert np.all(interior.argmax(axis=1) == 48)

    def test_linearity(self, rng):
        x = rng.uniform(-0.5, 0.5, 6000)
        y = rng.uniform(-0.5, 0.5, 6000)
        a, b = 0.7, -1.3
        lhs = dsp.stft(AudioBuffer(a * x + b * y, SR)).values
        rhs = a * dsp.stft(AudioBuffer(x, SR)).values + b * dsp.stft(AudioBuffer(y, SR)).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(lhs))

    def test_amplitude_scaling(self, rng):
        x = rng.uniform(-0.4, 0.4, 3000)
        one = dsp.stft(AudioBuffer(x, SR)).values
        two = dsp.stft(AudioBuffer(2 * x, SR)).values
        np.testing.assert_allclose(two, 2 * one, rtol=1e-12, atol=1e-12)

    def test_empty_buffer(self):
        with pytest.raises(ValueError, match="empty"):
            dsp.stft(AudioBuffer(np.zeros(0), SR))


class TestIstft:
    def test_round_trip_snr(self, rng):
        x = rng.uniform(-0.8, 0.8, 4096)
        back = dsp.istft(dsp.stft(AudioBuffer(x, SR)), len(x))
        assert snr_db(x, back.samples) > 50.0

    def test_zero_spectrogram(self):
        spec = ComplexSpectrogram(np.zeros((10, 513), dtype=complex), SR)
        out = dsp.istft(spec, 2048)
        assert np.all(out.samples == 0)

    def test_sine_round_trip(self):
        buf = dsp.sine_tone(1125.0, 1.0)
        back = dsp.istft(dsp.stft(buf), len(buf))
        edge = dsp.N_FFT
        err = np.abs(back.samples[edge:-edge] - buf.samples[edge:-edge])
        assert err.max() < 1e-3

    def test_geometry_mismatch(self):
        spec = ComplexSpectrogram(np.zeros((4, 257), dtype=complex), SR, n_fft=512, hop=200)
        with pytest.raises(ValueError, match="geometry"):
            dsp.istft(spec, 100)


class TestMelFilterbank:
    def test_shape(self, filterbank):
        assert filterbank.weights.shape == (128, 513)

    def test_nonnegative_rows_cover(self, filterbank):
        assert np.all(filterbank.weights >= 0)
        assert np.all(filterbank.weights.sum(axis=1) > 0)

    def test_centers_strictly_increasing(self, filterbank):
        centers = filterbank.weights.argmax(axis=1)
        assert np.all(np.diff(centers) > 0)

    def test_inband_coverage(self, filterbank):
        freqs = np.arange(513) * SR / dsp.N_FFT
        inband = (freqs > filterbank.f_min) & (freqs < filterbank.f_max)
        assert np.all(filterbank.weights.sum(axis=0)[inband] > 0)

    def test_invalid_range(self):
        with pytest.raises(ValueError, match="frequency range"):
            dsp.build_mel_filterbank(f_min=8000, f_max=4000)
        with pytest.raises(ValueError, match="frequency range"):
            dsp.build_mel_filterbank(f_max=20000)

    def test_too_many_mels(self):
        with pytest.raises(ValueError, match="too large"):
            dsp.build_mel_filterbank(n_mels=400)


class TestLogMel:
    def test_silence_hits_floor(self, filterbank):
        mel = dsp.audio_to_logmel(AudioBuffer(np.zeros(SR), SR), filterbank)
        np.testing.assert_allclose(mel.values, np.log(1e-5))

    def test_scaling_adds_log10(self, filterbank):
        buf = dsp.sine_tone(440.0, 0.5, amplitude=0.05)
        loud = AudioBuffer(buf.samples * 10.0, SR)
        quiet_mel = dsp.audio_to_logmel(buf, filterbank).values
        loud_mel = dsp.audio_to_logmel(loud, filterbank).values
        above = quiet_mel > np.log(1e-5)
        assert above.any()
        np.testing.assert_allclose(
            loud_mel[above] - quiet_mel[above], np.log(10.0), atol=1e-9
        )

    def test_frame_count_one_second(self, filterbank):
        mel = dsp.audio_to_logmel(dsp.sine_tone(440.0, 1.0), filterbank)
        assert mel.values.shape == (94, 128)

    def test_rate_mismatch(self, filterbank):
        with pytest.raises(ValueError, match="mismatch"):
            dsp.audio_to_logmel(dsp.sine_tone(440.0, 0.1, sample_rate=16000), filterbank)

    def test_monotone_response(self, filterbank, rng):
        x = rng.uniform(-0.3, 0.3, 8000)
        low = dsp.audio_to_logmel(AudioBuffer(x, SR), filterbank).values
        high = dsp.audio_to_logmel(AudioBuffer(3.0 * x, SR), filterbank).values
        assert np.all(high >= low - 1e-12)

    @given(st.integers(1000, 20000))
    def test_log_floor_invariant(self, n):
        fb = dsp.build_mel_filterbank()
        x = np.random.default_rng(n).uniform(-1, 1, n)
        mel = dsp.audio_to_logmel(AudioBuffer(x, SR), fb)
        assert mel.values.min() >= np.log(1e-5) - 1e-9


class TestGriffinLim:
    def test_floor_mel_is_near_silence(self, filterbank):
        mel = MelSpectrogram(np.full((40, 128), np.log(1e-5)))
        out = dsp.logmel_to_audio(mel, filterbank)
        assert np.sqrt(np.mean(out.samples**2)) < 1e-3

    def test_sine_frequency_recovered(self, filterbank):
        mel = dsp.audio_to_logmel(dsp.sine_tone(1125.0, 1.0), filterbank)
        out = dsp.logmel_to_audio(mel, filterbank)
        spectrum = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(len(out.samples), 1 / SR)
        bin_width = SR / dsp.N_FFT
        assert abs(freqs[spectrum.argmax()] - 1125.0) <= bin_width

    def test_deterministic(self, filterbank):
        mel = dsp.audio_to_logmel(dsp.sine_tone(700.0, 0.3), filterbank)
        a = dsp.logmel_to_audio(mel, filterbank)
        b = dsp.logmel_to_audio(mel, filterbank)
        assert np.array_equal(a.samples, b.samples)

    def test_rejects_non_finite(self, filterbank):
        values = np.zeros((10, 128))
        values[3, 5] = np.inf
        mel = MelSpectrogram.__new__(MelSpectrogram)
        object.__setattr__(mel, "values", values)
        object.__setattr__(mel, "frame_rate", 93.75)
        with pytest.raises(ValueError, match="finite"):
            dsp.logmel_to_audio(mel, filterbank)
