"""Waveform I/O, STFT/mel analysis, and Griffin-Lim mel inversion.

All audio in this package is mono float64 nominally in [-1, 1] at a
canonical 24 kHz. Analysis uses a periodic Hann window with a 1024-point
FFT and a 256-sample hop (so the overlap-add identity holds exactly), and
a 128-band slaney-style mel filterbank spanning 0..12000 Hz. Log-mel
values are clamped from below at ``log(LOG_FLOOR)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 24000
N_FFT = 1024
HOP = 256
N_MELS = 128
F_MIN = 0.0
F_MAX = 12000.0
LOG_FLOOR = 1e-5
GRIFFIN_LIM_ITERATIONS = 32
GRIFFIN_LIM_MOMENTUM = 0.99
RESAMPLE_KAISER_BETA = 8.0

# 16-bit PCM quantization step; round-trip error is bounded by 1/_PCM_SCALE.
_PCM_SCALE = 32768.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"audio must be mono (1-D), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", _readonly(samples))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Centered STFT frames: (n_frames, n_fft // 2 + 1) complex values."""

    values: np.ndarray
    sample_rate: int
    n_fft: int = N_FFT
    hop: int = HOP

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"expected (n_frames, n_bins) values, got shape {values.shape}")
        if values.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(
                f"bin count {values.shape[1]} inconsistent with n_fft={self.n_fft}"
            )
        object.__setattr__(self, "values", _readonly(values))

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters as a nonnegative (n_mels, n_fft // 2 + 1) matrix."""

    weights: np.ndarray
    sample_rate: int
    n_fft: int
    f_min: float
    f_max: float
    mel_scale: str = "slaney"

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError("filterbank weights must be a 2-D matrix")
        if np.any(weights < 0):
            raise ValueError("filterbank weights must be nonnegative")
        object.__setattr__(self, "weights", _readonly(weights))

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-compressed mel spectrogram, (n_frames, n_mels)."""

    values: np.ndarray
    frame_rate: float = SAMPLE_RATE / HOP

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected (n_frames, n_mels) values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("mel values must be finite")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def sine_tone(
    freq_hz: float,
    duration_s: float,
    sample_rate: int = SAMPLE_RATE,
    amplitude: float = 0.5,
    phase: float = 0.0,
) -> AudioBuffer:
    """Pure sine, mostly useful for tests and toy corpora."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), sample_rate)


def load_wav(path) -> AudioBuffer:
    """Read a PCM WAV file (16-bit int or 32-bit float) as a mono buffer.

    Multichannel input is averaged to mono and amplitudes are normalized
    to [-1, 1].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    rate, data = wavfile.read(path)
    if data.size == 0:
        raise ValueError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / _PCM_SCALE
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(
            f"unsupported WAV encoding {data.dtype} in {path}; "
            "expected 16-bit PCM or 32-bit float"
        )
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioBuffer(np.clip(x, -1.0, 1.0), int(rate))


def save_wav(buf: AudioBuffer, path) -> None:
    """Write 16-bit PCM, clamping samples to [-1, 1] before quantization."""
    x = np.clip(buf.samples, -1.0, 1.0)
    q = np.clip(np.round(x * _PCM_SCALE), -_PCM_SCALE, _PCM_SCALE - 1).astype(np.int16)
    wavfile.write(Path(path), buf.sample_rate, q)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited polyphase resampling (windowed sinc, Kaiser beta=8).

    Output length is round(len * target / source); resampling to the
    buffer's own rate returns the buffer unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return buf
    ratio = Fraction(int(target_rate), int(buf.sample_rate))
    y = resample_poly(
        buf.samples, ratio.numerator, ratio.denominator,
        window=("kaiser", RESAMPLE_KAISER_BETA),
    )
    n_out = int(round(len(buf) * target_rate / buf.sample_rate))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioBuffer(y[:n_out], int(target_rate))


def _hann(n_fft: int) -> np.ndarray:
    # Periodic Hann; with hop = n_fft / 4 the squared-window overlap sum is
    # a constant 1.5, so the analysis/synthesis round trip is exact.
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)


def stft(buf: AudioBuffer, n_fft: int = N_FFT, hop: int = HOP) -> ComplexSpectrogram:
    """Centered STFT with reflection padding.

    Frame count is len(buf) // hop + 1, so it is deterministic from the
    input length alone.
    """
    if len(buf) == 0:
        raise ValueError("cannot compute the STFT of an empty buffer")
    pad = n_fft // 2
    x = np.pad(buf.samples, pad, mode="reflect")
    n_frames = len(buf) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[starts]
    values = np.fft.rfft(frames * _hann(n_fft), axis=1)
    return ComplexSpectrogram(values=values, sample_rate=buf.sample_rate, n_fft=n_fft, hop=hop)


def istft(spec: ComplexSpectrogram, length: int) -> AudioBuffer:
    """Inverse STFT via normalized overlap-add, trimmed to `length` samples."""
    n_fft, hop = spec.n_fft, spec.hop
    if n_fft != 4 * hop:
        raise ValueError(f"unsupported geometry n_fft={n_fft}, hop={hop}; need hop = n_fft / 4")
    window = _hann(n_fft)
    frames = np.fft.irfft(spec.values, n=n_fft, axis=1) * window
    total = (spec.n_frames - 1) * hop + n_fft
    pad = n_fft // 2
    if length < 0 or length > total - pad:
        raise ValueError(f"length {length} outside the coverage of {spec.n_frames} frames")
    y = np.zeros(total)
    wsq = np.zeros(total)
    for m in range(spec.n_frames):
        sl = slice(m * hop, m * hop + n_fft)
        y[sl] += frames[m]
        wsq[sl] += window**2
    y /= np.maximum(wsq, 1e-12)
    return AudioBuffer(y[pad : pad + length], spec.sample_rate)


def _hz_to_mel(freq):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = freq / f_sp
    above = freq >= min_log_hz
    mel = np.where(above, min_log_hz / f_sp + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    freq = mel * f_sp
    above = mel >= min_log_mel
    return np.where(above, min_log_hz * np.exp(logstep * (mel - min_log_mel)), freq)


def build_mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> MelFilterbank:
    """Triangular slaney-style mel filterbank with area normalization."""
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValueError(
            f"invalid frequency range [{f_min}, {f_max}] for sample rate {sample_rate}"
        )
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_points = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)

    fdiff = np.diff(hz_points)
    ramps = hz_points[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # Area normalization keeps per-band response comparable across bandwidths.
    weights *= (2.0 / (hz_points[2:] - hz_points[:-2]))[:, None]

    if np.any(weights.sum(axis=1) == 0):
        raise ValueError(
            f"n_mels={n_mels} too large for FFT resolution (some filters cover no bin)"
        )
    return MelFilterbank(
        weights=weights, sample_rate=sample_rate, n_fft=n_fft, f_min=f_min, f_max=f_max
    )


def audio_to_logmel(
    buf: AudioBuffer,
    fb: MelFilterbank,
    n_fft: int = N_FFT,
    hop: int = HOP,
    log_floor: float = LOG_FLOOR,
) -> MelSpectrogram:
    """Log mel spectrogram: log(max(fb . |STFT|, log_floor))."""
    if buf.sample_rate != fb.sample_rate:
        raise ValueError(
            f"sample rate mismatch: audio at {buf.sample_rate} Hz, "
            f"filterbank built for {fb.sample_rate} Hz"
        )
    mag = np.abs(stft(buf, n_fft=n_fft, hop=hop).values)
    mel = mag @ fb.weights.T
    values = np.log(np.maximum(mel, log_floor))
    return MelSpectrogram(values=values, frame_rate=buf.sample_rate / hop)


def logmel_to_audio(
    mel: MelSpectrogram,
    fb: MelFilterbank,
    iterations: int = GRIFFIN_LIM_ITERATIONS,
    momentum: float = GRIFFIN_LIM_MOMENTUM,
    n_fft: int = N_FFT,
    hop: int = HOP,
) -> AudioBuffer:
    """Invert a log-mel spectrogram to audio (the vocoder substitute).

    Linear magnitudes are estimated with the nonnegative-clamped
    pseudo-inverse of the filterbank, then phase is recovered with
    accelerated Griffin-Lim from a zero-phase start. Deterministic: two
    calls on the same input produce identical output.
    """
    if not np.all(np.isfinite(mel.values)):
        raise ValueError("mel values must be finite")
    mag = np.clip(np.exp(mel.values) @ np.linalg.pinv(fb.weights).T, 0.0, None)
    length = max((mel.n_frames - 1) * hop, 1)
    sr = fb.sample_rate

    angles = np.ones_like(mag, dtype=np.complex128)
    prev = np.zeros_like(angles)
    alpha = momentum / (1.0 + momentum)
    for _ in range(iterations):
        audio = istft(ComplexSpectrogram(mag * angles, sr, n_fft, hop), length)
        rebuilt = stft(audio, n_fft=n_fft, hop=hop).values
        update = rebuilt - alpha * prev
        prev = rebuilt
        angles = update / np.maximum(np.abs(update), 1e-16)
    return istft(ComplexSpectrogram(mag * angles, sr, n_fft, hop), length)
