import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from melrefine import dsp

settings.register_profile(
    "suite",
    max_examples=40,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def filterbank():
    return dsp.build_mel_filterbank()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_tone_corpus(directory, duration_s=0.5, amplitude=0.35):
    """Four two-partial tones, the toy clean corpus used across tests."""
    directory.mkdir(parents=True, exist_ok=True)
    partials = [(330, 660), (440, 1320), (550, 1100), (700, 2100)]
    paths = []
    for i, (f0, f1) in enumerate(partials):
        t = np.arange(int(duration_s * dsp.SAMPLE_RATE)) / dsp.SAMPLE_RATE
        x = amplitude * np.sin(2 * np.pi * f0 * t) + 0.4 * amplitude * np.sin(2 * np.pi * f1 * t)
        path = directory / f"tone{i}.wav"
        dsp.save_wav(dsp.AudioBuffer(x, dsp.SAMPLE_RATE), path)
        paths.append(path)
    return paths
