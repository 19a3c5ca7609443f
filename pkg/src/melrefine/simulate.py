"""Degradation simulator: paired (clean, distorted) utterances.

Distortion is reverb (synthetic exponentially decaying room responses)
followed by additive noise (seeded white or pink) at a calibrated SNR,
plus an optional spectral smear applied in the mel domain when pairs are
loaded. Everything is reproducible from seeds; a manifest of plain-text
key=value records ties each distorted file to its clean source and
settings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import fftconvolve

from . import dsp
from .dsp import AudioBuffer, MelFilterbank, MelSpectrogram

_MANIFEST_FIELDS = ("id", "clean_path", "distorted_path", "snr_db", "rt60_s", "smear_frames", "seed")


@dataclass(frozen=True)
class DegradationSpec:
    """How one clean clip gets corrupted."""

    snr_db: float
    rt60_s: float = 0.0
    smear_frames: int = 0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if self.rt60_s < 0:
            raise ValueError(f"rt60_s must be >= 0, got {self.rt60_s}")
        if self.smear_frames < 0:
            raise ValueError(f"smear_frames must be >= 0, got {self.smear_frames}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class PairRecord:
    id: str
    clean_path: str
    distorted_path: str
    spec: DegradationSpec


@dataclass(frozen=True)
class PairManifest:
    records: tuple[PairRecord, ...]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """White noise shaped to -3 dB/octave (power ~ 1/f)."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    spec[0] = 0.0
    spec[1:] /= np.sqrt(freqs[1:] / freqs[1])
    return np.fft.irfft(spec, n=n)


def add_noise_at_snr(
    clean: AudioBuffer, noise: AudioBuffer, snr_db: float, rng: np.random.Generator
) -> AudioBuffer:
    """Mix noise into clean at an exact energy-ratio SNR.

    The noise is tiled/cropped to the clean length (crop offset drawn from
    `rng`), then scaled so 10*log10(E_clean / E_noise) equals `snr_db`.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample rate mismatch: clean {clean.sample_rate}, noise {noise.sample_rate}"
        )
    e_clean = float(np.sum(clean.samples**2))
    if e_clean == 0:
        raise ValueError("clean signal has zero energy")
    if np.sum(noise.samples**2) == 0:
        raise ValueError("noise signal has zero energy")

    seg = noise.samples
    if len(seg) < len(clean):
        seg = np.tile(seg, -(-len(clean) // len(seg)))
    offset = int(rng.integers(0, len(seg) - len(clean) + 1))
    seg = seg[offset : offset + len(clean)]
    e_seg = float(np.sum(seg**2))
    if e_seg == 0:
        raise ValueError("selected noise segment has zero energy")
    gain = np.sqrt(e_clean / (e_seg * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(clean.samples + gain * seg, clean.sample_rate)


def synth_rir(rt60_s: float, sample_rate: int, rng: np.random.Generator) -> AudioBuffer:
    """Synthetic room impulse response: unit delta plus exponentially decaying noise.

    The tail's amplitude envelope reaches -60 dB (energy) at rt60_s;
    rt60_s = 0 gives a pure delta (the convolution identity).
    """
    if rt60_s < 0:
        raise ValueError(f"rt60_s must be >= 0, got {rt60_s}")
    if rt60_s == 0:
        return AudioBuffer(np.array([1.0]), sample_rate)
    n = max(2, int(round(1.25 * rt60_s * sample_rate)))
    h = np.zeros(n)
    h[0] = 1.0
    t = np.arange(1, n) / sample_rate
    h[1:] = rng.standard_normal(n - 1) * 10.0 ** (-3.0 * t / rt60_s)
    return AudioBuffer(h, sample_rate)


def apply_reverb(clean: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Convolve with an impulse response, truncate to the clean length, match its peak."""
    if clean.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample rate mismatch: clean {clean.sample_rate}, rir {rir.sample_rate}"
        )
    wet = fftconvolve(clean.samples, rir.samples, mode="full")[: len(clean)]
    peak_clean = float(np.max(np.abs(clean.samples), initial=0.0))
    peak_wet = float(np.max(np.abs(wet), initial=0.0))
    if peak_wet > 0:
        wet = wet * (peak_clean / peak_wet)
    return AudioBuffer(wet, clean.sample_rate)


def spectral_smear(mel: MelSpectrogram, smear_frames: int) -> MelSpectrogram:
    """Moving average over time with window 2*smear_frames + 1 (mirror-padded)."""
    if smear_frames < 0:
        raise ValueError(f"smear_frames must be >= 0, got {smear_frames}")
    if smear_frames == 0:
        return mel
    values = uniform_filter1d(mel.values, size=2 * smear_frames + 1, axis=0, mode="mirror")
    return MelSpectrogram(values=values, frame_rate=mel.frame_rate)


def _record_rng(dataset_seed: int, spec: DegradationSpec, spec_index: int, file_index: int):
    seq = np.random.SeedSequence([dataset_seed, spec.seed, spec_index, file_index])
    return np.random.default_rng(seq)


def build_dataset(
    clean_dir,
    out_dir,
    specs: list[DegradationSpec],
    seed: int = 0,
    sample_rate: int = dsp.SAMPLE_RATE,
) -> PairManifest:
    """Degrade every clean WAV under every spec, writing files and a manifest.

    Clean inputs are resampled to `sample_rate`, quantized to 16-bit, and
    re-written under out_dir/clean so the stored reference matches the
    distorted file sample for sample. Fully reproducible: the same seed
    yields byte-identical outputs.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    wavs = sorted(clean_dir.glob("*.wav"))
    if not wavs:
        raise ValueError(f"no WAV files in {clean_dir}")
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "distorted").mkdir(parents=True, exist_ok=True)

    records = []
    for spec_index, spec in enumerate(specs):
        for file_index, wav in enumerate(wavs):
            rng = _record_rng(seed, spec, spec_index, file_index)
            record_id = f"{wav.stem}__{spec_index:02d}"

            clean = dsp.resample(dsp.load_wav(wav), sample_rate)
            clean_path = out_dir / "clean" / f"{record_id}.wav"
            dsp.save_wav(clean, clean_path)
            clean = dsp.load_wav(clean_path)

            x = clean
            if spec.rt60_s > 0:
                x = apply_reverb(x, synth_rir(spec.rt60_s, sample_rate, rng))
            kind = rng.choice(["white", "pink"])
            noise = white_noise(len(x), rng) if kind == "white" else pink_noise(len(x), rng)
            x = add_noise_at_snr(x, AudioBuffer(noise, sample_rate), spec.snr_db, rng)

            distorted_path = out_dir / "distorted" / f"{record_id}.wav"
            dsp.save_wav(x, distorted_path)
            records.append(
                PairRecord(
                    id=record_id,
                    clean_path=str(clean_path),
                    distorted_path=str(distorted_path),
                    spec=spec,
                )
            )

    manifest = PairManifest(records=tuple(records))
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def write_manifest(manifest: PairManifest, path) -> None:
    """One record per line as tab-separated key=value fields."""
    lines = []
    for r in manifest:
        fields = {
            "id": r.id,
            "clean_path": r.clean_path,
            "distorted_path": r.distorted_path,
            "snr_db": repr(r.spec.snr_db),
            "rt60_s": repr(r.spec.rt60_s),
            "smear_frames": str(r.spec.smear_frames),
            "seed": str(r.spec.seed),
        }
        lines.append("\t".join(f"{k}={fields[k]}" for k in _MANIFEST_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> PairManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = {}
        for token in line.split("\t"):
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: malformed field {token!r}")
            fields[key] = value
        missing = set(_MANIFEST_FIELDS) - set(fields)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        records.append(
            PairRecord(
                id=fields["id"],
                clean_path=fields["clean_path"],
                distorted_path=fields["distorted_path"],
                spec=DegradationSpec(
                    snr_db=float(fields["snr_db"]),
                    rt60_s=float(fields["rt60_s"]),
                    smear_frames=int(fields["smear_frames"]),
                    seed=int(fields["seed"]),
                ),
            )
        )
    return PairManifest(records=tuple(records))


def record_mels(
    record: PairRecord,
    fb: MelFilterbank,
    n_fft: int = dsp.N_FFT,
    hop: int = dsp.HOP,
    log_floor: float = dsp.LOG_FLOOR,
) -> tuple[MelSpectrogram, MelSpectrogram]:
    """Load one record as (clean, distorted) log-mel pair, smear included."""
    clean = dsp.resample(dsp.load_wav(record.clean_path), fb.sample_rate)
    distorted = dsp.resample(dsp.load_wav(record.distorted_path), fb.sample_rate)
    clean_mel = dsp.audio_to_logmel(clean, fb, n_fft=n_fft, hop=hop, log_floor=log_floor)
    distorted_mel = dsp.audio_to_logmel(distorted, fb, n_fft=n_fft, hop=hop, log_floor=log_floor)
    return clean_mel, spectral_smear(distorted_mel, record.spec.smear_frames)
