"""Objective proxy metrics and spectrogram rendering.

SI-SNR (scale-invariant SNR after projecting the estimate onto the
reference) and log-spectral distance stand in for perceptual scores;
absolute perceptual ratings are not reproduced here.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from . import dsp
from .dsp import AudioBuffer, MelSpectrogram
from .simulate import PairManifest, record_mels

SI_SNR_CAP_DB = 100.0

_REPORT_FIELDS = ("id", "si_snr_distorted", "si_snr_refined", "lsd_distorted", "lsd_refined")


def si_snr(estimate: AudioBuffer, reference: AudioBuffer) -> float:
    """Scale-invariant SNR in dB, capped at +100 when the residual underflows.

    Both signals are zero-meaned, the estimate is projected onto the
    reference, and the energy ratio of projection to residual is returned.
    """
    if len(estimate) != len(reference):
        raise ValueError(
            f"length mismatch: estimate {len(estimate)}, reference {len(reference)}"
        )
    s = reference.samples - reference.samples.mean()
    e = estimate.samples - estimate.samples.mean()
    s_energy = float(np.dot(s, s))
    if s_energy == 0:
        raise ValueError("reference has zero energy")
    proj = (np.dot(e, s) / s_energy) * s
    resid = e - proj
    num = float(np.dot(proj, proj))
    den = float(np.dot(resid, resid))
    if num == 0:
        return -SI_SNR_CAP_DB
    if den == 0 or num / den >= 10.0 ** (SI_SNR_CAP_DB / 10.0):
        return SI_SNR_CAP_DB
    return 10.0 * math.log10(num / den)


def log_spectral_distance(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """Root-mean-square cellwise difference of two log-mel spectrograms."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    return float(np.sqrt(np.mean((a.values - b.values) ** 2)))


def render_spectrogram_image(mel: MelSpectrogram, path) -> None:
    """Write a grayscale PNG, one pixel per cell, low mel bins at the bottom.

    Values are min-max normalized per image; a constant input maps to
    uniform mid-gray.
    """
    v = mel.values
    span = v.max() - v.min()
    norm = np.full_like(v, 0.5) if span == 0 else (v - v.min()) / span
    pixels = np.round(norm * 255.0).astype(np.uint8)
    # Rows are mel bins, top row = highest bin; columns are frames.
    Image.fromarray(np.flipud(pixels.T), mode="L").save(Path(path))


def write_report(rows: list[dict], path) -> None:
    """Line-delimited evaluation records as tab-separated key=value fields."""
    lines = []
    for row in rows:
        lines.append(
            "\t".join(
                f"{k}={row[k] if k == 'id' else format(row[k], '.6f')}"
                for k in _REPORT_FIELDS
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        fields = dict(token.split("=", 1) for token in line.split("\t"))
        rows.append(
            {k: (fields[k] if k == "id" else float(fields[k])) for k in _REPORT_FIELDS}
        )
    return rows


def evaluate_manifest(
    manifest: PairManifest,
    refiner,
    report_path=None,
    seed: int = 0,
    refined_dir=None,
) -> list[dict]:
    """Refine every record and score it against its clean reference.

    If `refined_dir` is given, precomputed WAVs named `<id>.wav` are
    scored instead of running the model, which makes the metrics usable
    for any external system's outputs.
    """
    rows = []
    for index, record in enumerate(manifest):
        clean = dsp.resample(dsp.load_wav(record.clean_path), refiner.sample_rate)
        distorted = dsp.resample(dsp.load_wav(record.distorted_path), refiner.sample_rate)
        clean_mel, distorted_mel = record_mels(
            record, refiner.fb, n_fft=refiner.n_fft, hop=refiner.hop, log_floor=refiner.log_floor
        )
        if refined_dir is not None:
            refined = dsp.resample(
                dsp.load_wav(Path(refined_dir) / f"{record.id}.wav"), refiner.sample_rate
            )
        else:
            refined = refiner.wav(distorted, seed=seed + index)
        refined_mel = dsp.audio_to_logmel(
            refined, refiner.fb, n_fft=refiner.n_fft, hop=refiner.hop, log_floor=refiner.log_floor
        )

        n = min(len(clean), len(distorted), len(refined))
        frames = min(clean_mel.n_frames, distorted_mel.n_frames, refined_mel.n_frames)
        crop_wav = lambda buf: AudioBuffer(buf.samples[:n], buf.sample_rate)
        crop_mel = lambda mel: MelSpectrogram(mel.values[:frames], frame_rate=mel.frame_rate)
        rows.append(
            {
                "id": record.id,
                "si_snr_distorted": si_snr(crop_wav(distorted), crop_wav(clean)),
                "si_snr_refined": si_snr(crop_wav(refined), crop_wav(clean)),
                "lsd_distorted": log_spectral_distance(
                    crop_mel(distorted_mel), crop_mel(clean_mel)
                ),
                "lsd_refined": log_spectral_distance(crop_mel(refined_mel), crop_mel(clean_mel)),
            }
        )
    if report_path is not None:
        write_report(rows, report_path)
    return rows
