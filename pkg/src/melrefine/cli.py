"""Command-line entry point: simulate, train, refine, eval, plot."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import dsp, evaluate, simulate, train as train_mod
from .config import Config, ConfigError, load_config
from .refine import Refiner
from .train import CheckpointError


def _fail(e: Exception) -> "click.ClickException":
    return click.ClickException(str(e))


_ERRORS = (ConfigError, CheckpointError, ValueError, OSError)


def _filterbank(cfg: Config) -> dsp.MelFilterbank:
    d = cfg.dsp
    return dsp.build_mel_filterbank(
        n_mels=d.n_mels, n_fft=d.n_fft, sample_rate=d.sample_rate,
        f_min=d.f_min, f_max=d.f_max,
    )


@click.group()
def main():
    """Mel-domain speech refinement with a flow-matching model."""


@main.command("simulate")
@click.option("--config", "-c", "config_path", required=True, type=click.Path())
def cmd_simulate(config_path):
    """Build a degraded dataset and manifest from a directory of clean WAVs."""
    try:
        cfg = load_config(config_path)
        s = cfg.simulate
        if not s.clean_dir or not s.out_dir:
            raise ConfigError("section 'simulate' needs both 'clean_dir' and 'out_dir'")
        manifest = simulate.build_dataset(
            s.clean_dir, s.out_dir, cfg.degradation_specs(),
            seed=s.seed, sample_rate=cfg.dsp.sample_rate,
        )
    except _ERRORS as e:
        raise _fail(e)
    click.echo(f"wrote {len(manifest)} pairs under {s.out_dir}")


@main.command("train")
@click.option("--config", "-c", "config_path", required=True, type=click.Path())
@click.option("--resume", "resume_from", default=None, type=click.Path(),
              help="Checkpoint to continue from.")
def cmd_train(config_path, resume_from):
    """Train the refiner on the pairs listed in a manifest."""
    try:
        cfg = load_config(config_path)
        if not cfg.train.manifest:
            raise ConfigError("section 'train' needs a 'manifest' path")
        manifest = simulate.read_manifest(cfg.train.manifest)
        fb = _filterbank(cfg)
        pairs = [
            simulate.record_mels(r, fb, n_fft=cfg.dsp.n_fft, hop=cfg.dsp.hop,
                                 log_floor=cfg.dsp.log_floor)
            for r in manifest
        ]
        result = train_mod.run_training(
            pairs,
            cfg.estimator_config(),
            cfg.flow_config(),
            cfg.train_config(),
            checkpoint_path=cfg.train.checkpoint_path,
            resume_from=resume_from,
            dsp_config=cfg.dsp.__dict__,
            log=lambda step, loss: click.echo(f"step {step}: loss {loss:.6f}")
            if step % 100 == 0 else None,
        )
    except _ERRORS + (train_mod.TrainingError,) as e:
        raise _fail(e)
    click.echo(
        f"trained {len(pairs)} pairs to step {result.step} "
        f"(final loss {result.losses[-1]:.6f}); checkpoint at {cfg.train.checkpoint_path}"
    )


@main.command("refine")
@click.argument("input_wav", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.argument("output_wav", type=click.Path())
@click.option("--seed", default=0, show_default=True, help="Prior-draw seed.")
@click.option("--steps", default=None, type=int, help="ODE steps (default: checkpoint value).")
def cmd_refine(input_wav, checkpoint, output_wav, seed, steps):
    """Refine one WAV file through the trained model."""
    try:
        refiner = Refiner.from_checkpoint(checkpoint, n_steps=steps)
        audio = dsp.load_wav(input_wav)
        refined = refiner.wav(audio, seed=seed)
        dsp.save_wav(refined, output_wav)
    except _ERRORS as e:
        raise _fail(e)
    click.echo(f"wrote {output_wav} ({refined.duration:.2f} s at {refined.sample_rate} Hz)")


@main.command("eval")
@click.argument("manifest", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.argument("report", type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--refined-dir", default=None, type=click.Path(),
              help="Score precomputed <id>.wav files instead of running the model.")
def cmd_eval(manifest, checkpoint, report, seed, refined_dir):
    """Score refined outputs against clean references over a manifest."""
    try:
        refiner = Refiner.from_checkpoint(checkpoint)
        records = simulate.read_manifest(manifest)
        rows = evaluate.evaluate_manifest(
            records, refiner, report_path=report, seed=seed, refined_dir=refined_dir
        )
    except _ERRORS as e:
        raise _fail(e)
    mean_d = np.mean([r["si_snr_distorted"] for r in rows])
    mean_r = np.mean([r["si_snr_refined"] for r in rows])
    click.echo(
        f"wrote {report}: {len(rows)} records, "
        f"mean SI-SNR {mean_d:.2f} dB -> {mean_r:.2f} dB"
    )


@main.command("plot")
@click.argument("input_path", type=click.Path())
@click.argument("output_png", type=click.Path())
def cmd_plot(input_path, output_png):
    """Render a spectrogram PNG from a WAV file or a saved .npy log-mel array."""
    try:
        path = Path(input_path)
        if path.suffix.lower() == ".npy":
            mel = dsp.MelSpectrogram(np.load(path))
        elif path.suffix.lower() == ".wav":
            audio = dsp.resample(dsp.load_wav(path), dsp.SAMPLE_RATE)
            mel = dsp.audio_to_logmel(audio, dsp.build_mel_filterbank())
        else:
            raise ValueError(f"cannot plot {path}: expected a .wav or .npy input")
        evaluate.render_spectrogram_image(mel, output_png)
    except _ERRORS as e:
        raise _fail(e)
    click.echo(f"wrote {output_png} ({mel.n_frames} x {mel.n_mels})")


if __name__ == "__main__":
    main()
