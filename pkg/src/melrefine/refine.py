"""Inference: distorted audio -> condition mel -> ODE sampling -> refined audio.

Conditions are standardized with the affine normalization recorded at
training time, a prior draw is integrated through the learned field with
the forward Euler solver, and the result is mapped back to log-mel units
(clamped at the compression floor). `Refiner` bundles everything a
checkpoint needs to run end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from .dsp import AudioBuffer, MelFilterbank, MelSpectrogram
from .flow import FlowConfig, euler_integrate, sample_prior
from .net import VectorFieldEstimator
from .train import Checkpoint, load_checkpoint, restore_model

MAX_FRAMES = 4096


def refine_mel(
    cond: MelSpectrogram,
    model: VectorFieldEstimator,
    flow_cfg: FlowConfig,
    generator: torch.Generator,
    mel_norm: tuple[float, float] = (0.0, 1.0),
    max_frames: int = MAX_FRAMES,
    log_floor: float = dsp.LOG_FLOOR,
) -> MelSpectrogram:
    """Sample a refined mel spectrogram conditioned on a distorted one."""
    if cond.n_frames > max_frames:
        raise ValueError(
            f"condition has {cond.n_frames} frames, above the limit of {max_frames}; "
            "split the input instead"
        )
    shift, scale = mel_norm
    z = torch.as_tensor((cond.values - shift) / scale, dtype=model.dtype).unsqueeze(0)
    x0 = sample_prior(z.shape, generator, dtype=model.dtype)

    def velocity(x, t, c):
        with torch.no_grad():
            return model(x, c, t)

    y = euler_integrate(velocity, x0, z, flow_cfg.n_steps)
    values = y.squeeze(0).numpy().astype(np.float64) * scale + shift
    return MelSpectrogram(np.maximum(values, math.log(log_floor)), frame_rate=cond.frame_rate)


def refine_wav(
    distorted: AudioBuffer,
    model: VectorFieldEstimator,
    fb: MelFilterbank,
    flow_cfg: FlowConfig,
    generator: torch.Generator,
    mel_norm: tuple[float, float] = (0.0, 1.0),
    n_fft: int = dsp.N_FFT,
    hop: int = dsp.HOP,
    log_floor: float = dsp.LOG_FLOOR,
    gl_iterations: int = dsp.GRIFFIN_LIM_ITERATIONS,
    gl_momentum: float = dsp.GRIFFIN_LIM_MOMENTUM,
) -> AudioBuffer:
    """Full pipeline: analysis, mel refinement, Griffin-Lim synthesis."""
    audio = dsp.resample(distorted, fb.sample_rate)
    cond = dsp.audio_to_logmel(audio, fb, n_fft=n_fft, hop=hop, log_floor=log_floor)
    refined = refine_mel(cond, model, flow_cfg, generator, mel_norm, log_floor=log_floor)
    return dsp.logmel_to_audio(
        refined, fb, iterations=gl_iterations, momentum=gl_momentum, n_fft=n_fft, hop=hop
    )


@dataclass
class Refiner:
    """A trained model plus the analysis settings it was trained with."""

    model: VectorFieldEstimator
    flow_cfg: FlowConfig
    mel_norm: tuple[float, float]
    fb: MelFilterbank
    n_fft: int = dsp.N_FFT
    hop: int = dsp.HOP
    log_floor: float = dsp.LOG_FLOOR
    gl_iterations: int = dsp.GRIFFIN_LIM_ITERATIONS
    gl_momentum: float = dsp.GRIFFIN_LIM_MOMENTUM

    @classmethod
    def from_checkpoint(cls, path, n_steps: int | None = None) -> "Refiner":
        ck: Checkpoint = load_checkpoint(path)
        model = restore_model(ck)
        model.eval()
        flow_cfg = ck.flow_config
        if n_steps is not None:
            flow_cfg = FlowConfig(sigma_min=flow_cfg.sigma_min, n_steps=n_steps)
        d = ck.dsp_config or {}
        fb = dsp.build_mel_filterbank(
            n_mels=ck.model_config.n_mels,
            n_fft=d.get("n_fft", dsp.N_FFT),
            sample_rate=d.get("sample_rate", dsp.SAMPLE_RATE),
            f_min=d.get("f_min", dsp.F_MIN),
            f_max=d.get("f_max", dsp.F_MAX),
        )
        return cls(
            model=model,
            flow_cfg=flow_cfg,
            mel_norm=ck.mel_norm,
            fb=fb,
            n_fft=d.get("n_fft", dsp.N_FFT),
            hop=d.get("hop", dsp.HOP),
            log_floor=d.get("log_floor", dsp.LOG_FLOOR),
            gl_iterations=d.get("griffin_lim_iterations", dsp.GRIFFIN_LIM_ITERATIONS),
            gl_momentum=d.get("griffin_lim_momentum", dsp.GRIFFIN_LIM_MOMENTUM),
        )

    @property
    def sample_rate(self) -> int:
        return self.fb.sample_rate

    def mel(self, cond: MelSpectrogram, seed: int = 0) -> MelSpectrogram:
        generator = torch.Generator().manual_seed(seed)
        return refine_mel(
            cond, self.model, self.flow_cfg, generator, self.mel_norm, log_floor=self.log_floor
        )

    def wav(self, distorted: AudioBuffer, seed: int = 0) -> AudioBuffer:
        generator = torch.Generator().manual_seed(seed)
        return refine_wav(
            distorted,
            self.model,
            self.fb,
            self.flow_cfg,
            generator,
            self.mel_norm,
            n_fft=self.n_fft,
            hop=self.hop,
            log_floor=self.log_floor,
            gl_iterations=self.gl_iterations,
            gl_momentum=self.gl_momentum,
        )
