"""melrefine: mel-domain speech refinement with conditional flow matching."""

from .dsp import (
    AudioBuffer,
    ComplexSpectrogram,
    MelFilterbank,
    MelSpectrogram,
    audio_to_logmel,
    build_mel_filterbank,
    istft,
    load_wav,
    logmel_to_audio,
    resample,
    save_wav,
    stft,
)
from .flow import FlowConfig, FlowSample, euler_integrate, flow_matching_loss, interpolate, sample_prior, target_velocity
from .net import BatchTensor, EstimatorConfig, VectorFieldEstimator, rope_apply, time_embed
from .refine import Refiner, refine_mel, refine_wav
from .simulate import DegradationSpec, PairManifest, PairRecord, build_dataset, read_manifest, write_manifest
from .train import TrainConfig, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"
