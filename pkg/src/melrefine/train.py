"""Training loop: batching of variable-length mel pairs, AdamW, checkpoints.

The optimizer is decoupled-weight-decay Adam with bias-corrected moments,

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w),

implemented here directly so every update is reproducible and
checkpointable bit for bit. Checkpoints are a small versioned binary
container: a JSON header (config fingerprint, step, normalization,
parameter table, generator state) followed by raw float64 parameter and
moment data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .dsp import MelSpectrogram
from .flow import FlowConfig, FlowSample, flow_matching_loss
from .net import BatchTensor, EstimatorConfig, VectorFieldEstimator

CHECKPOINT_MAGIC = b"MELREFCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    """Raised when a training step produces non-finite values."""


class CheckpointError(RuntimeError):
    """Raised for unreadable or corrupt checkpoint files."""


class CheckpointMismatchError(CheckpointError):
    """Raised when a checkpoint was written under a different configuration."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    total_steps: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 500
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    step: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8


def init_adamw_state(
    named_params,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.95,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> AdamWState:
    named_params = dict(named_params)
    return AdamWState(
        m={n: torch.zeros_like(p) for n, p in named_params.items()},
        v={n: torch.zeros_like(p) for n, p in named_params.items()},
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        weight_decay=weight_decay,
        eps=eps,
    )


def adamw_update(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamWState
) -> tuple[dict[str, Tensor], AdamWState]:
    """One decoupled-weight-decay Adam step; returns new params and state."""
    k = state.step + 1
    bc1 = 1.0 - state.beta1**k
    bc2 = 1.0 - state.beta2**k
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, Tensor] = {}
    new_v: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for parameter '{name}'")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - state.lr * (
            m_hat / (torch.sqrt(v_hat) + state.eps) + state.weight_decay * p
        )
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, step=k)


@dataclass(frozen=True)
class TrainingBatch:
    """One padded batch on the conditional path, ready for a training step."""

    xt: BatchTensor
    cond: BatchTensor
    t: float
    target: Tensor
    x0: Tensor
    x1: Tensor


def make_training_batch(
    pairs: Sequence[tuple[Tensor, Tensor]],
    generator: torch.Generator,
    flow_cfg: FlowConfig,
) -> TrainingBatch:
    """Pad (clean, distorted) mel pairs to a batch and draw a flow sample.

    Pairs are (frames_i, n_mels) tensors; frame counts may differ across
    pairs but must agree within one.
    """
    if len(pairs) == 0:
        raise ValueError("cannot build a batch from an empty pair list")
    n_mels = pairs[0][0].shape[1]
    for i, (clean, distorted) in enumerate(pairs):
        if clean.shape != distorted.shape:
            raise ValueError(
                f"pair {i}: clean has {clean.shape[0]} frames but distorted has "
                f"{distorted.shape[0]}"
            )
        if clean.shape[1] != n_mels:
            raise ValueError(f"pair {i}: inconsistent mel width {clean.shape[1]}")

    dtype = pairs[0][0].dtype
    max_frames = max(clean.shape[0] for clean, _ in pairs)
    n = len(pairs)
    x1 = torch.zeros(n, max_frames, n_mels, dtype=dtype)
    cond = torch.zeros(n, max_frames, n_mels, dtype=dtype)
    mask = torch.zeros(n, max_frames, dtype=torch.bool)
    for i, (clean, distorted) in enumerate(pairs):
        frames = clean.shape[0]
        x1[i, :frames] = clean
        cond[i, :frames] = distorted
        mask[i, :frames] = True

    sample = FlowSample.draw(x1, flow_cfg, generator)
    return TrainingBatch(
        xt=BatchTensor(sample.xt, mask),
        cond=BatchTensor(cond, mask),
        t=sample.t,
        target=sample.target,
        x0=sample.x0,
        x1=x1,
    )


def training_step(
    batch: TrainingBatch, model: VectorFieldEstimator, opt_state: AdamWState
) -> tuple[AdamWState, float]:
    """Forward, masked loss, backprop, AdamW update. Returns the pre-update loss."""
    predicted = model(batch.xt.values, batch.cond.values, batch.t, batch.xt.frame_mask)
    loss = flow_matching_loss(predicted, batch.target, batch.xt.frame_mask)
    if not torch.isfinite(loss):
        raise TrainingError("non-finite loss")
    model.zero_grad(set_to_none=True)
    loss.backward()
    params = {n: p.detach() for n, p in model.named_parameters()}
    grads = {
        n: (p.grad if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    new_params, new_state = adamw_update(params, grads, opt_state)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(new_params[name])
    model.zero_grad(set_to_none=True)
    return new_state, float(loss.detach())


@dataclass(frozen=True)
class Checkpoint:
    """Decoded checkpoint contents."""

    params: dict[str, Tensor]
    m: dict[str, Tensor]
    v: dict[str, Tensor]
    optimizer: dict
    step: int
    model_config: EstimatorConfig
    flow_config: FlowConfig
    mel_norm: tuple[float, float]
    dtype: str
    rng_state: bytes | None
    dsp_config: dict | None


def _config_fingerprint(model_config: dict, flow_config: dict) -> str:
    blob = json.dumps(
        {"model_config": model_config, "flow_config": flow_config},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(
    path,
    model: VectorFieldEstimator,
    opt_state: AdamWState,
    step: int,
    flow_config: FlowConfig,
    mel_norm: tuple[float, float] = (0.0, 1.0),
    rng_state: bytes | None = None,
    dsp_config: dict | None = None,
) -> None:
    """Write the versioned binary checkpoint container (parameters as 64-bit)."""
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    model_cfg = asdict(model.config)
    flow_cfg = asdict(flow_config)
    header = {
        "format": "melrefine-checkpoint",
        "version": CHECKPOINT_VERSION,
        "fingerprint": _config_fingerprint(model_cfg, flow_cfg),
        "model_config": model_cfg,
        "flow_config": flow_cfg,
        "dsp_config": dsp_config,
        "dtype": str(model.dtype).removeprefix("torch."),
        "step": int(step),
        "mel_shift": float(mel_norm[0]),
        "mel_scale": float(mel_norm[1]),
        "optimizer": {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "weight_decay": opt_state.weight_decay,
            "eps": opt_state.eps,
            "step": opt_state.step,
        },
        "params": [[n, list(params[n].shape)] for n in names],
        "rng_state": rng_state.hex() if rng_state is not None else None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    def raw(t: Tensor) -> bytes:
        return t.detach().to(torch.float64).numpy().astype("<f8").tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for table in (params, opt_state.m, opt_state.v):
            for name in names:
                f.write(raw(table[name]))


def load_checkpoint(path, expected_model_config: EstimatorConfig | None = None) -> Checkpoint:
    """Read a checkpoint, verifying magic, fingerprint, and payload size.

    If `expected_model_config` is given, a checkpoint written under any
    other model configuration is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a melrefine checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    offset += header_len

    if _config_fingerprint(header["model_config"], header["flow_config"]) != header["fingerprint"]:
        raise CheckpointError(f"config fingerprint mismatch in {path} (corrupt file?)")
    model_config = EstimatorConfig(**header["model_config"])
    flow_config = FlowConfig(**header["flow_config"])
    if expected_model_config is not None and expected_model_config != model_config:
        diffs = [
            f"{key}: expected {getattr(expected_model_config, key)}, found {getattr(model_config, key)}"
            for key in asdict(model_config)
            if getattr(model_config, key) != getattr(expected_model_config, key)
        ]
        raise CheckpointMismatchError(
            f"checkpoint {path} was written under a different model config ({'; '.join(diffs)})"
        )

    names_shapes = [(n, tuple(s)) for n, s in header["params"]]
    n_values = sum(int(np.prod(s)) for _, s in names_shapes)
    expected_size = offset + 3 * n_values * 8
    if len(blob) != expected_size:
        raise CheckpointError(
            f"corrupt checkpoint {path}: expected {expected_size} bytes, found {len(blob)}"
        )

    def read_table() -> dict[str, Tensor]:
        nonlocal offset
        table = {}
        for name, shape in names_shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
            table[name] = torch.from_numpy(arr.copy())
            offset += count * 8
        return table

    params, m, v = read_table(), read_table(), read_table()
    rng_hex = header["rng_state"]
    return Checkpoint(
        params=params,
        m=m,
        v=v,
        optimizer=header["optimizer"],
        step=header["step"],
        model_config=model_config,
        flow_config=flow_config,
        mel_norm=(header["mel_shift"], header["mel_scale"]),
        dtype=header["dtype"],
        rng_state=bytes.fromhex(rng_hex) if rng_hex else None,
        dsp_config=header["dsp_config"],
    )


def restore_model(ck: Checkpoint) -> VectorFieldEstimator:
    """Rebuild the estimator from a checkpoint."""
    model = VectorFieldEstimator(ck.model_config, dtype=_DTYPES[ck.dtype])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(ck.params[name].to(p.dtype))
    return model


def compute_mel_norm(pairs) -> tuple[float, float]:
    """Global affine normalization (shift, scale) over all cells of all pairs."""
    cells = np.concatenate([np.ravel(_values(x)) for pair in pairs for x in pair])
    shift = float(cells.mean())
    scale = float(cells.std())
    return shift, (scale if scale > 1e-12 else 1.0)


def _values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)


@dataclass
class TrainResult:
    model: VectorFieldEstimator
    opt_state: AdamWState
    losses: list[float]
    mel_norm: tuple[float, float]
    step: int


def run_training(
    pairs,
    model_cfg: EstimatorConfig,
    flow_cfg: FlowConfig,
    train_cfg: TrainConfig,
    checkpoint_path=None,
    resume_from=None,
    dsp_config: dict | None = None,
    log=None,
) -> TrainResult:
    """Train the estimator on (clean, distorted) log-mel pairs.

    Fully deterministic given the seed: one generator drives weight init,
    batch selection, time sampling, and prior draws, and its state is
    stored in every checkpoint so a resumed run continues the exact
    uninterrupted trajectory.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    dt = _DTYPES[train_cfg.dtype]
    generator = torch.Generator().manual_seed(train_cfg.seed)
    model = VectorFieldEstimator(model_cfg, generator=generator, dtype=dt)
    opt_state = init_adamw_state(
        model.named_parameters(),
        lr=train_cfg.learning_rate,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        weight_decay=train_cfg.weight_decay,
        eps=train_cfg.eps,
    )
    start_step = 0
    losses: list[float] = []

    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_model_config=model_cfg)
        if ck.dtype != train_cfg.dtype:
            raise CheckpointMismatchError(
                f"checkpoint dtype {ck.dtype} differs from configured {train_cfg.dtype}"
            )
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(ck.params[name].to(dt))
        opt_state = AdamWState(
            m={n: t.to(dt) for n, t in ck.m.items()},
            v={n: t.to(dt) for n, t in ck.v.items()},
            step=ck.optimizer["step"],
            lr=ck.optimizer["lr"],
            beta1=ck.optimizer["beta1"],
            beta2=ck.optimizer["beta2"],
            weight_decay=ck.optimizer["weight_decay"],
            eps=ck.optimizer["eps"],
        )
        mel_norm = ck.mel_norm
        start_step = ck.step
        if ck.rng_state is not None:
            generator.set_state(torch.frombuffer(bytearray(ck.rng_state), dtype=torch.uint8).clone())
    else:
        mel_norm = compute_mel_norm(pairs)

    shift, scale = mel_norm
    std_pairs = [
        (
            torch.as_tensor((_values(clean) - shift) / scale, dtype=dt),
            torch.as_tensor((_values(distorted) - shift) / scale, dtype=dt),
        )
        for clean, distorted in pairs
    ]

    def checkpoint(step: int) -> None:
        save_checkpoint(
            checkpoint_path,
            model,
            opt_state,
            step,
            flow_cfg,
            mel_norm=mel_norm,
            rng_state=generator.get_state().numpy().tobytes(),
            dsp_config=dsp_config,
        )

    for step in range(start_step + 1, train_cfg.total_steps + 1):
        idx = torch.randint(0, len(std_pairs), (train_cfg.batch_size,), generator=generator)
        batch = make_training_batch([std_pairs[i] for i in idx], generator, flow_cfg)
        try:
            opt_state, loss = training_step(batch, model, opt_state)
        except TrainingError as e:
            raise TrainingError(f"aborted at step {step}: {e}") from e
        losses.append(loss)
        if log is not None:
            log(step, loss)
        if checkpoint_path is not None and (
            step % train_cfg.checkpoint_interval == 0 or step == train_cfg.total_steps
        ):
            checkpoint(step)

    return TrainResult(
        model=model,
        opt_state=opt_state,
        losses=losses,
        mel_norm=mel_norm,
        step=max(start_step, train_cfg.total_steps),
    )
