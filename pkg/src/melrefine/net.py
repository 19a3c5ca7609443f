"""Conformer-based vector-field estimator.

The network maps (xt, condition, t) to an estimated velocity field of the
same (batch, frames, mel) shape. Per-frame inputs are fused by
concatenating xt, the condition, and a sinusoidal embedding of t, then
projected and run through a stack of conformer blocks with rotary
position embeddings. The conformer output is projected back to mel width,
stacked with xt and the condition as a 3-channel image, and finished by a
small 2-D convolutional head whose last layer starts at zero so an
untrained model predicts a zero field.

Padding frames are zeroed on entry and excluded from attention and the
convolution modules, so values inside them can never influence valid
frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

ROPE_BASE = 10000.0
TIME_EMBED_MAX_FREQ = 1000.0
LEAKY_SLOPE = 0.01
FF_EXPANSION = 4


@dataclass(frozen=True)
class EstimatorConfig:
    """Architecture hyperparameters (desk-scale defaults; n_blocks=10 for full scale)."""

    n_blocks: int = 2
    model_dim: int = 128
    n_heads: int = 4
    conv_kernel: int = 7
    time_embed_dim: int = 128
    n_mels: int = 128
    head_channels: int = 32

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if (self.model_dim // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.time_embed_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        for name in ("n_blocks", "model_dim", "n_heads", "time_embed_dim", "n_mels", "head_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class BatchTensor:
    """Batched frames plus per-frame validity flags."""

    values: Tensor  # (batch, frames, mel)
    frame_mask: Tensor  # (batch, frames) bool

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"expected (batch, frames, mel) values, got {tuple(self.values.shape)}")
        if self.frame_mask.shape != self.values.shape[:2]:
            raise ValueError(
                f"frame_mask shape {tuple(self.frame_mask.shape)} does not match "
                f"values {tuple(self.values.shape)}"
            )


def time_embed(t: float, dim: int, dtype=torch.float64) -> Tensor:
    """Sinusoidal embedding [sin(t*w_1)..sin(t*w_{d/2}), cos(t*w_1)..cos(t*w_{d/2})].

    Frequencies run geometrically from 1 to TIME_EMBED_MAX_FREQ so a unit
    interval of t is resolved at many scales.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=dtype)
    else:
        exponents = torch.arange(half, dtype=dtype) / (half - 1)
        freqs = TIME_EMBED_MAX_FREQ**exponents
    phase = t * freqs
    return torch.cat([torch.sin(phase), torch.cos(phase)])


def rope_apply(x: Tensor, positions: Tensor) -> Tensor:
    """Rotate coordinate pairs (2i, 2i+1) of the last axis by position * theta_i.

    theta_i = ROPE_BASE ** (-2i / head_dim), so attention scores between
    rotated queries and keys depend only on relative position. `x` has
    shape (..., frames, head_dim); `positions` has shape (frames,).
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    half = head_dim // 2
    theta = ROPE_BASE ** (-torch.arange(half, dtype=x.dtype) / half)
    angles = positions.to(x.dtype)[:, None] * theta[None, :]  # (frames, half)
    cos, sin = torch.cos(angles), torch.sin(angles)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack(
        (x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1
    )
    return rotated.flatten(-2)


class FeedForwardModule(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w_in = nn.Linear(dim, FF_EXPANSION * dim)
        self.w_out = nn.Linear(FF_EXPANSION * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.w_out(F.silu(self.w_in(self.norm(x))))


class RotarySelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, frame_mask: Tensor | None = None) -> Tensor:
        n, length, dim = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        q = q.view(n, length, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(n, length, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(n, length, self.n_heads, self.head_dim).transpose(1, 2)

        positions = torch.arange(length)
        q = rope_apply(q, positions)
        k = rope_apply(k, positions)

        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if frame_mask is not None:
            # Masked keys are never attended to (every item has >= 1 valid frame).
            scores = scores.masked_fill(
                ~frame_mask[:, None, None, :], float("-inf")
            )
        y = torch.softmax(scores, dim=-1) @ v
        y = y.transpose(1, 2).reshape(n, length, dim)
        y = self.out(y)
        if frame_mask is not None:
            y = y * frame_mask[..., None].to(y.dtype)
        return y


class ConvolutionModule(nn.Module):
    """Pointwise-GLU, depthwise conv over time, norm, SiLU, pointwise.

    Uses LayerNorm (not BatchNorm) after the depthwise convolution so
    items in a batch never mix.
    """

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pw_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(
            dim, dim, kernel_size=kernel, padding=kernel // 2, groups=dim
        )
        self.norm_mid = nn.LayerNorm(dim)
        self.pw_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, frame_mask: Tensor | None = None) -> Tensor:
        h = F.glu(self.pw_in(self.norm(x)), dim=-1)
        if frame_mask is not None:
            # Zero padded frames so the depthwise kernel cannot read them.
            h = h * frame_mask[..., None].to(h.dtype)
        h = self.depthwise(h.transpose(1, 2)).transpose(1, 2)
        h = self.pw_out(F.silu(self.norm_mid(h)))
        if frame_mask is not None:
            h = h * frame_mask[..., None].to(h.dtype)
        return h


class ConformerBlock(nn.Module):
    """FF(1/2) -> rotary MHSA -> conv -> FF(1/2), pre-norm residuals, final LayerNorm."""

    def __init__(self, dim: int, n_heads: int, conv_kernel: int):
        super().__init__()
        self.ff1 = FeedForwardModule(dim)
        self.attention = RotarySelfAttention(dim, n_heads)
        self.conv = ConvolutionModule(dim, conv_kernel)
        self.ff2 = FeedForwardModule(dim)
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, x: Tensor, frame_mask: Tensor | None = None) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attention(x, frame_mask)
        x = x + self.conv(x, frame_mask)
        x = x + 0.5 * self.ff2(x)
        return self.norm_out(x)


class ResBlock2D(nn.Module):
    """Two 3x3 convolutions with LeakyReLU and a residual add."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.leaky_relu(x, LEAKY_SLOPE))
        h = self.conv2(F.leaky_relu(h, LEAKY_SLOPE))
        return x + h


class VectorFieldEstimator(nn.Module):
    """Estimated velocity field v(xt | condition, t) on mel spectrogram batches.

    Construction is deterministic: all weights are drawn from the given
    generator (fan-in uniform for linear/conv layers, zeros for biases),
    and the final reducing convolution starts at zero.
    """

    def __init__(
        self,
        config: EstimatorConfig,
        generator: torch.Generator | None = None,
        dtype=torch.float64,
    ):
        super().__init__()
        self.config = config
        fused = 2 * config.n_mels + config.time_embed_dim
        self.in_proj = nn.Linear(fused, config.model_dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(config.model_dim, config.n_heads, config.conv_kernel)
            for _ in range(config.n_blocks)
        )
        self.mel_proj = nn.Linear(config.model_dim, config.n_mels)
        self.head_in = nn.Conv2d(3, config.head_channels, 3, padding=1)
        self.res1 = ResBlock2D(config.head_channels)
        self.res2 = ResBlock2D(config.head_channels)
        self.head_out = nn.Conv2d(config.head_channels, 1, 3, padding=1)
        self.to(dtype)
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.init_parameters(generator)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    @torch.no_grad()
    def init_parameters(self, generator: torch.Generator) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d, nn.Conv2d)):
                fan_in = module.weight.shape[1:].numel()
                bound = 1.0 / math.sqrt(fan_in)
                sample = torch.rand(
                    module.weight.shape, generator=generator, dtype=self.dtype
                )
                module.weight.copy_((2.0 * sample - 1.0) * bound)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        # Zero start: the untrained model predicts a zero field.
        self.head_out.weight.zero_()
        self.head_out.bias.zero_()

    def forward(
        self, xt: Tensor, cond: Tensor, t: float, frame_mask: Tensor | None = None
    ) -> Tensor:
        if xt.ndim != 3:
            raise ValueError(f"expected (batch, frames, mel) input, got {tuple(xt.shape)}")
        if xt.shape != cond.shape:
            raise ValueError(
                f"xt shape {tuple(xt.shape)} does not match condition {tuple(cond.shape)}"
            )
        if xt.shape[-1] != self.config.n_mels:
            raise ValueError(
                f"mel width {xt.shape[-1]} does not match config n_mels {self.config.n_mels}"
            )
        n, length, _ = xt.shape
        if frame_mask is not None:
            if frame_mask.shape != (n, length):
                raise ValueError(
                    f"frame_mask shape {tuple(frame_mask.shape)} does not match "
                    f"batch layout {(n, length)}"
                )
            frame_mask = frame_mask.bool()
            if not frame_mask.any(dim=1).all():
                raise ValueError("every item needs at least one valid frame")
            keep = frame_mask[..., None].to(xt.dtype)
            xt = xt * keep
            cond = cond * keep

        emb = time_embed(t, self.config.time_embed_dim, dtype=xt.dtype)
        emb = emb.expand(n, length, -1)
        h = self.in_proj(torch.cat([xt, cond, emb], dim=-1))
        for block in self.blocks:
            h = block(h, frame_mask)

        img = torch.stack([self.mel_proj(h), xt, cond], dim=1)  # (n, 3, frames, mel)
        if frame_mask is not None:
            img = img * frame_mask[:, None, :, None].to(img.dtype)
        img = self.head_in(img)
        img = self.res1(img)
        img = self.res2(img)
        return self.head_out(img).squeeze(1)
