"""Optimal-transport conditional flow matching math.

The conditional path between a prior draw x0 ~ N(0, I) and a data point
x1 is the affine interpolant

    xt = (1 - (1 - sigma_min) * t) * x0 + t * x1,

whose time derivative (the regression target for the vector field) is

    ut = x1 - (1 - sigma_min) * x0.

Integrating the learned field from t=0 to t=1 with a forward Euler solver
maps prior samples to data samples. Everything here is stateless; the
only randomness comes from generators owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class FlowConfig:
    """Path width and solver settings. Time is always drawn uniformly on [0, 1]."""

    sigma_min: float = 0.0
    n_steps: int = 64

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


def sample_prior(shape, generator: torch.Generator, dtype=torch.float64) -> Tensor:
    """I.i.d. standard normal draw, reproducible from the generator."""
    return torch.randn(*shape, generator=generator, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0: Tensor, x1: Tensor, t: float, sigma_min: float = 0.0) -> Tensor:
    """Point on the conditional path at time t (t=0 gives x0, t=1 gives x1 when sigma_min=0)."""
    _check_same_shape(x0, x1, "interpolate")
    return (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1


def target_velocity(x0: Tensor, x1: Tensor, sigma_min: float = 0.0) -> Tensor:
    """Time derivative of the conditional path; constant in t."""
    _check_same_shape(x0, x1, "target_velocity")
    return x1 - (1.0 - sigma_min) * x0


def flow_matching_loss(
    predicted: Tensor, target: Tensor, frame_mask: Tensor | None = None
) -> Tensor:
    """Mean squared field error over valid cells.

    `frame_mask` has shape (batch, frames) and marks non-padded frames;
    masked-out frames contribute nothing. With no mask the plain mean is
    returned.
    """
    _check_same_shape(predicted, target, "flow_matching_loss")
    err = (predicted - target) ** 2
    if frame_mask is None:
        return err.mean()
    if frame_mask.shape != predicted.shape[:2]:
        raise ValueError(
            f"frame_mask shape {tuple(frame_mask.shape)} does not match "
            f"batch layout {tuple(predicted.shape[:2])}"
        )
    mask = frame_mask.to(dtype=predicted.dtype)
    n_valid = mask.sum() * predicted.shape[-1]
    if n_valid == 0:
        raise ValueError("frame_mask is empty: no valid cells to average over")
    return (err * mask[..., None]).sum() / n_valid


@dataclass(frozen=True)
class FlowSample:
    """One draw from the conditional path: (t, x0, x1, xt, target)."""

    t: float
    x0: Tensor
    x1: Tensor
    xt: Tensor
    target: Tensor

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        for name in ("x1", "xt", "target"):
            _check_same_shape(self.x0, getattr(self, name), f"FlowSample.{name}")

    @classmethod
    def draw(cls, x1: Tensor, cfg: FlowConfig, generator: torch.Generator) -> "FlowSample":
        """Sample t ~ U[0, 1] and x0 ~ N(0, I), then form xt and the target field."""
        t = float(torch.rand((), generator=generator, dtype=torch.float64))
        x0 = sample_prior(x1.shape, generator, dtype=x1.dtype)
        return cls(
            t=t,
            x0=x0,
            x1=x1,
            xt=interpolate(x0, x1, t, cfg.sigma_min),
            target=target_velocity(x0, x1, cfg.sigma_min),
        )


class NonFiniteStateError(RuntimeError):
    """The ODE state left the finite range; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite ODE state after Euler step {step}")
        self.step = step


def euler_integrate(velocity_fn, x0: Tensor, cond=None, n_steps: int = 64) -> Tensor:
    """Forward Euler from t=0 to t=1 on a uniform grid.

    x_{k+1} = x_k + (1/n) * velocity_fn(x_k, k/n, cond), returning x_n.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    dt = 1.0 / n_steps
    x = x0
    for k in range(n_steps):
        x = x + dt * velocity_fn(x, k * dt, cond)
        if not torch.isfinite(x).all():
            raise NonFiniteStateError(k)
    return x
