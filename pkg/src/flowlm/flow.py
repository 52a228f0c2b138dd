"""Flow-matching math: straight-line conditional flows, target vector fields,
the regression loss, classifier-free guidance, and fixed-step ODE solvers.

All functions are pure and operate on torch tensors of any (matching) shape;
the trailing dimension is the embedding dimension. Randomness always comes
from an explicitly passed ``torch.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .errors import ContractViolation, NumericalError

DEFAULT_SIGMA_MIN = 1e-5

FieldFn = Callable[[float, torch.Tensor], torch.Tensor]


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def ot_flow(t, x0: torch.Tensor, x1: torch.Tensor, sigma_min: float = DEFAULT_SIGMA_MIN) -> torch.Tensor:
    """Point on the straight-line conditional path at time ``t``:

        x_t = t * x1 + (1 - (1 - sigma_min) * t) * x0

    ``t`` may be a scalar or a tensor broadcastable against ``x0`` (e.g. a
    per-row time column for batched training).
    """
    _check_same_shape(x0, x1, "ot_flow")
    if not 0.0 <= sigma_min < 1.0:
        raise ContractViolation(f"sigma_min must be in [0, 1), got {sigma_min}")
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    return t * x1 + (1.0 - (1.0 - sigma_min) * t) * x0


def ot_target_field(x0: torch.Tensor, x1: torch.Tensor, sigma_min: float = DEFAULT_SIGMA_MIN) -> torch.Tensor:
    """Target vector field of the straight-line path, constant in t:

        u = x1 - (1 - sigma_min) * x0
    """
    _check_same_shape(x0, x1, "ot_target_field")
    return x1 - (1.0 - sigma_min) * x0


def cfm_loss(predicted_field: torch.Tensor, target_field: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean norm of the field residual, summed over the last
    dimension and averaged over any leading dimensions."""
    _check_same_shape(predicted_field, target_field, "cfm_loss")
    sq = (predicted_field - target_field).pow(2).sum(dim=-1)
    return sq.mean()


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided field ``v_cond + scale * (v_cond - v_uncond)``.

    ``scale == 0`` returns ``v_cond`` unchanged (bit-identical).
    """
    _check_same_shape(v_cond, v_uncond, "cfg_combine")
    if scale < 0:
        raise ContractViolation(f"cfg scale must be >= 0, got {scale}")
    if scale == 0.0:
        return v_cond
    return v_cond + scale * (v_cond - v_uncond)


@dataclass(frozen=True)
class FlowPoint:
    """A training point on a conditional flow: time, endpoints, path point,
    and the target field at that point."""

    t: float
    x0: torch.Tensor
    x1: torch.Tensor
    xt: torch.Tensor
    ut: torch.Tensor

    @staticmethod
    def make(t: float, x0: torch.Tensor, x1: torch.Tensor,
             sigma_min: float = DEFAULT_SIGMA_MIN) -> "FlowPoint":
        if not 0.0 <= float(t) <= 1.0:
            raise ContractViolation(f"flow time must be in [0, 1], got {t}")
        return FlowPoint(
            t=float(t),
            x0=x0,
            x1=x1,
            xt=ot_flow(t, x0, x1, sigma_min),
            ut=ot_target_field(x0, x1, sigma_min),
        )


@dataclass(frozen=True)
class SolverSpec:
    """Fixed-step ODE solver selection with an exact evaluation budget.

    ``nfe`` counts vector-field evaluations: euler spends one per step,
    midpoint two, so midpoint requires an even ``nfe``.
    """

    method: str = "midpoint"
    nfe: int = 64

    def __post_init__(self):
        if self.method not in ("euler", "midpoint"):
            raise ContractViolation(f"unknown solver method {self.method!r}")
        if self.nfe < 1:
            raise ContractViolation(f"nfe must be >= 1, got {self.nfe}")
        if self.method == "midpoint" and self.nfe % 2 != 0:
            raise ContractViolation(f"midpoint solver needs even nfe, got {self.nfe}")

    @property
    def steps(self) -> int:
        return self.nfe if self.method == "euler" else self.nfe // 2


def ode_sample(field_fn: FieldFn, x0: torch.Tensor, spec: SolverSpec) -> torch.Tensor:
    """Integrate dx/dt = field_fn(t, x) from t=0 to t=1 on a uniform grid.

    Performs exactly ``spec.nfe`` field evaluations. ``x0`` may carry leading
    batch dimensions as long as ``field_fn`` handles them.
    """
    if not torch.isfinite(x0).all():
        raise ContractViolation("ode_sample: x0 contains non-finite values")
    x = x0
    n = spec.steps
    h = 1.0 / n
    for i in range(n):
        t = i * h
        if spec.method == "euler":
            k = field_fn(t, x)
            _check_field(k, i)
            x = x + h * k
        else:
            k1 = field_fn(t, x)
            _check_field(k1, i)
            k2 = field_fn(t + 0.5 * h, x + 0.5 * h * k1)
            _check_field(k2, i)
            x = x + h * k2
    return x


def _check_field(v: torch.Tensor, step: int) -> None:
    if not torch.isfinite(v).all():
        raise NumericalError(f"non-finite vector field output at solver step {step}")


def sample_prior(dim: int, temperature: float, rng: torch.Generator,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Zero-mean isotropic Gaussian draw with per-coordinate std ``temperature``."""
    if dim < 1:
        raise ContractViolation(f"prior dim must be >= 1, got {dim}")
    if temperature <= 0:
        raise ContractViolation(f"prior temperature must be > 0, got {temperature}")
    return temperature * torch.randn(dim, generator=rng, dtype=dtype)


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of flow time; ``t`` is (...,) in [0, 1], output
    (..., dim) with log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype, device=t.device)
    )
    ang = t.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb
