"""Differentiable tensor operations used by the model, plus a gradient checker.

Every operation is a thin, shape-checked wrapper over ``torch`` so the
conventions the rest of the pipeline relies on are fixed in one place:

* ``linear`` stores weights as ``[in, out]`` (``y = x @ W + b``).
* ``grid_sample_bilinear`` uses align-corners normalized coordinates,
  ``u = (x + 1) / 2 * (W - 1)``, with coordinates clamped to the border.
* ``gelu`` is the tanh approximation
  ``0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x**3)))``.
* ``gem_pool`` clamps inputs below at ``eps`` before the power.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from core.errors import ConfigurationError, DimensionError, NumericFailure

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64
RNG_ALGORITHM = "torch-mt19937+numpy-pcg64"
SOFTMAX = "softmax_lastaxis"
GELU = "gelu"


@dataclass(frozen=True)
class RngState:
    """Seed plus the documented generator algorithms it drives."""

    seed: int
    algorithm: str = RNG_ALGORITHM

    def torch_generator(self) -> torch.Generator:
        generator = torch.Generator(device="cpu")
        generator.manual_seed(self.seed)
        return generator

    def numpy_generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


def seed_everything(seed: int) -> RngState:
    """Seed the global torch/numpy generators and force deterministic kernels."""
    if seed < 0 or seed >= 2**64:
        raise ConfigurationError(f"seed must be a 64-bit unsigned value, got {seed}")
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)
    return RngState(seed=seed)


def ensure_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        bad = int((~torch.isfinite(tensor)).sum())
        raise NumericFailure(f"{where}: {bad} non-finite value(s) in tensor of shape {tuple(tensor.shape)}")
    return tensor


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` broadcast over the leading extents of ``x``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input {tuple(x.shape)} does not match weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"linear: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}"
        )
    out = torch.matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-padded cross-correlation with a square 1x1 or 3x3 kernel."""
    if x.dim() != 4 or kernel.dim() != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}"
        )
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k not in (1, 3):
        raise ConfigurationError(f"conv2d: kernel must be 1x1 or 3x3, got {tuple(kernel.shape[-2:])}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: input channels {x.shape[1]} do not match kernel {tuple(kernel.shape)}"
        )
    return F.conv2d(x, kernel, bias, padding=(k - 1) // 2)


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine {tuple(gamma.shape)}/{tuple(beta.shape)} does not match last axis {d}"
        )
    return F.layer_norm(x, (d,), gamma, beta, eps)


def softmax_gelu(x: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == SOFTMAX:
        return torch.softmax(x, dim=-1)
    if mode == GELU:
        return F.gelu(x, approximate="tanh")
    raise ConfigurationError(f"softmax_gelu: unknown mode '{mode}'")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return softmax_gelu(x, GELU)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return softmax_gelu(x, SOFTMAX)


def mhsa(
    x: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor,
    heads: int,
) -> torch.Tensor:
    """Multi-head self-attention over the token axis of ``x`` ([B, T, d])."""
    batch, tokens, dim = x.shape
    if heads <= 0 or dim % heads != 0:
        raise ConfigurationError(f"mhsa: model dim {dim} is not divisible by {heads} heads")
    head_dim = dim // heads
    qkv = linear(x, qkv_weight, qkv_bias)
    qkv = qkv.reshape(batch, tokens, 3, heads, head_dim).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(head_dim)
    attended = torch.matmul(softmax(scores), v)
    merged = attended.transpose(1, 2).reshape(batch, tokens, dim)
    return linear(merged, proj_weight, proj_bias)


def grid_sample_bilinear(features: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of ``features`` ([B, C, H, W]) at ``grid`` ([B, H', W', 2])."""
    if features.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise DimensionError(
            f"grid_sample: expected [B,C,H,W] and [B,H',W',2], "
            f"got {tuple(features.shape)} and {tuple(grid.shape)}"
        )
    if grid.shape[0] != features.shape[0]:
        raise DimensionError(
            f"grid_sample: batch {features.shape[0]} does not match grid batch {grid.shape[0]}"
        )
    return F.grid_sample(
        features, grid.to(features.dtype), mode="bilinear", padding_mode="border", align_corners=True
    )


def gem_pool(features: torch.Tensor, p: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Generalized mean over the two trailing spatial axes: [B, C, H, W] -> [B, C]."""
    if bool((p <= 0).any()):
        raise ConfigurationError(f"gem_pool: exponent must be positive, got {p.detach().tolist()}")
    clamped = features.clamp(min=eps)
    # GeM is positively homogeneous, so scaling by the per-channel max keeps
    # large exponents finite without changing the value or the gradient.
    scale = clamped.amax(dim=(-2, -1), keepdim=True).detach()
    pooled = (clamped / scale).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)
    return pooled * scale.squeeze(-1).squeeze(-1)


def l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return F.normalize(v, p=2.0, dim=-1, eps=eps)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(
            err < self.tolerance for err in self.max_rel_error.values()
        )

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    *,
    names: Sequence[str] | None = None,
    h: float = 1e-5,
    tolerance: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-12,
) -> GradCheckReport:
    """Compare autograd against central finite differences in float64.

    The output is contracted with a fixed random cotangent so non-scalar
    operations reduce to one scalar. The relative error for an input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.
    """
    labels = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    report = GradCheckReport(tolerance=tolerance)
    leaves = [t.detach().to(CHECK_DTYPE).clone().requires_grad_(True) for t in inputs]

    with torch.no_grad():
        baseline = fn(*leaves)
    if not bool(torch.isfinite(baseline).all()):
        report.failure = "forward output is non-finite at the unperturbed inputs"
        return report
    generator = torch.Generator().manual_seed(seed)
    cotangent = torch.randn(baseline.shape, generator=generator, dtype=CHECK_DTYPE)

    def scalar(*args: torch.Tensor) -> torch.Tensor:
        return (fn(*args) * cotangent).sum()

    objective = scalar(*leaves)
    if objective.requires_grad:
        analytic = torch.autograd.grad(objective, leaves, allow_unused=True)
    else:
        analytic = tuple(None for _ in leaves)

    for idx, (label, leaf) in enumerate(zip(labels, leaves)):
        grad = analytic[idx]
        grad = torch.zeros_like(leaf) if grad is None else grad.detach()
        numeric = torch.zeros_like(leaf)
        flat = numeric.view(-1)
        base = [t.detach() for t in leaves]
        with torch.no_grad():
            for j in range(leaf.numel()):
                shifted = base[idx].clone()
                view = shifted.view(-1)
                view[j] += h
                plus = scalar(*base[:idx], shifted, *base[idx + 1 :])
                view[j] -= 2 * h
                minus = scalar(*base[:idx], shifted, *base[idx + 1 :])
                if not (math.isfinite(float(plus)) and math.isfinite(float(minus))):
                    report.failure = f"non-finite value while perturbing {label}[{j}]"
                    return report
                flat[j] = (plus - minus) / (2 * h)
        scale = max(float(grad.abs().max()), float(numeric.abs().max()), floor)
        report.max_rel_error[label] = float((grad - numeric).abs().max()) / scale
    logger.debug("grad_check errors: %s", report.max_rel_error)
    return report


__all__ = [
    "CHECK_DTYPE",
    "DEFAULT_DTYPE",
    "GELU",
    "GradCheckReport",
    "RngState",
    "SOFTMAX",
    "conv2d",
    "ensure_finite",
    "gelu",
    "gem_pool",
    "grad_check",
    "grid_sample_bilinear",
    "l2_normalize",
    "layer_norm",
    "linear",
    "mhsa",
    "seed_everything",
    "softmax",
    "softmax_gelu",
]
