"""Parameterized building blocks over the functional ops in ``core.numerics``."""

from __future__ import annotations

import torch
from torch import nn

from core import numerics
from core.errors import ConfigurationError

INIT_STD = 0.02


class Linear(nn.Module):
    """Affine map with the weight stored as ``[in, out]``."""

    def __init__(self, in_dim: int, out_dim: int, *, zero_init: bool = False) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.trunc_normal_(self.weight, std=INIT_STD)

    def zero_(self) -> Linear:
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(nn.Module):
    """Same-padded square convolution (1x1 or 3x3)."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel_size: int, *, zero_init: bool = False
    ) -> None:
        super().__init__()
        if kernel_size not in (1, 3):
            raise ConfigurationError(f"Conv2d kernel_size must be 1 or 3, got {kernel_size}")
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=5**0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.conv2d(x, self.weight, self.bias)


class Adapter(nn.Module):
    """Serial bottleneck ``x + up(gelu(down(x)))``; the up-projection starts at zero."""

    def __init__(self, dim: int, rank: int) -> None:
        super().__init__()
        if rank <= 0:
            raise ConfigurationError(f"adapter rank must be positive, got {rank}")
        self.down = Linear(dim, rank)
        self.up = Linear(rank, dim, zero_init=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(numerics.gelu(self.down(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention and GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, hidden: int, *, eps: float = 1e-6) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"block dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim, eps)
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.norm2 = LayerNorm(dim, eps)
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)
        self.adapter: Adapter | None = None

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.mhsa(
            x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.heads
        )

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(numerics.gelu(self.fc1(x)))

    def zero_residual_branches(self) -> TransformerBlock:
        self.proj.zero_()
        self.fc2.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        if self.adapter is not None:
            x = self.adapter(x)
        return x


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "Adapter",
    "Conv2d",
    "LayerNorm",
    "Linear",
    "TransformerBlock",
    "count_parameters",
]
