"""Low-rank adapters for frozen linear projections.

An :class:`AdaptedLinear` computes ``W0 x + scale * B (A x) (+ bias)`` where
``W0`` and ``bias`` are frozen and only ``A`` (r x k) and ``B`` (d x r) train.
``scale`` is ``alpha / r`` in standard mode and ``alpha / sqrt(r)`` in
rank-stabilized mode.

With ``heads > 1`` the output rows are split into equal head slices and each
slice gets its own independent (A_i, B_i) pair; the fused update is then the
block-stacked ``B_i A_i``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn
from torch.nn import functional as F


class ScalingMode(str, Enum):
    STANDARD = "standard"
    RANK_STABILIZED = "rank_stabilized"


def lora_scale(alpha: float, rank: int, mode: ScalingMode | str) -> float:
    mode = ScalingMode(mode)
    if mode is ScalingMode.STANDARD:
        return alpha / rank
    return alpha / math.sqrt(rank)


def _check_rank(d: int, k: int, r: int, alpha: float) -> None:
    if not isinstance(r, int) or r < 1:
        raise ValueError(f"rank must be a positive integer, got {r!r}")
    if r > min(d, k):
        raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    if r > min(d, k) / 2:
        warnings.warn(
            f"rank {r} is above min(d, k)/2 = {min(d, k) / 2}; the update is not low-rank",
            stacklevel=3,
        )


class LoraAdapter(nn.Module):
    """Trainable pair (A, B) with its scaling metadata.

    ``A`` is drawn from N(0, 1/k); ``B`` starts at zero so a fresh adapter
    contributes nothing.
    """

    def __init__(
        self,
        d: int,
        k: int,
        rank: int = 16,
        alpha: float = 16.0,
        mode: ScalingMode | str = ScalingMode.RANK_STABILIZED,
        *,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        _check_rank(d, k, rank, alpha)
        self.d, self.k, self.rank = d, k, rank
        self.alpha = float(alpha)
        self.mode = ScalingMode(mode)
        a = torch.randn(rank, k, generator=generator, dtype=torch.float64) / math.sqrt(k)
        self.A = nn.Parameter(a.to(dtype))
        self.B = nn.Parameter(torch.zeros(d, rank, dtype=dtype))

    @property
    def scale(self) -> float:
        return lora_scale(self.alpha, self.rank, self.mode)

    def delta(self) -> torch.Tensor:
        """The dense update ``scale * B @ A`` (d x k)."""
        return self.scale * (self.B @ self.A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.A.T) @ self.B.T)

    def extra_repr(self) -> str:
        return f"d={self.d}, k={self.k}, rank={self.rank}, alpha={self.alpha}, mode={self.mode.value}"


def init_adapter(
    d: int,
    k: int,
    r: int,
    alpha: float = 16.0,
    mode: ScalingMode | str = ScalingMode.RANK_STABILIZED,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> LoraAdapter:
    gen = torch.Generator().manual_seed(seed)
    return LoraAdapter(d, k, r, alpha, mode, generator=gen, dtype=dtype)


class AdaptedLinear(nn.Module):
    """A frozen linear layer plus one (fused) or ``heads`` (per-head) adapters."""

    def __init__(
        self,
        weight: torch.Tensor,
        bias: torch.Tensor | None = None,
        rank: int = 16,
        alpha: float = 16.0,
        mode: ScalingMode | str = ScalingMode.RANK_STABILIZED,
        heads: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        d, k = weight.shape
        if d % heads:
            raise ValueError(f"output dim {d} not divisible by heads={heads}")
        self.weight = nn.Parameter(weight.detach().clone(), requires_grad=False)
        if bias is None:
            self.register_parameter("bias", None)
        else:
            self.bias = nn.Parameter(bias.detach().clone(), requires_grad=False)
        gen = torch.Generator().manual_seed(seed)
        d_head = d // heads
        self.adapters = nn.ModuleList(
            LoraAdapter(d_head, k, rank, alpha, mode, generator=gen, dtype=weight.dtype)
            for _ in range(heads)
        )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def per_head(self) -> bool:
        return len(self.adapters) > 1

    def delta(self) -> torch.Tensor:
        return torch.cat([a.delta() for a in self.adapters], dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        out = F.linear(x, self.weight, self.bias)
        lora = torch.cat([a(x) for a in self.adapters], dim=-1)
        return out + lora

    def merged_weight(self) -> torch.Tensor:
        with torch.no_grad():
            return self.weight + self.delta()

    def to_linear(self) -> nn.Linear:
        """A plain ``nn.Linear`` carrying the merged weight; ``self`` is untouched."""
        lin = nn.Linear(
            self.in_features, self.out_features, bias=self.bias is not None, dtype=self.weight.dtype
        )
        with torch.no_grad():
            lin.weight.copy_(self.merged_weight())
            if self.bias is not None:
                lin.bias.copy_(self.bias)
        lin.requires_grad_(False)
        return lin

    def trainable_count(self) -> int:
        return sum(a.A.numel() + a.B.numel() for a in self.adapters)


def adapter_forward(layer: AdaptedLinear, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


def merge(layer: AdaptedLinear) -> torch.Tensor:
    """Return ``W0 + scale * B A`` as a new tensor."""
    return layer.merged_weight().clone()


def lora_param_count(d: int, k: int, r: int) -> int:
    return r * (d + k)


@dataclass(frozen=True)
class AdapterMeta:
    rank: int
    alpha: float
    scaling_mode: str
    per_head: bool
    base_fingerprint: str

    def compatible_with(self, other: "AdapterMeta") -> list[str]:
        """Names of fields that differ (empty when compatible)."""
        return [
            name
            for name in ("rank", "alpha", "scaling_mode", "per_head")
            if getattr(self, name) != getattr(other, name)
        ]
