"""Linear style subspace: z = U o + mu."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class MagnitudeSchedule:
    """Linear map from coefficient magnitude to target identity dissimilarity."""

    l_a: float = 0.0
    u_a: float = 6.0
    l_m: float = 0.05
    u_m: float = 0.65

    def __post_init__(self):
        if not self.l_a < self.u_a:
            raise ValueError("need l_a < u_a")
        if not self.l_m < self.u_m:
            raise ValueError("need l_m < u_m")


def magnitude_target(schedule: MagnitudeSchedule, a):
    """g(a), with ``a`` clamped to [l_a, u_a]. Works on floats and tensors."""
    s = schedule
    if isinstance(a, torch.Tensor):
        a = a.clamp(s.l_a, s.u_a)
    else:
        a = min(max(float(a), s.l_a), s.u_a)
    return (a - s.l_a) * (s.u_m - s.l_m) / (s.u_a - s.l_a) + s.l_m


class StyleSubspace(nn.Module):
    def __init__(self, d: int = 128, q: int = 10, generator: torch.Generator | None = None):
        super().__init__()
        if not 1 <= q < d:
            raise ValueError(f"need 1 <= q < d, got q={q}, d={d}")
        self.d, self.q = d, q
        self.U = nn.Parameter(torch.randn(d, q, generator=generator) / d ** 0.5)
        self.mu = nn.Parameter(torch.zeros(d))

    def forward(self, o: torch.Tensor) -> torch.Tensor:
        return to_style_code(self, o)

    def basis_points(self) -> torch.Tensor:
        """Columns u_i + mu, shape d x q."""
        return self.U + self.mu[:, None]


def sample_coefficient(generator: torch.Generator | None, q: int, batch: int | None = None) -> torch.Tensor:
    """o ~ N(0, I_q); returns shape (q,) or (batch, q)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    shape = (q,) if batch is None else (batch, q)
    return torch.randn(shape, generator=generator)


def to_style_code(subspace: StyleSubspace, o: torch.Tensor) -> torch.Tensor:
    if o.shape[-1] != subspace.q:
        raise ValueError(f"coefficient has {o.shape[-1]} entries, subspace has q={subspace.q}")
    return o @ subspace.U.T + subspace.mu


def orthogonality_loss(U: torch.Tensor) -> torch.Tensor:
    """Elementwise L1 norm of U^T U - I."""
    eye = torch.eye(U.shape[1], dtype=U.dtype, device=U.device)
    return (U.T @ U - eye).abs().sum()
