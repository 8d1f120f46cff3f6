"""Training objectives: GAN pair, magnitude-linked identity loss, total
generator loss, and the additive angular margin classification loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .subspace import MagnitudeSchedule, magnitude_target

NORM_EPS = 1e-12


class NumericGuardError(ArithmeticError):
    """Raised when a vector that must be normalized has (near) zero norm."""


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_ort: float = 1.0
    lambda_id: float = 8.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")


def safe_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norms = x.norm(dim=dim, keepdim=True)
    if bool((norms < NORM_EPS).any()):
        bad = (norms.squeeze(dim) < NORM_EPS).nonzero().flatten().tolist()
        raise NumericGuardError(f"zero-norm vector(s) at index {bad}")
    return x / norms


def discriminator_loss(real_logits: Sequence[torch.Tensor], fake_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """-log D(Y) - log(1 - D(X_hat)), averaged per pixel, then over scales."""
    terms = []
    for r, f in zip(real_logits, fake_logits, strict=True):
        terms.append(F.binary_cross_entropy_with_logits(r, torch.ones_like(r))
                     + F.binary_cross_entropy_with_logits(f, torch.zeros_like(f)))
    return torch.stack(terms).mean()


def generator_adv_loss(fake_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Non-saturating -log D(X_hat), averaged per pixel, then over scales."""
    return torch.stack([F.softplus(-f).mean() for f in fake_logits]).mean()


def cosine_dissimilarity(emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
    return 1.0 - (safe_normalize(emb_a) * safe_normalize(emb_b)).sum(dim=-1)


def identity_loss(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, x_hat: torch.Tensor,
                  a: torch.Tensor, schedule: MagnitudeSchedule) -> torch.Tensor:
    """Batch mean of ((1 - cos(f(x), f(x_hat))) - g(a))^2.

    ``f`` should have ``requires_grad=False`` parameters; gradients still
    reach ``x_hat``.  The reference embedding f(x) is computed without grad.
    """
    with torch.no_grad():
        ref = f(x)
    dissim = cosine_dissimilarity(ref, f(x_hat))
    return ((dissim - magnitude_target(schedule, a)) ** 2).mean()


def total_generator_loss(adv, ort, ident, w: LossWeights = LossWeights()):
    return w.lambda_adv * adv + w.lambda_ort * ort + w.lambda_id * ident


class MarginHead(nn.Module):
    """Additive angular margin head: target logit becomes s * cos(theta_y + m)."""

    def __init__(self, num_classes: int, embedding_dim: int, s: float = 16.0, m: float = 0.3,
                 generator: torch.Generator | None = None):
        super().__init__()
        if s <= 0:
            raise ValueError("scale s must be > 0")
        if not 0 <= m < math.pi / 2:
            raise ValueError("margin m must be in [0, pi/2)")
        self.num_classes, self.s, self.m = num_classes, s, m
        w = torch.empty(num_classes, embedding_dim)
        bound = math.sqrt(6.0 / (num_classes + embedding_dim))
        w.uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)

    def cosines(self, embeddings: torch.Tensor) -> torch.Tensor:
        return safe_normalize(embeddings) @ safe_normalize(self.weight).T

    def forward(self, embeddings, labels):
        return margin_classification_loss(embeddings, self, labels)


def margin_logits(cos: torch.Tensor, labels: torch.Tensor, s: float, m: float) -> torch.Tensor:
    # sin from cos; clamp_min keeps the gradient finite at |cos| = 1
    cos_y = cos.gather(1, labels[:, None])
    sin_y = (1.0 - cos_y * cos_y).clamp_min(NORM_EPS).sqrt()
    phi = cos_y * math.cos(m) - sin_y * math.sin(m) if m else cos_y
    logits = cos.scatter(1, labels[:, None], phi)
    return s * logits


def margin_classification_loss(embeddings: torch.Tensor, head: MarginHead, labels: torch.Tensor):
    """Returns (mean loss, per-sample losses)."""
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= head.num_classes):
        raise ValueError(f"labels must lie in [0, {head.num_classes}); got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    logits = margin_logits(head.cosines(embeddings), labels, head.s, head.m)
    per_sample = F.cross_entropy(logits, labels, reduction="none")
    return per_sample.mean(), per_sample
