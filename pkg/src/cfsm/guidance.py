"""FGSM guidance in style-coefficient space, batch composition and
perturbation analytics."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .losses import MarginHead, margin_classification_loss
from .networks import SynthesisModel


@dataclass(frozen=True)
class PerturbationRecord:
    o: np.ndarray
    o_star: np.ndarray
    cos_sim: float
    magnitude_delta: float

    @classmethod
    def from_pair(cls, o: np.ndarray, o_star: np.ndarray) -> "PerturbationRecord":
        no, ns = float(np.linalg.norm(o)), float(np.linalg.norm(o_star))
        cos = float(np.dot(o, o_star) / (no * ns)) if no > 0 and ns > 0 else float("nan")
        return cls(o, o_star, float(np.clip(cos, -1.0, 1.0)), ns - no)


def fgsm_direction(loss_fn: Callable[[torch.Tensor], torch.Tensor], o: torch.Tensor, epsilon: float) -> torch.Tensor:
    """epsilon * sign(d loss / d o), evaluated at ``o``.

    ``loss_fn`` maps a (B, q) coefficient tensor to a scalar; sign(0) = 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    o = o.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss_fn(o), o)
    bad = ~torch.isfinite(grad)
    if bad.any():
        row = int(bad.nonzero()[0, 0]) if grad.ndim > 1 else int(bad.nonzero()[0])
        raise FloatingPointError(f"non-finite style gradient for sample {row}")
    return epsilon * torch.sign(grad)


def fgsm_style_perturbation(fr_net: torch.nn.Module, head: MarginHead, synthesis: SynthesisModel,
                            x: torch.Tensor, labels: torch.Tensor, o: torch.Tensor, epsilon: float,
                            content: torch.Tensor | None = None) -> torch.Tensor:
    """One-step sign ascent of the recognition loss with respect to o.

    The per-sample losses are summed, so each sample's perturbation depends
    only on its own gradient.  No parameter gradients are accumulated.
    """
    if content is None:
        with torch.no_grad():
            content = synthesis.encode(x)

    def loss_fn(oo):
        x_star = synthesis.synthesize(x, oo, content=content)
        _, per_sample = margin_classification_loss(fr_net(x_star), head, labels)
        return per_sample.sum()

    return fgsm_direction(loss_fn, o, epsilon)


def n_synthetic(batch_size: int, synth_ratio: float) -> int:
    # round half up, so 0.5 * odd B does not depend on banker's rounding
    return int(math.floor(batch_size * synth_ratio + 0.5))


def compose_batch(x: torch.Tensor, x_star: torch.Tensor, labels: torch.Tensor, synth_ratio: float,
                  generator: torch.Generator | None = None):
    """Swap a uniformly chosen ``round(B * synth_ratio)`` subset of ``x`` for
    the matching synthetic images.  Returns (images, labels, synthetic mask)."""
    if not 0.0 <= synth_ratio <= 1.0:
        raise ValueError("synth_ratio must be in [0, 1]")
    b = x.shape[0]
    k = n_synthetic(b, synth_ratio)
    mask = torch.zeros(b, dtype=torch.bool)
    if k:
        mask[torch.randperm(b, generator=generator)[:k]] = True
    images = torch.where(mask[:, None, None, None], x_star, x)
    return images, labels.clone(), mask


def analyze_perturbations(records: Sequence[PerturbationRecord], bins: int = 50,
                          csv_path: str | os.PathLike | None = None) -> dict:
    if not records:
        raise ValueError("need at least one perturbation record")
    cos = np.array([r.cos_sim for r in records])
    delta = np.array([r.magnitude_delta for r in records])
    cos_hist, cos_edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    lo, hi = float(delta.min()), float(delta.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    d_hist, d_edges = np.histogram(delta, bins=bins, range=(lo, hi))
    if csv_path is not None:
        write_perturbation_csv(csv_path, records)
    return {
        "count": len(records),
        "cos_sim_hist": cos_hist.tolist(),
        "cos_sim_edges": cos_edges.tolist(),
        "magnitude_delta_hist": d_hist.tolist(),
        "magnitude_delta_edges": d_edges.tolist(),
        "cos_sim_mean": float(cos.mean()),
        "magnitude_delta_mean": float(delta.mean()),
        "magnitude_delta_abs_mean": float(np.abs(delta).mean()),
        "scatter": list(zip(cos.tolist(), delta.tolist())),
    }


def write_perturbation_csv(path, records: Sequence[PerturbationRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cos_sim", "magnitude_delta"])
        for r in records:
            w.writerow([repr(r.cos_sim), repr(r.magnitude_delta)])
    return path


def read_perturbation_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["cos_sim"]), float(r["magnitude_delta"])) for r in rows]


def save_records(path, records: Sequence[PerturbationRecord]):
    """Raw o / o* pairs as .npz, the input for ``analyze-perturbations``."""
    np.savez(path, o=np.stack([r.o for r in records]), o_star=np.stack([r.o_star for r in records]))


def load_records(path) -> list[PerturbationRecord]:
    with np.load(path) as z:
        return [PerturbationRecord.from_pair(a, b) for a, b in zip(z["o"], z["o_star"])]
