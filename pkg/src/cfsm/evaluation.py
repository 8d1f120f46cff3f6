"""End-to-end evaluation of a recognition checkpoint on gallery/probe splits."""
from __future__ import annotations

import numpy as np
import torch

from .data import DegradationSpec, Manifest, apply_degradation, read_image, to_model_range
from .metrics import EvalReport, evaluate_embeddings
from .stage2 import embed, load_fr


def load_images(manifest: Manifest, degradation: DegradationSpec | None = None, seed: int = 0) -> torch.Tensor:
    imgs = []
    for i, rec in enumerate(manifest.records):
        img = read_image(manifest.resolve(rec))
        if degradation is not None:
            img = apply_degradation(img, degradation, np.random.default_rng([seed, i, 0xE7]))
        imgs.append(img)
    return to_model_range(imgs)


def evaluate(fr_checkpoint, gallery: Manifest, probe: Manifest, degradation: DegradationSpec | None = None,
             seed: int = 0, ks=(1, 5), fars=(1e-1, 1e-2)) -> EvalReport:
    """Embed gallery and (optionally degraded) probes, then score rank-k and TAR@FAR."""
    fr, _ = load_fr(fr_checkpoint)
    return evaluate_model(fr.net, gallery, probe, degradation, seed, ks, fars)


def evaluate_model(net, gallery: Manifest, probe: Manifest, degradation: DegradationSpec | None = None,
                   seed: int = 0, ks=(1, 5), fars=(1e-1, 1e-2)) -> EvalReport:
    g = embed(net, load_images(gallery)).numpy()
    p = embed(net, load_images(probe, degradation, seed)).numpy()
    return evaluate_embeddings(g, gallery.labels(), p, probe.labels(), ks, fars)
