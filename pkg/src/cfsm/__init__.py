"""Controllable face synthesis (CFSM) at toy scale: style-subspace image
translation, FGSM-guided augmentation for recognition training, and a
subspace-based dataset similarity score."""

from .data import Batch, DegradationSpec, IdentityRecord, Manifest
from .losses import LossWeights, MarginHead
from .networks import CFSM, EmbeddingNet, MultiScaleDiscriminator, SynthesisModel
from .subspace import MagnitudeSchedule, StyleSubspace

__version__ = "0.1.0"

__all__ = [
    "Batch", "CFSM", "DegradationSpec", "EmbeddingNet", "IdentityRecord", "LossWeights", "MagnitudeSchedule",
    "Manifest", "MarginHead", "MultiScaleDiscriminator", "StyleSubspace", "SynthesisModel",
]
