"""Closed-set rank-k identification and open-set TAR@FAR verification."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class FarPoint:
    far: float
    tar: float
    threshold: float
    insufficient_impostors: bool = False


@dataclass
class EvalReport:
    rank_k: dict[int, float]
    tar_at_far: dict[float, FarPoint]
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rank_k": {str(k): v for k, v in self.rank_k.items()},
            "tar_at_far": {repr(f): asdict(p) for f, p in self.tar_at_far.items()},
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def gallery_order(scores: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by descending score, ties by ascending index."""
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_k(gallery_emb, gallery_labels, probe_emb, probe_labels, ks: Sequence[int] = (1, 5)) -> dict[int, float]:
    gallery_emb, probe_emb = np.asarray(gallery_emb), np.asarray(probe_emb)
    gallery_labels, probe_labels = np.asarray(gallery_labels), np.asarray(probe_labels)
    missing = sorted(set(probe_labels.tolist()) - set(gallery_labels.tolist()))
    if missing:
        raise ValueError(f"probe identities absent from gallery: {missing}")
    order = gallery_order(probe_emb @ gallery_emb.T)
    hits = gallery_labels[order] == probe_labels[:, None]
    # first position (0-based) at which the true identity appears
    first = hits.argmax(axis=1)
    return {k: float(np.mean(first < k)) for k in ks}


def tar_at_far(genuine, impostor, far_targets: Sequence[float] = (1e-1, 1e-2)) -> dict[float, FarPoint]:
    """Threshold = smallest observed score t with frac(impostor >= t) <= FAR;
    TAR = frac(genuine >= t).  Candidate thresholds are all observed scores
    plus one value above every score (which accepts nothing)."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need non-empty genuine and impostor score lists")
    n_imp, n_gen = impostor.size, genuine.size
    cands = np.unique(np.concatenate([genuine, impostor]))
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))
    imp_sorted, gen_sorted = np.sort(impostor), np.sort(genuine)
    # counts of scores >= each candidate
    imp_ge = n_imp - np.searchsorted(imp_sorted, cands, side="left")
    gen_ge = n_gen - np.searchsorted(gen_sorted, cands, side="left")
    out = {}
    for far in far_targets:
        ok = imp_ge / n_imp <= far
        i = int(np.argmax(ok))  # the last candidate always qualifies
        out[far] = FarPoint(far, float(gen_ge[i] / n_gen), float(cands[i]),
                            insufficient_impostors=far < 1.0 / n_imp)
    return out


def pair_scores(gallery_emb, gallery_labels, probe_emb, probe_labels):
    """All gallery x probe cosine scores split into genuine and impostor."""
    scores = np.asarray(probe_emb) @ np.asarray(gallery_emb).T
    same = np.asarray(probe_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    return scores[same], scores[~same]


def evaluate_embeddings(gallery_emb, gallery_labels, probe_emb, probe_labels,
                        ks=(1, 5), fars=(1e-1, 1e-2)) -> EvalReport:
    genuine, impostor = pair_scores(gallery_emb, gallery_labels, probe_emb, probe_labels)
    return EvalReport(
        rank_k=rank_k(gallery_emb, gallery_labels, probe_emb, probe_labels, ks),
        tar_at_far=tar_at_far(genuine, impostor, fars),
        counts={"gallery": len(gallery_labels), "probe": len(probe_labels),
                "genuine_pairs": int(genuine.size), "impostor_pairs": int(impostor.size)},
    )
