"""Dataset similarity from learned style subspaces.

S(A, B) is the mean, over basis index i, of the cosine between
u_A^i + mu_A and u_B^i + mu_B.  Bases are paired by index; learned bases
have no canonical order or sign, so the score is only meaningful between
subspaces trained from a shared initialization.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.optimize import linear_sum_assignment

from . import checkpoint as ckpt_io
from .losses import NumericGuardError


@dataclass
class SimilarityMatrix:
    names: list[str]
    S: np.ndarray


def _basis_points(U, mu) -> np.ndarray:
    U = np.asarray(U.detach() if isinstance(U, torch.Tensor) else U, dtype=np.float64)
    mu = np.asarray(mu.detach() if isinstance(mu, torch.Tensor) else mu, dtype=np.float64)
    return U + mu[:, None]


def _unit_columns(P: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(P, axis=0)
    if np.any(n < 1e-12):
        raise NumericGuardError(f"zero-norm basis vector(s) at index {np.flatnonzero(n < 1e-12).tolist()}")
    return P / n


def pairwise_basis_cosines(a, b) -> np.ndarray:
    """q x q matrix of cosines between (u_A^i + mu_A) and (u_B^j + mu_B)."""
    Pa, Pb = _basis_points(*a), _basis_points(*b)
    if Pa.shape != Pb.shape:
        raise ValueError(f"subspace shapes differ: {Pa.shape} vs {Pb.shape}")
    return _unit_columns(Pa).T @ _unit_columns(Pb)


def similarity(a, b, align: str = "index") -> float:
    """``a`` and ``b`` are (U, mu) pairs or objects with ``U``/``mu`` attributes.

    ``align="max_permutation"`` is a diagnostic that pairs bases by the
    assignment maximizing total cosine instead of by index.
    """
    a, b = _as_pair(a), _as_pair(b)
    C = pairwise_basis_cosines(a, b)
    if align == "index":
        v = float(np.mean(np.diag(C)))
    elif align == "max_permutation":
        rows, cols = linear_sum_assignment(-C)
        v = float(np.mean(C[rows, cols]))
    else:
        raise ValueError(f"unknown alignment {align!r}")
    return float(np.clip(v, -1.0, 1.0))


def _as_pair(s):
    if hasattr(s, "U") and hasattr(s, "mu"):
        return s.U, s.mu
    return s


def subspace_from_checkpoint(path) -> tuple[np.ndarray, np.ndarray]:
    ck = ckpt_io.load_checkpoint(path)
    try:
        return ck.tensors["style.U"].numpy(), ck.tensors["style.mu"].numpy()
    except KeyError:
        raise ckpt_io.CheckpointError(f"{path}: no style subspace (style.U / style.mu)") from None


def similarity_matrix(subspaces: Sequence, names: Sequence[str], align: str = "index") -> SimilarityMatrix:
    if len(subspaces) < 2:
        raise ValueError("need at least two subspaces")
    if len(names) != len(subspaces):
        raise ValueError("one name per subspace required")
    ref = np.shape(_as_pair(subspaces[0])[0])
    for n, s in zip(names, subspaces):
        if np.shape(_as_pair(s)[0]) != ref:
            raise ValueError(f"subspace {n!r} has shape {np.shape(_as_pair(s)[0])}, expected {ref}")
    k = len(subspaces)
    S = np.eye(k)
    for i in range(k):
        S[i, i] = similarity(subspaces[i], subspaces[i], align)
        for j in range(i + 1, k):
            S[i, j] = S[j, i] = similarity(subspaces[i], subspaces[j], align)
    return SimilarityMatrix(list(names), S)


def similarity_from_checkpoints(paths: Sequence, names: Sequence[str] | None = None,
                                align: str = "index") -> SimilarityMatrix:
    names = list(names) if names is not None else [Path(p).stem for p in paths]
    subs = []
    for p in paths:
        U, mu = subspace_from_checkpoint(p)
        if subs and U.shape != subs[0][0].shape:
            raise ValueError(f"checkpoint {p} has subspace shape {U.shape}, expected {subs[0][0].shape}")
        subs.append((U, mu))
    return similarity_matrix(subs, names, align)


def write_csv(m: SimilarityMatrix, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + m.names)
        for name, row in zip(m.names, m.S):
            w.writerow([name] + [repr(float(v)) for v in row])
    return path


def read_csv(path) -> SimilarityMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return SimilarityMatrix(names, np.array([[float(v) for v in r[1:]] for r in rows[1:]]))


def write_grid_image(m: SimilarityMatrix, path, cell: int = 32) -> Path:
    """Grayscale grid, [-1, 1] mapped linearly onto [0, 255]."""
    vals = np.round((np.clip(m.S, -1, 1) + 1.0) * 127.5).astype(np.uint8)
    img = np.kron(vals, np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path, format="PNG")
    return Path(path)


def export_basis_vectors(U, mu, path: str | os.PathLike) -> Path:
    """CSV of the q points u_i + mu followed by mu itself, one row each."""
    P = _basis_points(U, mu)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + [f"x{j}" for j in range(P.shape[0])])
        for i in range(P.shape[1]):
            w.writerow([f"u{i}+mu"] + P[:, i].tolist())
        w.writerow(["mu"] + np.asarray(mu, dtype=np.float64).tolist())
    return path
