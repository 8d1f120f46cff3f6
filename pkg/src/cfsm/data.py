"""Toy identity datasets, degradation ops and batch loading.

Identities are parametric face glyphs rendered with numpy; every sample adds
nuisance jitter (rotation, translation, brightness).  Target (unlabeled)
sets are produced by running source images through a fixed degradation
pipeline: blur -> resolution loss -> motion blur -> noise.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "test_gallery", "test_probe")
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class IdentityRecord:
    image_path: str
    identity_id: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.identity_id < -1:
            raise ValueError(f"identity_id must be >= -1, got {self.identity_id}")


@dataclass
class Manifest:
    records: list[IdentityRecord]
    num_identities: int
    image_size: int
    seed: int
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    @property
    def labeled(self) -> bool:
        return all(r.identity_id >= 0 for r in self.records)

    def resolve(self, record: IdentityRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def subset(self, split: str) -> "Manifest":
        recs = [r for r in self.records if r.split == split]
        ids = {r.identity_id for r in recs if r.identity_id >= 0}
        return Manifest(recs, len(ids), self.image_size, self.seed, self.root)

    def labels(self) -> np.ndarray:
        return np.array([r.identity_id for r in self.records], dtype=np.int64)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        header = {"num_identities": self.num_identities, "image_size": self.image_size, "seed": self.seed}
        lines = [json.dumps(header)]
        for r in self.records:
            lines.append(json.dumps({"path": r.image_path, "identity": r.identity_id, "split": r.split}))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        records = []
        for ln in lines[1:]:
            d = json.loads(ln)
            records.append(IdentityRecord(d["path"], int(d["identity"]), d["split"]))
        return cls(records, int(header["num_identities"]), int(header["image_size"]), int(header["seed"]),
                   path.parent)


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma_range: tuple[float, float] = (0.6, 1.4)
    downsample_factors: tuple[int, ...] = (2, 4)
    noise_std_range: tuple[float, float] = (0.03, 0.08)
    motion_blur_lengths: tuple[int, ...] = (3, 5)
    apply_probabilities: dict = field(default_factory=lambda: {
        "blur": 0.5, "downsample": 0.5, "motion": 0.5, "noise": 0.8})

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo > hi")
            if lo < 0:
                raise ValueError(f"{name}: negative bound")
        if not self.downsample_factors or not self.motion_blur_lengths:
            raise ValueError("downsample_factors and motion_blur_lengths must be non-empty")
        if any(f < 1 for f in self.downsample_factors) or any(L < 1 for L in self.motion_blur_lengths):
            raise ValueError("factors and lengths must be >= 1")
        for k, p in self.apply_probabilities.items():
            if k not in DEGRADATION_OPS:
                raise ValueError(f"unknown degradation op {k!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {k} outside [0, 1]: {p}")

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        d = dict(d)
        for k in ("blur_sigma_range", "noise_std_range", "downsample_factors", "motion_blur_lengths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "blur_sigma_range": list(self.blur_sigma_range),
            "downsample_factors": list(self.downsample_factors),
            "noise_std_range": list(self.noise_std_range),
            "motion_blur_lengths": list(self.motion_blur_lengths),
            "apply_probabilities": dict(self.apply_probabilities),
        }


DEGRADATION_OPS = ("blur", "downsample", "motion", "noise")

# Named presets used by the CLI and the similarity experiments.
DEGRADATION_PRESETS = {
    "mixed": DegradationSpec(),
    "blur": DegradationSpec(blur_sigma_range=(1.0, 1.6), downsample_factors=(2,), motion_blur_lengths=(5, 7),
                            noise_std_range=(0.0, 0.0),
                            apply_probabilities={"blur": 1.0, "downsample": 0.0, "motion": 0.5, "noise": 0.0}),
    "noise": DegradationSpec(noise_std_range=(0.08, 0.15),
                             apply_probabilities={"blur": 0.0, "downsample": 0.0, "motion": 0.0, "noise": 1.0}),
}


# ---------------------------------------------------------------------------
# Glyph rendering
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def identity_params(identity_id: int, seed: int) -> dict:
    """Deterministic glyph parameters for one identity."""
    rng = np.random.default_rng([seed, identity_id, 0x1D])
    return {
        "skin": _hsv_to_rgb(rng.uniform(), rng.uniform(0.25, 0.7), rng.uniform(0.55, 0.95)),
        "hair": _hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.1, 0.6)),
        "eye": _hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.1, 0.7)),
        "background": _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.4), rng.uniform(0.3, 0.9)),
        "face_rx": rng.uniform(0.26, 0.38),
        "face_ry": rng.uniform(0.32, 0.44),
        "eye_dx": rng.uniform(0.08, 0.17),
        "eye_y": rng.uniform(-0.14, 0.0),
        "eye_r": rng.uniform(0.035, 0.075),
        "mouth_y": rng.uniform(0.12, 0.24),
        "mouth_w": rng.uniform(0.08, 0.18),
        "mouth_curv": rng.uniform(-1.0, 1.0),
        "hairline": rng.uniform(-0.35, -0.15),
        "nose_len": rng.uniform(0.0, 0.1),
    }


def render_glyph(params: dict, size: int, rotation_deg: float = 0.0, shift=(0.0, 0.0),
                 brightness: float = 1.0, supersample: int = 4) -> np.ndarray:
    """Rasterize a face glyph as an HxWx3 float array in [0, 1]."""
    n = size * supersample
    c = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    # inverse-transform pixel coordinates into glyph space
    th = math.radians(rotation_deg)
    xs, ys = xx - shift[0], yy - shift[1]
    gx = math.cos(th) * xs + math.sin(th) * ys
    gy = -math.sin(th) * xs + math.cos(th) * ys

    img = np.empty((n, n, 3))
    img[:] = params["background"]
    face = (gx / params["face_rx"]) ** 2 + (gy / params["face_ry"]) ** 2 <= 1.0
    img[face] = params["skin"]
    hair = face & (gy < params["hairline"])
    img[hair] = params["hair"]
    for sx in (-1.0, 1.0):
        eye = (gx - sx * params["eye_dx"]) ** 2 + (gy - params["eye_y"]) ** 2 <= params["eye_r"] ** 2
        img[eye] = params["eye"]
    nose = (np.abs(gx) < 0.018) & (gy > params["eye_y"] + 0.04) & (gy < params["eye_y"] + 0.04 + params["nose_len"])
    img[nose] = params["skin"] * 0.6
    mw = params["mouth_w"]
    mouth_curve = params["mouth_y"] + params["mouth_curv"] * 0.06 * (1.0 - (gx / mw) ** 2)
    mouth = (np.abs(gx) <= mw) & (np.abs(gy - mouth_curve) < 0.022)
    img[mouth] = np.array([0.55, 0.1, 0.15])

    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return np.clip(img * brightness, 0.0, 1.0)


def _to_png(img: np.ndarray, path: Path):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit RGB PNG into HxWx3 float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise FileNotFoundError(f"image not found: {path}") from None
    return arr / 255.0


def generate_toy_dataset(num_identities: int, samples_per_id: int, image_size: int, seed: int,
                         out_dir: str | os.PathLike, first_identity: int = 0) -> Manifest:
    """Render ``num_identities * samples_per_id`` glyph images and write a manifest.

    The last two samples of every identity go to the test splits (one gallery,
    one probe); the rest are train.  ``first_identity`` offsets the identity
    ids so two calls can produce disjoint populations.
    """
    if num_identities < 2:
        raise ValueError("num_identities must be >= 2")
    if samples_per_id < 2:
        raise ValueError("samples_per_id must be >= 2")
    if image_size not in (32, 64):
        raise ValueError("image_size must be 32 or 64")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e

    records = []
    for ident in range(first_identity, first_identity + num_identities):
        params = identity_params(ident, seed)
        for k in range(samples_per_id):
            rng = np.random.default_rng([seed, ident, k, 0x5A])
            img = render_glyph(
                params, image_size,
                rotation_deg=rng.uniform(-10.0, 10.0),
                shift=tuple(rng.uniform(-0.1, 0.1, size=2)),
                brightness=1.0 + rng.uniform(-0.15, 0.15),
            )
            rel = f"images/id{ident:05d}_{k:03d}.png"
            try:
                _to_png(img, out / rel)
            except OSError as e:
                raise OSError(f"failed writing {out / rel}: {e}") from e
            if k == samples_per_id - 2:
                split = "test_gallery"
            elif k == samples_per_id - 1:
                split = "test_probe"
            else:
                split = "train"
            records.append(IdentityRecord(rel, ident, split))
    manifest = Manifest(records, num_identities, image_size, seed, out)
    manifest.save(out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image.copy()
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")


def downsample_nearest(image: np.ndarray, factor: int) -> np.ndarray:
    return image[::factor, ::factor]


def upsample_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def resample(image: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsample by ``factor`` then bilinear back to the input size."""
    if factor <= 1:
        return image.copy()
    return upsample_bilinear(downsample_nearest(image, factor), image.shape[:2])


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Uniform line kernel of ``length`` pixels at ``angle_deg``, summing to 1."""
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    th = math.radians(angle_deg)
    for t in np.linspace(-c, c, 4 * length):
        x = int(round(c + t * math.cos(th)))
        y = int(round(c - t * math.sin(th)))
        k[y, x] = 1.0
    return k / k.sum()


def motion_blur(image: np.ndarray, length: int, angle_deg: float) -> np.ndarray:
    if length <= 1:
        return image.copy()
    k = motion_kernel(length, angle_deg)
    return np.stack([ndimage.convolve(image[..., ch], k, mode="reflect") for ch in range(image.shape[2])], axis=-1)


def add_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, std, size=image.shape), 0.0, 1.0)


def apply_degradation(image: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Degrade an HxWxC image in [0, 1].

    Every op draws its Bernoulli gate and parameters whether or not it fires,
    so the random stream consumed per image is fixed.
    """
    probs = spec.apply_probabilities
    out = np.asarray(image, dtype=np.float64)
    draws = {
        "blur": (rng.uniform() < probs.get("blur", 0.0), rng.uniform(*spec.blur_sigma_range)),
        "downsample": (rng.uniform() < probs.get("downsample", 0.0), int(rng.choice(spec.downsample_factors))),
        "motion": (rng.uniform() < probs.get("motion", 0.0),
                   (int(rng.choice(spec.motion_blur_lengths)), rng.uniform(0.0, 180.0))),
        "noise": (rng.uniform() < probs.get("noise", 0.0), rng.uniform(*spec.noise_std_range)),
    }
    fired, sigma = draws["blur"]
    if fired:
        out = gaussian_blur(out, sigma)
    fired, factor = draws["downsample"]
    if fired:
        out = resample(out, factor)
    fired, (length, angle) = draws["motion"]
    if fired:
        out = motion_blur(out, length, angle)
    fired, std = draws["noise"]
    if fired:
        out = add_noise(out, std, rng)
    return np.clip(out, 0.0, 1.0)


def select_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a seeded uniform ``round(fraction * n)``-subset of range(n)."""
    count = int(round(fraction * n))
    if count == 0:
        raise ValueError(f"fraction {fraction} of {n} records selects no images")
    rng = np.random.default_rng([seed, 0x7A])
    return np.sort(rng.choice(n, size=count, replace=False))


def build_target_set(source_manifest: Manifest, spec: DegradationSpec, fraction: float, seed: int,
                     out_dir: str | os.PathLike, exclude_identities: Iterable[int] = ()) -> Manifest:
    """Degrade a random ``fraction`` of the source images into an unlabeled manifest.

    Records whose identity is in ``exclude_identities`` are skipped when that
    leaves anything to draw from.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    excluded = set(exclude_identities)
    pool = [r for r in source_manifest.records if r.identity_id not in excluded] or list(source_manifest.records)
    chosen = select_subset(len(pool), fraction, seed)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for j, idx in enumerate(chosen):
        src = pool[idx]
        img = read_image(source_manifest.resolve(src))
        deg = apply_degradation(img, spec, np.random.default_rng([seed, j, 0xDE]))
        rel = f"images/t{j:05d}.png"
        try:
            _to_png(deg, out / rel)
        except OSError as e:
            raise OSError(f"failed writing {out / rel}: {e}") from e
        records.append(IdentityRecord(rel, -1, "train"))
    manifest = Manifest(records, 0, source_manifest.image_size, seed, out)
    manifest.save(out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor  # B x C x H x W in [-1, 1]
    labels: torch.Tensor  # B, int64, -1 for unlabeled

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"expected a non-empty BxCxHxW tensor, got {tuple(self.images.shape)}")
        if self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels and images disagree on batch size")

    def __len__(self):
        return self.images.shape[0]


def to_model_range(images: np.ndarray) -> torch.Tensor:
    """Stack HxWxC [0, 1] arrays into a Bx C xHxW tensor in [-1, 1]."""
    arr = np.stack(images).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0


def to_image_range(images: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_model_range`; returns BxHxWxC in [0, 1]."""
    return ((images.detach().clamp(-1, 1) + 1.0) / 2.0).permute(0, 2, 3, 1).cpu().numpy()


def load_batch(manifest: Manifest, indices: Sequence[int]) -> Batch:
    n = len(manifest.records)
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for manifest of {n} records")
    recs = [manifest.records[i] for i in indices]
    images = [read_image(manifest.resolve(r)) for r in recs]
    labels = torch.tensor([r.identity_id for r in recs], dtype=torch.long)
    return Batch(to_model_range(images), labels)


class ImageCache:
    """Decodes a manifest once and serves batches from memory.

    Toy datasets are a few thousand 32x32 images, so holding them as one
    tensor is cheaper than re-reading PNGs every step.
    """

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.images = load_batch(manifest, range(len(manifest))).images if len(manifest) else None
        self.labels = torch.from_numpy(manifest.labels())

    def __len__(self):
        return len(self.manifest)

    def batch(self, indices) -> Batch:
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return Batch(self.images[idx], self.labels[idx])

    def sample(self, batch_size: int, generator: torch.Generator) -> Batch:
        idx = torch.randint(len(self), (batch_size,), generator=generator)
        return Batch(self.images[idx], self.labels[idx])
