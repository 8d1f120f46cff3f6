"""Stage 2: recognition training with optional CFSM augmentation.

Modes:
    baseline      real images only
    random_style  synthetic images with o ~ N(0, I)
    guided        synthetic images with o* = o + FGSM perturbation
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import ConfigError, Stage2Config
from .data import Batch, ImageCache, Manifest
from .guidance import PerturbationRecord, compose_batch, fgsm_style_perturbation, save_records
from .losses import MarginHead, margin_classification_loss, safe_normalize
from .networks import EmbeddingNet, SynthesisModel
from .stage1 import check_finite, label_index, load_cfsm, remap_labels, set_requires_grad

log = logging.getLogger(__name__)


@dataclass
class FRModel:
    net: EmbeddingNet
    head: MarginHead
    identities: list[int] = field(default_factory=list)

    def parameters(self):
        return list(self.net.parameters()) + list(self.head.parameters())


def build_fr(num_classes: int, cfg: Stage2Config, identities=()) -> FRModel:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = EmbeddingNet(cfg.embedding_dim)
    head = MarginHead(num_classes, cfg.embedding_dim, s=cfg.arcface_s, m=cfg.arcface_m, generator=gen)
    return FRModel(net, head, list(identities))


@torch.no_grad()
def embed(net: torch.nn.Module, images: torch.Tensor | Batch, chunk: int = 256) -> torch.Tensor:
    """L2-normalized embeddings, B x e."""
    if isinstance(images, Batch):
        images = images.images
    was_training = net.training
    net.eval()
    outs = [safe_normalize(net(images[i:i + chunk])) for i in range(0, images.shape[0], chunk)]
    net.train(was_training)
    return torch.cat(outs)


def save_fr(path, fr: FRModel, cfg: Stage2Config, step: int, gen: torch.Generator):
    tensors = {"fr." + k: v for k, v in fr.net.state_dict().items()}
    tensors["head.weight"] = fr.head.weight.detach()
    conf = dataclasses.asdict(cfg)
    meta = {"kind": "fr", "config": conf, "config_hash": ckpt_io.config_hash(conf), "step": step,
            "identities": fr.identities, "rng_state": ckpt_io.encode_rng_state(gen.get_state())}
    return ckpt_io.save_checkpoint(path, tensors, meta)


def load_fr(path) -> tuple[FRModel, dict]:
    ck = ckpt_io.load_checkpoint(path)
    if ck.metadata.get("kind") != "fr":
        raise ckpt_io.CheckpointError(f"{path}: not a recognition-model checkpoint")
    conf = dict(ck.metadata["config"])
    conf["adam_betas"] = tuple(conf["adam_betas"])
    cfg = Stage2Config(**conf)
    w = ck.tensors["head.weight"]
    net = EmbeddingNet(cfg.embedding_dim)
    net.load_state_dict({k[3:]: v for k, v in ck.tensors.items() if k.startswith("fr.")})
    head = MarginHead(w.shape[0], w.shape[1], s=cfg.arcface_s, m=cfg.arcface_m)
    with torch.no_grad():
        head.weight.copy_(w)
    net.eval()
    return FRModel(net, head, ck.metadata.get("identities", [])), ck.metadata


def _load_synthesis(cfg: Stage2Config) -> SynthesisModel | None:
    if cfg.mode == "baseline":
        return None
    if not cfg.synthesis_checkpoint:
        raise ConfigError(f"mode {cfg.mode!r} requires stage2.synthesis_checkpoint")
    if not Path(cfg.synthesis_checkpoint).exists():
        raise ConfigError(f"synthesis checkpoint not found: {cfg.synthesis_checkpoint}")
    model, _ = load_cfsm(cfg.synthesis_checkpoint)
    synth = model.synth
    synth.eval()
    set_requires_grad(synth, False)
    return synth


@dataclass
class Stage2Result:
    checkpoint: Path
    metrics: Path
    records: list[PerturbationRecord] = field(default_factory=list)
    synthesis_hash_before: str | None = None
    synthesis_hash_after: str | None = None


def train_fr(cfg: Stage2Config, labeled: Manifest, out_dir, synthesis: SynthesisModel | None = None) -> Stage2Result:
    if cfg.mode not in ("baseline", "random_style", "guided"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    train = labeled.subset("train")
    mapping = label_index(train)
    if len(mapping) < 2:
        raise ValueError("labeled manifest needs at least two identities")
    if cfg.mode != "baseline" and synthesis is None:
        synthesis = _load_synthesis(cfg)
    if synthesis is not None:
        set_requires_grad(synthesis, False)
        synthesis.eval()
    hash_before = ckpt_io.module_hash(synthesis) if synthesis is not None else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = ImageCache(train)
    targets = remap_labels(cache.labels, mapping)
    fr = build_fr(len(mapping), cfg, identities=sorted(mapping))
    opt = torch.optim.Adam(fr.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    records: list[PerturbationRecord] = []

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as mlog:
        header = {"mode": cfg.mode, "epsilon": cfg.epsilon if cfg.mode == "guided" else None,
                  "synth_ratio": cfg.synth_ratio if cfg.mode != "baseline" else None, "seed": cfg.seed}
        mlog.write(json.dumps(header) + "\n")
        for step in range(1, cfg.steps + 1):
            idx = torch.randint(len(cache), (cfg.batch_size,), generator=gen)
            x, y = cache.images[idx], targets[idx]
            n_syn = 0
            if cfg.mode == "baseline":
                images = x
            else:
                o = torch.randn(cfg.batch_size, synthesis.q, generator=gen)
                with torch.no_grad():
                    content = synthesis.encode(x)
                if cfg.mode == "guided":
                    delta = fgsm_style_perturbation(fr.net, fr.head, synthesis, x, y, o, cfg.epsilon,
                                                    content=content)
                    o_use = o + delta
                    if cfg.record_perturbations:
                        records += [PerturbationRecord.from_pair(a, b)
                                    for a, b in zip(o.numpy(), o_use.numpy())]
                else:
                    o_use = o
                with torch.no_grad():
                    x_syn = synthesis.synthesize(x, o_use, content=content)
                images, y, mask = compose_batch(x, x_syn, y, cfg.synth_ratio, generator=gen)
                n_syn = int(mask.sum())
            loss, _ = margin_classification_loss(fr.net(images), fr.head, y)
            check_finite(step, loss_cla=loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            mlog.write(json.dumps({"step": step, "loss_cla": loss.item(), "n_synthetic": n_syn}) + "\n")
            if step % 100 == 0:
                log.info("stage2[%s] step %d loss %.4f", cfg.mode, step, loss.item())
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_fr(out / f"fr_step{step:06d}.ckpt", fr, cfg, step, gen)

    hash_after = ckpt_io.module_hash(synthesis) if synthesis is not None else None
    if hash_before != hash_after:
        raise RuntimeError("synthesis parameters changed during recognition training")
    final = save_fr(out / "fr.ckpt", fr, cfg, cfg.steps, gen)
    if records:
        save_records(out / "perturbations.npz", records)
    return Stage2Result(final, metrics_path, records, hash_before, hash_after)
