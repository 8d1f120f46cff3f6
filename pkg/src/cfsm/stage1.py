"""Stage 1: train the synthesis model (E, G, MLP, U, mu) against D, with a
frozen identity extractor f pre-trained on the labeled source data."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .config import Stage1Config
from .data import ImageCache, Manifest
from .losses import (LossWeights, MarginHead, discriminator_loss, generator_adv_loss, identity_loss,
                     margin_classification_loss, total_generator_loss)
from .networks import CFSM, EmbeddingNet
from .subspace import MagnitudeSchedule, orthogonality_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def check_finite(step: int, **terms: torch.Tensor):
    for name, value in terms.items():
        if not math.isfinite(float(value.detach())):
            raise TrainingDivergedError(f"non-finite {name} at step {step}")


def label_index(manifest: Manifest) -> dict[int, int]:
    """Contiguous class index for every identity id in a labeled manifest."""
    ids = sorted({r.identity_id for r in manifest.records if r.identity_id >= 0})
    return {ident: i for i, ident in enumerate(ids)}


def remap_labels(labels: torch.Tensor, mapping: dict[int, int]) -> torch.Tensor:
    return torch.tensor([mapping[int(x)] for x in labels], dtype=torch.long)


def set_requires_grad(module: torch.nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def schedule_of(cfg: Stage1Config) -> MagnitudeSchedule:
    return MagnitudeSchedule(cfg.l_a, cfg.u_a, cfg.l_m, cfg.u_m)


def weights_of(cfg) -> LossWeights:
    return LossWeights(cfg.lambda_adv, cfg.lambda_ort, cfg.lambda_id)


def pretrain_idnet(source: Manifest, embedding_dim: int = 128, steps: int = 2000, batch_size: int = 32,
                   lr: float = 1e-3, s: float = 16.0, m: float = 0.3, seed: int = 0) -> EmbeddingNet:
    """Train the identity extractor f on the source train split, then freeze it."""
    train = source.subset("train")
    mapping = label_index(train)
    cache = ImageCache(train)
    targets = remap_labels(cache.labels, mapping)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = EmbeddingNet(embedding_dim)
    head = MarginHead(len(mapping), embedding_dim, s=s, m=m, generator=gen)
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=lr)
    for step in range(steps):
        idx = torch.randint(len(cache), (batch_size,), generator=gen)
        loss, _ = margin_classification_loss(net(cache.images[idx]), head, targets[idx])
        check_finite(step, idnet_loss=loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            log.info("idnet step %d loss %.4f", step, loss.item())
    net.eval()
    set_requires_grad(net, False)
    return net


def build_cfsm(cfg: Stage1Config) -> CFSM:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    return CFSM(d=cfg.d, q=cfg.q, width=cfg.gen_width, disc_width=cfg.disc_width,
                embedding_dim=cfg.embedding_dim, generator=gen)


def cfsm_metadata(cfg: Stage1Config, step: int, gen: torch.Generator) -> dict:
    conf = dataclasses.asdict(cfg)
    return {
        "kind": "cfsm",
        "config": conf,
        "config_hash": ckpt_io.config_hash(conf),
        "step": step,
        "rng_state": ckpt_io.encode_rng_state(gen.get_state()),
        "optimizer": {"name": "adam", "lr": cfg.lr, "betas": list(cfg.adam_betas), "batch_size": cfg.batch_size},
    }


def save_cfsm(path, model: CFSM, cfg: Stage1Config, step: int, gen: torch.Generator):
    return ckpt_io.save_checkpoint(path, model.flat_state(), cfsm_metadata(cfg, step, gen))


def load_cfsm(path) -> tuple[CFSM, dict]:
    ck = ckpt_io.load_checkpoint(path)
    if ck.metadata.get("kind") != "cfsm":
        raise ckpt_io.CheckpointError(f"{path}: not a synthesis-model checkpoint")
    conf = dict(ck.metadata["config"])
    conf["adam_betas"] = tuple(conf["adam_betas"])
    cfg = Stage1Config(**conf)
    model = CFSM(d=cfg.d, q=cfg.q, width=cfg.gen_width, disc_width=cfg.disc_width,
                 embedding_dim=cfg.embedding_dim)
    model.load_flat_state(ck.tensors)
    model.eval()
    set_requires_grad(model.idnet, False)
    return model, ck.metadata


def load_idnet(path, embedding_dim: int) -> EmbeddingNet:
    ck = ckpt_io.load_checkpoint(path)
    net = EmbeddingNet(embedding_dim)
    prefix = "idnet."
    net.load_state_dict({k[len(prefix):]: v for k, v in ck.tensors.items() if k.startswith(prefix)})
    net.eval()
    set_requires_grad(net, False)
    return net


def save_idnet(path, net: EmbeddingNet, meta: dict | None = None):
    tensors = {"idnet." + k: v for k, v in net.state_dict().items()}
    return ckpt_io.save_checkpoint(path, tensors, {"kind": "idnet", **(meta or {})})


def train_synthesis(cfg: Stage1Config, source: Manifest, target: Manifest, out_dir,
                    idnet: EmbeddingNet | None = None) -> tuple[Path, Path]:
    """Run stage 1 and return (final checkpoint path, metrics log path).

    One discriminator update per generator update.  The discriminator sees
    a detached X_hat; during the generator update its parameters are frozen.
    """
    if not source.labeled:
        raise ValueError("source manifest must be labeled")
    if any(r.identity_id != -1 for r in target.records):
        raise ValueError("target manifest must be unlabeled")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if idnet is None and cfg.idnet_checkpoint:
        idnet = load_idnet(cfg.idnet_checkpoint, cfg.embedding_dim)
    if idnet is None:
        idnet = pretrain_idnet(source, cfg.embedding_dim, cfg.idnet_steps, lr=cfg.idnet_lr,
                               s=cfg.arcface_s, m=cfg.arcface_m, seed=cfg.seed)

    model = build_cfsm(cfg)
    model.idnet.load_state_dict(idnet.state_dict())
    model.idnet.eval()
    set_requires_grad(model.idnet, False)
    synth, disc, f = model.synth, model.disc, model.idnet

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    src = ImageCache(source.subset("train"))
    tgt = ImageCache(target)
    opt_g = torch.optim.Adam(synth.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    schedule, weights = schedule_of(cfg), weights_of(cfg)

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as mlog:
        for step in range(1, cfg.steps + 1):
            x = src.sample(cfg.batch_size, gen).images
            y = tgt.sample(cfg.batch_size, gen).images
            o = torch.randn(cfg.batch_size, cfg.q, generator=gen)
            x_hat = synth.synthesize(x, o)

            set_requires_grad(disc, True)
            loss_d = discriminator_loss(disc(y), disc(x_hat.detach()))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            set_requires_grad(disc, False)
            loss_adv = generator_adv_loss(disc(x_hat))
            loss_ort = orthogonality_loss(synth.style.U)
            loss_id = identity_loss(f, x, x_hat, o.norm(dim=1), schedule)
            loss_g = total_generator_loss(loss_adv, loss_ort, loss_id, weights)
            check_finite(step, loss_d=loss_d, loss_adv=loss_adv, loss_ort=loss_ort, loss_id=loss_id)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            mlog.write(json.dumps({"step": step, "loss_d": loss_d.item(), "loss_adv": loss_adv.item(),
                                   "loss_ort": loss_ort.item(), "loss_id": loss_id.item(),
                                   "loss_g": loss_g.item()}) + "\n")
            if step % 100 == 0:
                log.info("stage1 step %d  D %.4f adv %.4f ort %.4f id %.4f", step, loss_d.item(),
                         loss_adv.item(), loss_ort.item(), loss_id.item())
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_cfsm(out / f"cfsm_step{step:06d}.ckpt", model, cfg, step, gen)
    set_requires_grad(disc, True)
    final = save_cfsm(out / "cfsm.ckpt", model, cfg, cfg.steps, gen)
    return final, metrics_path


@torch.no_grad()
def dissimilarity_by_magnitude(model: CFSM, images: torch.Tensor, magnitudes, n_directions: int = 8,
                               seed: int = 0) -> list[float]:
    """Mean 1 - cos(f(x), f(x_hat)) for style codes of each fixed magnitude.

    Every image is paired with ``n_directions`` random unit directions scaled
    to the requested magnitude.
    """
    synth, f = model.synth, model.idnet
    synth.eval()
    f.eval()
    gen = torch.Generator().manual_seed(seed)
    ref = f(images)
    content = synth.encode(images)
    out = []
    for a in magnitudes:
        vals = []
        for _ in range(n_directions):
            o = torch.randn(images.shape[0], synth.q, generator=gen)
            o = a * o / o.norm(dim=1, keepdim=True)
            emb = f(synth.synthesize(images, o, content=content))
            vals.append(1.0 - torch.nn.functional.cosine_similarity(ref, emb, dim=1))
        out.append(float(torch.cat(vals).mean()))
    return out
