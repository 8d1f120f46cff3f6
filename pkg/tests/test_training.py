"""Smoke and invariant tests for both training stages on tiny models."""
import json

import numpy as np
import pytest
import torch

from cfsm import checkpoint as ck
from cfsm.config import ConfigError, Stage1Config, Stage2Config
from cfsm.evaluation import evaluate
from cfsm.guidance import fgsm_style_perturbation
from cfsm.losses import MarginHead
from cfsm.networks import EmbeddingNet
from cfsm.stage1 import build_cfsm, load_cfsm, pretrain_idnet, save_cfsm, train_synthesis
from cfsm.stage2 import embed, load_fr, train_fr
from cfsm.visualize import MAGNITUDE_FACTORS, render_traversal, save_image

TINY = dict(d=16, q=4, gen_width=4, disc_width=4, embedding_dim=8, batch_size=4, idnet_steps=3)


@pytest.fixture(scope="module")
def idnet(toy_source):
    return pretrain_idnet(toy_source, embedding_dim=8, steps=3, batch_size=4)


def _metrics(path):
    return [json.loads(line) for line in open(path)]


def test_stage1_deterministic_and_logged(tmp_path, toy_source, toy_target, idnet):
    cfg = Stage1Config(steps=10, seed=2, **TINY)
    before = ck.module_hash(idnet)
    c1, m1 = train_synthesis(cfg, toy_source, toy_target, tmp_path / "a", idnet=idnet)
    c2, m2 = train_synthesis(cfg, toy_source, toy_target, tmp_path / "b", idnet=idnet)
    assert ck.module_hash(idnet) == before
    rows = _metrics(m1)
    assert len(rows) == 10
    assert set(rows[0]) == {"step", "loss_d", "loss_adv", "loss_ort", "loss_id", "loss_g"}
    assert all(np.isfinite(v) for r in rows for v in r.values())
    assert rows == _metrics(m2)
    assert ck.file_sha256(c1) == ck.file_sha256(c2)
    _, meta = load_cfsm(c1)
    assert meta["step"] == 10 and meta["config"]["seed"] == 2


def test_stage1_generator_update_leaves_discriminator(tmp_path, toy_source, toy_target, idnet, monkeypatch):
    """Record D's hash right before and after every optimizer step on G."""
    seen = []
    orig_step = torch.optim.Adam.step
    state = {}

    def spy(self, *a, **k):
        model = state.get("model")
        d_hash = ck.module_hash(model.disc) if model is not None else None
        out = orig_step(self, *a, **k)
        if model is not None and self is state.get("opt_g"):
            seen.append(d_hash == ck.module_hash(model.disc))
        return out

    import cfsm.stage1 as s1
    orig_build = s1.build_cfsm

    def build(cfg):
        m = orig_build(cfg)
        state["model"] = m
        return m

    orig_init = torch.optim.Adam.__init__

    def init(self, params, *a, **k):
        params = list(params)
        orig_init(self, params, *a, **k)
        model = state.get("model")
        if model is not None and "opt_g" not in state and params[0] is next(model.synth.parameters()):
            state["opt_g"] = self

    monkeypatch.setattr(s1, "build_cfsm", build)
    monkeypatch.setattr(torch.optim.Adam, "step", spy)
    monkeypatch.setattr(torch.optim.Adam, "__init__", init)
    train_synthesis(Stage1Config(steps=3, **TINY), toy_source, toy_target, tmp_path, idnet=idnet)
    assert seen == [True, True, True]


def test_stage1_rejects_labeled_target(tmp_path, toy_source, idnet):
    with pytest.raises(ValueError):
        train_synthesis(Stage1Config(steps=1, **TINY), toy_source, toy_source, tmp_path, idnet=idnet)


@pytest.fixture(scope="module")
def synth_ckpt(tmp_path_factory):
    cfg = Stage1Config(**TINY)
    return save_cfsm(tmp_path_factory.mktemp("s1") / "cfsm.ckpt", build_cfsm(cfg), cfg, 0,
                     torch.Generator().manual_seed(0))


def _s2(mode, synth_ckpt, **kw):
    base = dict(mode=mode, synthesis_checkpoint=str(synth_ckpt), steps=4, batch_size=8, embedding_dim=8)
    base.update(kw)
    return Stage2Config(**base)


def test_stage2_modes_run_and_keep_synthesis_frozen(tmp_path, toy_source, synth_ckpt):
    for mode in ("baseline", "random_style", "guided"):
        res = train_fr(_s2(mode, synth_ckpt, record_perturbations=True), toy_source, tmp_path / mode)
        rows = _metrics(res.metrics)
        assert rows[0]["mode"] == mode and len(rows) == 5
        assert all(r["n_synthetic"] == (0 if mode == "baseline" else 4) for r in rows[1:])
        assert res.synthesis_hash_before == res.synthesis_hash_after
        assert bool(res.records) == (mode == "guided")
    recs = train_fr(_s2("guided", synth_ckpt, record_perturbations=True), toy_source, tmp_path / "g2").records
    assert len(recs) == 4 * 8
    for r in recs:
        step = np.abs(r.o_star - r.o)
        assert np.all(np.isclose(step, 0.314, atol=1e-6) | (step == 0))


def test_stage2_baseline_ignores_epsilon(tmp_path, toy_source, synth_ckpt):
    a = train_fr(_s2("baseline", synth_ckpt, epsilon=0.314), toy_source, tmp_path / "a")
    b = train_fr(_s2("baseline", synth_ckpt, epsilon=5.0), toy_source, tmp_path / "b")
    la = [r.get("loss_cla") for r in _metrics(a.metrics)[1:]]
    assert la == [r.get("loss_cla") for r in _metrics(b.metrics)[1:]]


def test_stage2_deterministic(tmp_path, toy_source, synth_ckpt):
    a = train_fr(_s2("guided", synth_ckpt), toy_source, tmp_path / "a")
    b = train_fr(_s2("guided", synth_ckpt), toy_source, tmp_path / "b")
    assert ck.load_checkpoint(a.checkpoint).tensors.keys() == ck.load_checkpoint(b.checkpoint).tensors.keys()
    ta, tb = ck.load_checkpoint(a.checkpoint).tensors, ck.load_checkpoint(b.checkpoint).tensors
    assert all(torch.equal(ta[k], tb[k]) for k in ta)


def test_stage2_missing_synthesis(tmp_path, toy_source):
    with pytest.raises(ConfigError):
        train_fr(Stage2Config(mode="random_style", steps=1), toy_source, tmp_path)


def test_embed_unit_norm_and_eval(tmp_path, toy_source, synth_ckpt):
    res = train_fr(_s2("baseline", synth_ckpt), toy_source, tmp_path)
    fr, meta = load_fr(res.checkpoint)
    e = embed(fr.net, torch.rand(5, 3, 32, 32) * 2 - 1)
    assert torch.allclose(e.norm(dim=1), torch.ones(5), atol=1e-5)
    rep = evaluate(res.checkpoint, toy_source.subset("test_gallery"), toy_source.subset("test_probe"))
    assert rep.counts["gallery"] == 6 and 0.0 <= rep.rank_k[1] <= 1.0


def test_basis_traversal_grid(small_synth):
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    grid = render_traversal(small_synth, img, "basis", bases=(0, 1, 2), sigma_steps=5)
    assert grid.tiles.shape == (3, 5, 32, 32, 3)
    assert grid.column_values == [-3.0, -1.5, 0.0, 1.5, 3.0]
    # the sigma = 0 column is the o = 0 synthesis for every row
    zero = render_traversal(small_synth, img, "magnitude", factors=(0.0,)).tiles[0, 0]
    for r in range(3):
        np.testing.assert_allclose(grid.tiles[r, 2], zero, atol=1e-6)
    canvas = grid.compose()
    assert canvas.shape[1] > 6 * 32
    with pytest.raises(IndexError):
        render_traversal(small_synth, img, "basis", bases=(9,))


def test_magnitude_sweep(small_synth, tmp_path):
    img = np.full((32, 32, 3), 0.5)
    grid = render_traversal(small_synth, img, "magnitude", seed=1)
    assert grid.tiles.shape[:2] == (1, len(MAGNITUDE_FACTORS))
    norms = np.linalg.norm(grid.coefficients[0], axis=1)
    np.testing.assert_allclose(norms, MAGNITUDE_FACTORS)
    save_image(grid.compose(), tmp_path / "m.png")
    assert (tmp_path / "m.png").stat().st_size > 0


def test_stage1_orthogonality_trend(tmp_path, toy_source, toy_target, idnet):
    _, m = train_synthesis(Stage1Config(steps=100, **TINY), toy_source, toy_target, tmp_path, idnet=idnet)
    ort = [r["loss_ort"] for r in _metrics(m)]
    assert np.mean(ort[-10:]) < np.mean(ort[:10])


def test_guidance_is_label_aware(small_synth):
    torch.manual_seed(0)
    net, head = EmbeddingNet(16, width=8), MarginHead(4, 16)
    x = torch.rand(6, 3, 32, 32) * 2 - 1
    labels = torch.tensor([0, 1, 2, 3, 0, 1])
    o = torch.randn(6, 4)
    d1 = fgsm_style_perturbation(net, head, small_synth, x, labels, o, 0.314)
    d2 = fgsm_style_perturbation(net, head, small_synth, x, labels.roll(1), o, 0.314)
    assert not torch.equal(d1, d2)
