import json

import numpy as np
import pytest
import torch
from PIL import Image

from cfsm.data import (DegradationSpec, IdentityRecord, Manifest, add_noise, apply_degradation,
                       build_target_set, downsample_nearest, generate_toy_dataset, load_batch, motion_kernel,
                       resample, select_subset)

NO_OPS = {"blur": 0.0, "downsample": 0.0, "motion": 0.0, "noise": 0.0}


def test_generate_counts(tmp_path):
    m = generate_toy_dataset(10, 4, 32, seed=7, out_dir=tmp_path)
    assert len(m.records) == 40
    assert m.num_identities == 10
    assert len({r.identity_id for r in m.records}) == 10
    splits = [r.split for r in m.records]
    assert splits.count("test_gallery") == 10 and splits.count("test_probe") == 10


def test_generate_is_deterministic(tmp_path):
    a = generate_toy_dataset(3, 3, 32, seed=7, out_dir=tmp_path / "a")
    b = generate_toy_dataset(3, 3, 32, seed=7, out_dir=tmp_path / "b")
    assert [r.image_path for r in a.records] == [r.image_path for r in b.records]
    for ra, rb in zip(a.records, b.records):
        assert a.resolve(ra).read_bytes() == b.resolve(rb).read_bytes()


def test_seeds_change_images(tmp_path):
    a = generate_toy_dataset(2, 2, 32, seed=1, out_dir=tmp_path / "a")
    b = generate_toy_dataset(2, 2, 32, seed=2, out_dir=tmp_path / "b")
    xa = load_batch(a, range(len(a))).images
    xb = load_batch(b, range(len(b))).images
    assert (xa - xb).abs().mean() > 0


@pytest.mark.parametrize("kwargs", [dict(num_identities=1), dict(samples_per_id=1), dict(image_size=48)])
def test_generate_rejects_bad_sizes(tmp_path, kwargs):
    args = dict(num_identities=2, samples_per_id=2, image_size=32, seed=0, out_dir=tmp_path)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_toy_dataset(**args)


def test_manifest_file_format(tmp_path):
    m = generate_toy_dataset(2, 2, 32, seed=0, out_dir=tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"num_identities": 2, "image_size": 32, "seed": 0}
    rec = json.loads(lines[1])
    assert set(rec) == {"path", "identity", "split"}
    img = Image.open(tmp_path / rec["path"])
    assert img.mode == "RGB" and img.size == (32, 32)
    again = Manifest.load(tmp_path)
    assert again.records == m.records


def test_identity_record_validation():
    with pytest.raises(ValueError):
        IdentityRecord("x.png", 0, "validation")
    with pytest.raises(ValueError):
        IdentityRecord("x.png", -2)


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec(blur_sigma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        DegradationSpec(apply_probabilities={"noise": 1.5})
    with pytest.raises(ValueError):
        DegradationSpec(apply_probabilities={"jpeg": 0.5})


def test_all_probabilities_zero_is_identity():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    out = apply_degradation(img, DegradationSpec(apply_probabilities=NO_OPS), np.random.default_rng(1))
    np.testing.assert_array_equal(out, img)


def test_noise_std():
    spec = DegradationSpec(noise_std_range=(0.1, 0.1), apply_probabilities={**NO_OPS, "noise": 1.0})
    img = np.full((64, 64, 3), 0.5)
    out = apply_degradation(img, spec, np.random.default_rng(0))
    assert abs((out - img).std() - 0.1) < 0.01


def test_downsample_block_count():
    h = 32
    board = (np.indices((h, h)).sum(axis=0) % 2).astype(float)[..., None].repeat(3, axis=2)
    small = downsample_nearest(board, 4)
    assert small.shape[:2] == (h // 4, h // 4)
    # each low-res pixel stands for one 4x4 block; count distinct blocks
    distinct = {tuple(px) for px in small.reshape(-1, 3)}
    assert len(distinct) <= (h // 4) ** 2
    up = resample(board, 4)
    assert up.shape == board.shape
    assert np.all((up >= 0) & (up <= 1))


def test_motion_kernel_sums_to_one():
    for length in (3, 5, 7):
        for angle in (0.0, 33.0, 90.0, 145.0):
            k = motion_kernel(length, angle)
            assert k.shape == (length, length)
            assert abs(k.sum() - 1.0) < 1e-12


def test_degradation_range_and_determinism():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    spec = DegradationSpec(apply_probabilities={"blur": 1.0, "downsample": 1.0, "motion": 1.0, "noise": 1.0})
    a = apply_degradation(img, spec, np.random.default_rng(4))
    b = apply_degradation(img, spec, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert np.abs(a - img).mean() > 0


def test_add_noise_clips():
    out = add_noise(np.ones((8, 8, 3)), 0.5, np.random.default_rng(0))
    assert out.max() <= 1.0 and out.min() >= 0.0


def test_build_target_set(tmp_path, toy_source):
    src = generate_toy_dataset(10, 4, 32, seed=0, out_dir=tmp_path / "src")
    t1 = build_target_set(src, DegradationSpec(), 0.5, seed=1, out_dir=tmp_path / "t1")
    assert len(t1.records) == 20
    assert all(r.identity_id == -1 for r in t1.records)
    assert t1.num_identities == 0


def test_target_subsets_differ_across_seeds():
    a, b = select_subset(40, 0.5, seed=1), select_subset(40, 0.5, seed=2)
    assert len(a) == len(b) == 20
    assert set(a.tolist()) - set(b.tolist())
    np.testing.assert_array_equal(a, select_subset(40, 0.5, seed=1))


def test_build_target_set_excludes_identities(tmp_path):
    src = generate_toy_dataset(4, 2, 32, seed=0, out_dir=tmp_path / "src")
    t = build_target_set(src, DegradationSpec(apply_probabilities=NO_OPS), 1.0, seed=0,
                         out_dir=tmp_path / "t", exclude_identities={0, 1})
    assert len(t.records) == 4


def test_build_target_set_zero_images(tmp_path, toy_source):
    with pytest.raises(ValueError):
        build_target_set(toy_source, DegradationSpec(), 0.01, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError):
        build_target_set(toy_source, DegradationSpec(), 0.0, seed=0, out_dir=tmp_path)


def test_load_batch_affine_map(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    arr = np.zeros((32, 32, 3), dtype=np.uint8)
    arr[:, 16:] = 255
    Image.fromarray(arr).save(d / "a.png")
    m = Manifest([IdentityRecord("imgs/a.png", 0)], 1, 32, 0, tmp_path)
    b = load_batch(m, [0])
    assert b.images[0, :, :, :16].unique().tolist() == [-1.0]
    assert b.images[0, :, :, 16:].unique().tolist() == [1.0]


def test_load_batch_shape_and_repeatability(tmp_path):
    m = generate_toy_dataset(8, 4, 32, seed=0, out_dir=tmp_path)
    idx = list(range(32))
    b1, b2 = load_batch(m, idx), load_batch(m, idx)
    assert b1.images.shape == (32, 3, 32, 32)
    assert torch.equal(b1.images, b2.images)
    assert b1.images.min() >= -1 and b1.images.max() <= 1
    assert b1.labels.tolist() == [r.identity_id for r in m.records]


def test_load_batch_missing_file(tmp_path):
    m = Manifest([IdentityRecord("nope.png", 0)], 1, 32, 0, tmp_path)
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_batch(m, [0])
    with pytest.raises(IndexError):
        load_batch(m, [3])
