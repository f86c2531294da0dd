import csv

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from n4mc import fixtures
from n4mc.errors import ValidationError
from n4mc.mesh import normalize_sequence
from n4mc.models import AutoencoderConfig, grids_to_tensor
from n4mc.tracking import VolumeCenters
from n4mc.training import (LossWeights, TrainingPlan, build_groups, encode_frames, intermediate_losses, key_frames,
                           reconstruction_loss, ssim3d, train_autoencoder, train_interpolator)
from n4mc.voxel import compute_tsdf_def
from oracles import ssim3d_window


def test_ssim_identical_is_one():
    a = torch.randn(1, 2, 9, 9, 9, dtype=torch.float64)
    assert float(ssim3d(a, a)) == 1.0


def test_ssim_anticorrelated_negative():
    # a checkerboard keeps every window mean near zero, so only the structure term flips sign
    i = torch.arange(9)
    a = ((i[:, None, None] + i[None, :, None] + i[None, None, :]) % 2 * 2 - 1).double()[None, None]
    assert float(ssim3d(a, -a)) < 0


def test_ssim_matches_window_oracle(rng):
    a = rng.uniform(-1, 1, (1, 2, 9, 8, 10))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    got = float(ssim3d(torch.from_numpy(a), torch.from_numpy(b)))
    assert abs(got - ssim3d_window(a, b)) <= 1e-5


def test_ssim_shape_mismatch():
    with pytest.raises(ValidationError):
        ssim3d(torch.zeros(1, 1, 8, 8, 8), torch.zeros(1, 1, 8, 8, 9))


def test_loss_zero_on_identity():
    t = torch.rand(1, 4, 8, 8, 8) * 2 - 1
    total, parts = reconstruction_loss(t, t.clone())
    assert float(total) == 0.0 and parts["l1"] == 0.0


def test_loss_constant_offset():
    t = torch.rand(1, 4, 8, 8, 8, dtype=torch.float64)
    w = LossWeights(l1=1.5, mask=0.0, ssim=0.0)
    total, _ = reconstruction_loss(t + 0.125, t, w)
    assert float(total) == pytest.approx(1.5 * 0.125, abs=1e-12)


def test_loss_term_by_term(rng):
    t = rng.uniform(-1, 1, (2, 4, 8, 8, 8))
    p = t + rng.normal(0, 0.2, t.shape)
    w = LossWeights()
    diff = np.abs(p - t)
    mask = np.broadcast_to(np.abs(t[:, :1]) < w.alpha, diff.shape)
    expected = w.l1 * diff.mean() + w.mask * diff[mask].mean() + w.ssim * (1 - ssim3d_window(p, t))
    total, _ = reconstruction_loss(torch.from_numpy(p), torch.from_numpy(t), w)
    assert abs(float(total) - expected) <= 1e-6


def test_mask_uses_target_only(rng):
    t = torch.from_numpy(rng.uniform(-1, 1, (1, 4, 8, 8, 8)))
    p = t + 0.1
    _, base = reconstruction_loss(p, t)
    outside = (t[:, :1].abs() >= 0.5).expand_as(t)
    p2 = p.clone()
    p2[:, 0][outside[:, 0]] = 0.0  # move the prediction's TSDF into the band outside the target band
    _, moved = reconstruction_loss(p2, t)
    assert moved["mask"] == base["mask"]


def test_empty_mask_contributes_zero():
    t = torch.ones(1, 4, 8, 8, 8)
    _, parts = reconstruction_loss(t + 0.5, t)
    assert parts["mask"] == 0.0


@given(st.integers(0, 10_000))
def test_loss_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(2, 1, 4, 7, 7, 7, generator=g, dtype=torch.float64).unbind(0)
    total, _ = reconstruction_loss(a, b)
    assert float(total) >= 0


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(l1=0, mask=0, ssim=0)
    with pytest.raises(ValidationError):
        LossWeights(l1=-1)


# groups --------------------------------------------------------------------


def test_groups_examples():
    g = build_groups(11, 5)
    assert key_frames(g) == [0, 5, 10]
    assert [(x.start, x.intermediates, x.end) for x in g] == [(0, (1, 2, 3, 4), 5), (5, (6, 7, 8, 9), 10)]
    g = build_groups(7, 5)
    assert key_frames(g) == [0, 5, 6] and g[-1].intermediates == ()
    assert build_groups(11, 5)[0].alphas == (0.2, 0.4, 0.6, 0.8)


def test_groups_reject_bad_sizes():
    with pytest.raises(ValidationError):
        build_groups(1, 4)
    with pytest.raises(ValidationError):
        build_groups(10, 1)


@given(st.integers(2, 200), st.integers(2, 20))
def test_groups_cover_every_frame_once(n_frames, n):
    groups = build_groups(n_frames, n)
    keys = key_frames(groups)
    inter = [t for g in groups for t in g.intermediates]
    assert sorted(keys + inter) == list(range(n_frames))
    assert keys[-1] == n_frames - 1
    for a, b in zip(groups, groups[1:]):
        assert len({a.start, a.end} & {b.start, b.end}) == 1
    for g in groups:
        assert all(0 < al < 1 for al in g.alphas)


# training runs --------------------------------------------------------------


@pytest.fixture(scope="module")
def seq():
    meshes, _ = normalize_sequence(fixtures.oscillating_sphere(5, subdivisions=2))
    grids = [compute_tsdf_def(m, 32) for m in meshes]
    rng = np.random.default_rng(0)
    centers = VolumeCenters(rng.normal(0, 0.2, (5, 16, 3)))
    return grids, centers


PLAN = TrainingPlan(stage_a_steps=6, stage_b_steps=4, finetune_steps=2, batch_size=2, group_size=4)


def test_autoencoder_history_finite_and_deterministic(seq, tmp_path):
    grids, _ = seq
    a = train_autoencoder(grids, PLAN)
    b = train_autoencoder(grids, PLAN)
    assert a.history.totals == b.history.totals
    assert len(a.history.totals) == 6 and np.all(np.isfinite(a.history.totals))
    a.history.write_csv(tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == ["step", "total", "l1", "mask", "ssim", "lr"] and len(rows) == 6


def test_autoencoder_rejects_mixed_resolution(seq):
    grids, _ = seq
    other = compute_tsdf_def(fixtures.icosphere(2, 0.5), 64)
    with pytest.raises(ValidationError):
        train_autoencoder([grids[0], other], PLAN)


@pytest.fixture(scope="module")
def trained(seq):
    grids, _ = seq
    return train_autoencoder(grids, PLAN)


def test_stage_b_freezes_decoder_and_is_reproducible(seq, trained):
    grids, centers = seq
    feats = encode_frames(trained.encoder, grids)
    before = [p.detach().clone() for p in trained.decoder.parameters()]
    r1 = train_interpolator(feats, grids, centers, trained.decoder, PLAN)
    r2 = train_interpolator(feats, grids, centers, trained.decoder, PLAN)
    after = list(trained.decoder.parameters())
    assert all(torch.equal(x, y) for x, y in zip(before, after))
    assert r1.history.totals == r2.history.totals
    assert len(r1.history.totals) == PLAN.stage_b_steps + PLAN.finetune_steps
    losses = intermediate_losses(feats, grids, centers, trained.decoder, r1.mapper, r1.interpolator, 4)
    assert sorted(losses) == [1, 2, 3]


def test_groups_without_intermediates_add_no_steps(trained):
    grids = [compute_tsdf_def(m, 32) for m in normalize_sequence(fixtures.oscillating_sphere(2, subdivisions=2))[0]]
    feats = encode_frames(trained.encoder, grids)
    res = train_interpolator(feats, grids, VolumeCenters(np.zeros((2, 4, 3))), trained.decoder, PLAN)
    assert res.history.rows == []


def test_stage_b_checks_frame_counts(seq, trained):
    grids, centers = seq
    feats = encode_frames(trained.encoder, grids)
    with pytest.raises(ValidationError):
        train_interpolator(feats[:4], grids, centers, trained.decoder, PLAN)


def test_plan_validation():
    with pytest.raises(ValidationError):
        TrainingPlan(group_size=1)
    with pytest.raises(ValidationError):
        TrainingPlan(stage_a_steps=0)


def test_features_shape(seq, trained):
    grids, _ = seq
    f = encode_frames(trained.encoder, grids)
    cfg = AutoencoderConfig.for_resolution(32)
    assert tuple(f.shape) == (5, cfg.feature_dim) + (cfg.feature_res,) * 3
    assert grids_to_tensor(grids).shape == (5, 4, 32, 32, 32)
