import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from n4mc.errors import FingerprintMismatch, ValidationError
from n4mc.models import (AutoencoderConfig, Decoder, Encoder, InterpolatorConfig, Interpolator, LatentMapper,
                         MapperConfig, ModelWeights, PointEncoder, time_embedding)


def _count(m):
    return sum(p.numel() for p in m.parameters())


@pytest.mark.parametrize("k,dims", [(64, (4, 4, 4, 64)), (128, (8, 8, 8, 16)), (256, (8, 8, 8, 32))])
def test_feature_dims_and_shape_closure(k, dims):
    torch.manual_seed(0)
    cfg = AutoencoderConfig.for_resolution(k)
    with torch.no_grad():
        f = Encoder(cfg)(torch.randn(1, 4, k, k, k))
        g = Decoder(cfg)(f)
    assert tuple(f.permute(0, 2, 3, 4, 1).shape[1:]) == dims
    assert tuple(g.shape) == (1, 4, k, k, k)


def test_desk_preset_dims():
    cfg = AutoencoderConfig.for_resolution(32)
    assert (cfg.feature_res, cfg.feature_dim) == (4, 16)
    assert cfg.stem_stride * np.prod(cfg.stage_strides) == 8


@pytest.mark.parametrize("k,stem,stages", [(64, 2, (2, 2, 2)), (128, 2, (2, 2, 2)), (256, 4, (2, 2, 2))])
def test_stride_plan(k, stem, stages):
    cfg = AutoencoderConfig.for_resolution(k)
    assert cfg.stem_stride == stem and cfg.stage_strides == stages


def test_stage_blocks():
    assert AutoencoderConfig.for_resolution(256).stage_blocks == (4, 2, 2, 2)
    assert AutoencoderConfig.for_resolution(64).stage_blocks == (2, 2, 2, 2)


@pytest.mark.parametrize("k,enc,dec", [(32, 416352, 156700), (64, 424336, 367716), (128, 423520, 707076),
                                       (256, 548592, 1357636)])
def test_golden_parameter_counts(k, enc, dec):
    cfg = AutoencoderConfig.for_resolution(k)
    assert (_count(Encoder(cfg)), _count(Decoder(cfg))) == (enc, dec)


@pytest.mark.parametrize("d,width,n", [(16, 16, 34848), (64, 16, 47184), (64, 24, 69016), (64, 32, 98016)])
def test_golden_interpolator_counts(d, width, n):
    assert _count(Interpolator(InterpolatorConfig(4, d, width=width))) == n


def test_mapper_count_from_layer_sizes():
    p = 128
    point = (3 * p + p) + 2 * (p * p + p)
    mlp = (544 * 256 + 256) + (256 * 256 + 256) + (256 * 32 + 32)
    assert _count(LatentMapper()) == point + mlp + 2 * 32 + 1


def test_mapper_input_dim():
    assert MapperConfig().input_dim == 544
    assert LatentMapper().fc1.weight.shape == (256, 544)


def test_encoder_deterministic_and_checks_shape():
    torch.manual_seed(1)
    cfg = AutoencoderConfig.for_resolution(32)
    enc = Encoder(cfg)
    x = torch.randn(1, 4, 32, 32, 32)
    with torch.no_grad():
        assert torch.equal(enc(x), enc(x.clone()))
    with pytest.raises(ValidationError):
        enc(torch.randn(1, 4, 16, 16, 16))


def test_decoder_ranges_and_determinism():
    torch.manual_seed(2)
    cfg = AutoencoderConfig.for_resolution(32)
    dec = Decoder(cfg)
    f = 10 * torch.randn(2, 16, 4, 4, 4)
    with torch.no_grad():
        y = dec(f)
        assert torch.equal(y, dec(f))
    half_voxel = 0.5 * 2.0 / 31
    assert y[:, 0].abs().max() <= 1.0
    assert y[:, 1:].abs().max() <= half_voxel
    with pytest.raises(ValidationError):
        dec(torch.randn(1, 8, 4, 4, 4))


def test_config_rejects_bad_ratio():
    with pytest.raises(ValidationError):
        AutoencoderConfig(k=64, feature_res=3, feature_dim=8, decoder_channels=(8,))
    with pytest.raises(ValidationError):
        AutoencoderConfig.for_resolution(48)
    with pytest.raises(ValidationError):
        InterpolatorConfig(4, 16, width=18)


# point encoder ---------------------------------------------------------------


@pytest.fixture(scope="module")
def point_encoder():
    torch.manual_seed(3)
    return PointEncoder()


def test_point_encoder_permutation_and_duplication(point_encoder):
    pts = torch.randn(50, 3)
    with torch.no_grad():
        base = point_encoder(pts)
        perm = point_encoder(pts[torch.randperm(50)])
        dup = point_encoder(torch.cat([pts, pts]))
    assert torch.equal(base, perm) and torch.equal(base, dup)
    assert base.shape == (128,)


def test_point_encoder_separation(point_encoder):
    g = torch.Generator().manual_seed(0)
    a = torch.randn(100, 3, generator=g) * 0.1 - 0.5
    b = torch.randn(100, 3, generator=g) * 0.1 + 0.5
    with torch.no_grad():
        assert (point_encoder(a) - point_encoder(b)).abs().max() > 1e-3


def test_point_encoder_rejects_empty(point_encoder):
    with pytest.raises(ValidationError):
        point_encoder(torch.zeros(0, 3))


# time embedding ---------------------------------------------------------------


def test_time_embedding_examples():
    e0 = time_embedding(0.0).reshape(16, 2)
    assert torch.all(e0[:, 0] == 0) and torch.all(e0[:, 1] == 1)
    e1 = time_embedding(1.0).reshape(16, 2)
    assert abs(float(e1[0, 0])) <= 1e-7 and abs(float(e1[0, 1]) + 1) <= 1e-7
    assert time_embedding(0.3).shape == (32,)


def test_time_embedding_injective_on_grid():
    alphas = torch.linspace(0.001, 0.999, 999)
    e = time_embedding(alphas)
    diffs = (e[:, None] - e[None]).abs().amax(-1)
    off = diffs + torch.eye(len(alphas)) * 1e9
    assert off.min() > 1e-6


# latent mapper ------------------------------------------------------------------


@pytest.fixture(scope="module")
def mapper():
    torch.manual_seed(4)
    return LatentMapper()


def test_mapper_zero_delta_when_ends_match(mapper):
    cs = torch.randn(64, 3)
    zs, ze = mapper.points(cs), mapper.points(cs.clone())
    assert torch.equal(0.5 * (ze - zs), torch.zeros(128))


def test_mapper_determinism_and_noise(mapper):
    cs, ct, ce = torch.randn(3, 64, 3).unbind(0)
    with torch.no_grad():
        a = mapper(cs, ct, ce, 0.5)
        b = mapper(cs, ct, ce, 0.5)
        n1 = mapper(cs, ct, ce, 0.5, noise=torch.Generator().manual_seed(9))
        n2 = mapper(cs, ct, ce, 0.5, noise=torch.Generator().manual_seed(9))
    assert a.shape == (32,) and torch.equal(a, b) and torch.equal(n1, n2)
    assert not torch.equal(a, n1)
    assert torch.isfinite(a).all()


def test_mapper_scale_initialized():
    assert float(LatentMapper().sigma.detach()) == pytest.approx(0.1)


def test_mapper_rejects_mismatched_sets(mapper):
    with pytest.raises(ValidationError):
        mapper(torch.randn(10, 3), torch.randn(11, 3), torch.randn(10, 3), 0.5)


# interpolator -------------------------------------------------------------------


@pytest.mark.parametrize("fr,d", [(4, 64), (8, 16), (8, 32)])
def test_interpolator_shape(fr, d):
    torch.manual_seed(5)
    net = Interpolator(InterpolatorConfig(fr, d))
    fs, fe = torch.randn(2, 2, d, fr, fr, fr).unbind(0)
    with torch.no_grad():
        out = net(fs, fe, torch.randn(2, 32), torch.tensor([0.25, 0.5]))
    assert out.shape == fs.shape


def _live_interpolator():
    torch.manual_seed(6)
    net = Interpolator(InterpolatorConfig(4, 16))
    with torch.no_grad():
        for lin in (net.film.layers[-1], net.readout.layers[-1]):
            lin.weight.normal_(0, 0.3)
            lin.bias.normal_(0, 0.3)
    return net


def test_untrained_interpolator_is_lerp():
    torch.manual_seed(7)
    net = Interpolator(InterpolatorConfig(4, 16))
    fs, fe = torch.randn(2, 1, 16, 4, 4, 4).unbind(0)
    with torch.no_grad():
        out = net(fs, fe, torch.randn(1, 32), torch.tensor([0.25]))
    assert torch.allclose(out, 0.75 * fs + 0.25 * fe, atol=1e-6)


def test_latent_conditioning_is_live():
    net = _live_interpolator()
    fs, fe = torch.randn(2, 1, 16, 4, 4, 4).unbind(0)
    t = torch.tensor([0.5])
    with torch.no_grad():
        a = net(fs, fe, torch.randn(1, 32), t)
        b = net(fs, fe, torch.randn(1, 32), t)
    assert (a - b).abs().max() > 1e-6


def test_interpolator_rejects_bad_inputs():
    net = Interpolator(InterpolatorConfig(4, 16))
    fs = torch.randn(1, 16, 4, 4, 4)
    for t in (0.0, 1.0):
        with pytest.raises(ValidationError):
            net(fs, fs, torch.zeros(1, 32), torch.tensor([t]))
    with pytest.raises(ValidationError):
        net(fs, torch.randn(1, 16, 8, 8, 8), torch.zeros(1, 32), torch.tensor([0.5]))


def test_outputs_finite_over_random_weights():
    acfg = AutoencoderConfig.for_resolution(32)
    for trial in range(100):
        torch.manual_seed(100 + trial)
        dec = Decoder(acfg)
        net = _live_interpolator() if trial % 2 else Interpolator(InterpolatorConfig(4, 16))
        mp = LatentMapper()
        scale = 10.0 ** (trial % 5 - 2)
        with torch.no_grad():
            f = scale * torch.randn(1, 16, 4, 4, 4)
            z = mp(*(scale * torch.randn(3, 16, 3)).unbind(0), 0.5)[None]
            out = net(f, -f, z, torch.tensor([0.5]))
            grid = dec(out)
        assert torch.isfinite(z).all() and torch.isfinite(out).all() and torch.isfinite(grid).all()


# weights --------------------------------------------------------------------------


def test_weights_roundtrip(tmp_path):
    torch.manual_seed(8)
    cfg = AutoencoderConfig.for_resolution(32)
    dec = Decoder(cfg)
    w = ModelWeights.from_module("decoder", dec, cfg.fingerprint(), effective=False)
    w.save(tmp_path / "d.bin")
    back = ModelWeights.load(tmp_path / "d.bin")
    assert back.component == "decoder" and back.fingerprint == cfg.fingerprint()
    assert list(back.params) == list(w.params)
    assert all(np.array_equal(back.params[n], w.params[n]) for n in w.params)
    assert back.count == _count(dec)
    fresh = back.load_into(Decoder(cfg), cfg.fingerprint())
    f = torch.randn(1, 16, 4, 4, 4)
    with torch.no_grad():
        assert torch.equal(fresh(f), dec(f))


def test_fingerprint_mismatch():
    cfg = AutoencoderConfig.for_resolution(32)
    other = AutoencoderConfig.for_resolution(64)
    assert cfg.fingerprint() != other.fingerprint()
    w = ModelWeights.from_module("decoder", Decoder(cfg), cfg.fingerprint())
    with pytest.raises(FingerprintMismatch):
        w.load_into(Decoder(other), other.fingerprint())
    with pytest.raises(FingerprintMismatch):
        w.load_into(Decoder(cfg), other.fingerprint())


@given(st.sampled_from([16, 24, 32]))
def test_fingerprint_tracks_width(width):
    a = InterpolatorConfig(4, 64, width=width)
    assert a.fingerprint() == InterpolatorConfig(4, 64, width=width).fingerprint()
    assert a.fingerprint() != InterpolatorConfig(4, 64, width=width + 8).fingerprint()
