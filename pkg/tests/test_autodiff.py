import io
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from n4mc import autodiff as ad
from n4mc.errors import ValidationError
from oracles import explicit_attention, gaussian_cdf, naive_conv3d

PROBES = 20


def fd_check(fn, inputs, dtype, seed=0, h=1e-6):
    """Directional-derivative gradient check.

    Reverse-mode gradients are taken in ``dtype``; central differences run on
    a float64 shadow of the same function. Returns the worst relative error
    over ``PROBES`` random directions.
    """
    g = torch.Generator().manual_seed(seed)
    x64 = [t.detach().double() for t in inputs]
    out_shape = fn(*x64).shape
    proj = torch.randn(out_shape, generator=g, dtype=torch.float64)

    xs = [t.detach().to(dtype).requires_grad_(True) for t in inputs]
    loss = (fn(*xs) * proj.to(dtype)).sum()
    grads = torch.autograd.grad(loss, xs, allow_unused=True)
    grads = [torch.zeros_like(x) if gr is None else gr for gr, x in zip(grads, xs)]

    worst = 0.0
    for _ in range(PROBES):
        dirs = [torch.randn(x.shape, generator=g, dtype=torch.float64) for x in x64]
        with torch.no_grad():
            plus = (fn(*[x + h * d for x, d in zip(x64, dirs)]) * proj).sum()
            minus = (fn(*[x - h * d for x, d in zip(x64, dirs)]) * proj).sum()
        fd = float(plus - minus) / (2 * h)
        an = sum(float((gr.double() * d).sum()) for gr, d in zip(grads, dirs))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _attn_fn(heads):
    def fn(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo):
        return ad.multi_head_attention(q, k, v, heads, wq, bq, wk, bk, wv, bv, wo, bo)
    return fn


OPS = {
    "conv3d": (lambda x, w, b: ad.conv3d(x, w, b, padding=1), lambda: [_rand(2, 2, 4, 4, 4), _rand(3, 2, 3, 3, 3, seed=1), _rand(3, seed=2)]),
    "conv3d_strided": (lambda x, w, b: ad.conv3d(x, w, b, stride=2), lambda: [_rand(1, 2, 6, 6, 6), _rand(4, 2, 2, 2, 2, seed=1), _rand(4, seed=2)]),
    "conv3d_depthwise": (lambda x, w, b: ad.conv3d(x, w, b, padding=3, groups=3), lambda: [_rand(2, 3, 5, 5, 5), _rand(3, 1, 7, 7, 7, seed=1), _rand(3, seed=2)]),
    "linear": (ad.linear, lambda: [_rand(4, 5), _rand(8, 5, seed=1), _rand(8, seed=2)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b, 1e-6), lambda: [_rand(6, 16), 1 + 0.1 * _rand(16, seed=1), _rand(16, seed=2)]),
    "gelu": (ad.gelu, lambda: [3 * _rand(50)]),
    "softmax": (ad.softmax, lambda: [_rand(5, 7)]),
    "pixel_shuffle3d": (lambda x: ad.pixel_shuffle3d(x, 2), lambda: [_rand(1, 16, 2, 3, 2)]),
    "attention": (_attn_fn(2), lambda: [_rand(2, 3, 8), _rand(2, 5, 8, seed=1), _rand(2, 5, 8, seed=2)]
                  + [0.3 * _rand(*s, seed=3 + i) for i, s in enumerate([(8, 8), (8,)] * 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_float64(name):
    fn, make = OPS[name]
    assert fd_check(fn, make(), torch.float64) <= 1e-5


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_float32(name):
    fn, make = OPS[name]
    assert fd_check(fn, make(), torch.float32) <= 1e-3


def test_ssim_loss_gradient():
    from n4mc.training import ssim3d
    a, b = _rand(1, 2, 8, 8, 8), _rand(1, 2, 8, 8, 8, seed=1)
    assert fd_check(lambda x: ssim3d(x, b), [a], torch.float64) <= 1e-5


def test_two_consumers_accumulate():
    x = _rand(3, 4).requires_grad_(True)
    w = _rand(5, 4, seed=1)
    (ad.linear(x, w).sum() + ad.gelu(x).sum()).backward()
    x1 = x.detach().clone().requires_grad_(True)
    ad.linear(x1, w).sum().backward()
    x2 = x.detach().clone().requires_grad_(True)
    ad.gelu(x2).sum().backward()
    assert torch.allclose(x.grad, x1.grad + x2.grad, atol=1e-14)


# --- conv3d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = _rand(1, 1, 4, 4, 4)
    y = ad.conv3d(x, torch.ones(1, 1, 1, 1, 1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    assert torch.equal(x, y)


def test_conv_constant_field():
    x = torch.full((1, 1, 5, 5, 5), 7.0)
    y = ad.conv3d(x, torch.ones(1, 1, 3, 3, 3), None, padding=1)
    assert y[0, 0, 2, 2, 2].item() == 189.0


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1)])
def test_conv_matches_naive_loops(stride, pad, groups):
    x = torch.randn(2, 1, 4, 4, 4)
    w = torch.randn(3, 1, 3, 3, 3)
    b = torch.randn(3)
    got = ad.conv3d(x, w, b, stride=stride, padding=pad, groups=groups).numpy()
    ref = naive_conv3d(x.numpy(), w.numpy(), b.numpy(), stride, pad)
    assert np.abs(got - ref).max() <= 1e-5


def test_depthwise_path_matches_naive():
    x = torch.randn(1, 2, 5, 5, 5, requires_grad=True)
    w = torch.randn(2, 1, 3, 3, 3)
    got = ad.conv3d(x, w, None, padding=1, groups=2).detach().numpy()
    for c in range(2):
        ref = naive_conv3d(x.detach().numpy()[:, c:c + 1], w.numpy()[c:c + 1], None, 1, 1)
        assert np.abs(got[:, c:c + 1] - ref).max() <= 1e-5


def test_conv_shape_errors():
    with pytest.raises(ValidationError):
        ad.conv3d(torch.zeros(1, 2, 4, 4, 4), torch.zeros(3, 3, 3, 3, 3))
    with pytest.raises(ValidationError):
        ad.conv3d(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 3, 3, 3))


# --- linear / layer norm / gelu / softmax -------------------------------------

def test_linear_examples():
    x = torch.randn(3, 4)
    assert torch.equal(ad.linear(x, torch.eye(4), torch.zeros(4)), x)
    out = ad.linear(torch.tensor([2.0, 3.0]), torch.tensor([[1.0, 1.0]]), torch.tensor([0.0]))
    assert out.tolist() == [5.0]
    r = np.random.default_rng(0)
    x, w, b = r.normal(size=(5, 8)), r.normal(size=(3, 8)), r.normal(size=3)
    got = ad.linear(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b)).numpy()
    assert np.abs(got - (x @ w.T + b)).max() <= 1e-6


def test_layer_norm_examples():
    one, zero = torch.ones(4), torch.zeros(4)
    assert torch.equal(ad.layer_norm(torch.full((4,), 3.0), one, zero), torch.zeros(4))
    out = ad.layer_norm(torch.tensor([1.0, 3.0], dtype=torch.float64), torch.ones(2, dtype=torch.float64),
                        torch.zeros(2, dtype=torch.float64), eps=1e-12)
    assert torch.allclose(out, torch.tensor([-1.0, 1.0], dtype=torch.float64), atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(2, 64))
def test_layer_norm_statistics(seed, d):
    x = torch.randn(8, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 5 + 2
    y = ad.layer_norm(x, torch.ones(d, dtype=torch.float64), torch.zeros(d, dtype=torch.float64), eps=1e-12)
    assert y.mean(-1).abs().max() <= 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() <= 1e-4


def test_gelu_examples():
    assert ad.gelu(torch.tensor(0.0)).item() == 0.0
    assert abs(ad.gelu(torch.tensor(10.0, dtype=torch.float64)).item() - 10.0) <= 1e-6
    expected = -1.0 * gaussian_cdf(-1.0)
    assert abs(ad.gelu(torch.tensor(-1.0, dtype=torch.float64)).item() - expected) <= 1e-6


@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    x = torch.randn(6, 9, generator=torch.Generator().manual_seed(seed)) * 20
    assert (ad.softmax(x).sum(-1) - 1).abs().max() <= 1e-6


# --- pixel shuffle ------------------------------------------------------------

def test_pixel_shuffle_identity_r1():
    x = torch.randn(1, 3, 2, 2, 2)
    assert torch.equal(ad.pixel_shuffle3d(x, 1), x)


def test_pixel_shuffle_block_layout():
    x = torch.arange(8.0).reshape(1, 8, 1, 1, 1)
    y = ad.pixel_shuffle3d(x, 2)
    assert y.shape == (1, 1, 2, 2, 2)
    assert sorted(y.flatten().tolist()) == list(range(8))
    for i in range(2):
        for j in range(2):
            for l in range(2):
                assert y[0, 0, i, j, l].item() == (i * 2 + j) * 2 + l


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
def test_pixel_shuffle_bijection(r, c, seed):
    x = torch.randn(2, c * r ** 3, 2, 3, 2, generator=torch.Generator().manual_seed(seed))
    y = ad.pixel_shuffle3d(x, r)
    assert torch.equal(ad.pixel_unshuffle3d(y, r), x)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)


# --- attention ----------------------------------------------------------------

def _attn_params(width, seed):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(*s, generator=g, dtype=torch.float64) * 0.5 for s in [(width, width), (width,)] * 4]


def test_attention_single_key():
    p = _attn_params(4, 0)
    q, k, v = _rand(1, 3, 4), _rand(1, 1, 4, seed=1), _rand(1, 1, 4, seed=2)
    out = ad.multi_head_attention(q, k, v, 2, *p)
    vproj = ad.linear(v, p[4], p[5])
    expected = ad.linear(vproj.expand(1, 3, 4), p[6], p[7])
    assert torch.allclose(out, expected, atol=1e-12)


def test_attention_identical_keys_uniform():
    p = _attn_params(8, 1)
    q = _rand(1, 4, 8)
    k = _rand(1, 1, 8, seed=3).expand(1, 6, 8)
    _, w = ad.multi_head_attention(q, k, _rand(1, 6, 8, seed=4), 4, *p, return_weights=True)
    assert (w - 1 / 6).abs().max() <= 1e-6


def test_attention_matches_explicit_oracle():
    p = _attn_params(4, 2)
    q, k, v = _rand(1, 3, 4), _rand(1, 3, 4, seed=1), _rand(1, 3, 4, seed=2)
    got = ad.multi_head_attention(q, k, v, 2, *p).numpy()
    ref = explicit_attention(q.numpy(), k.numpy(), v.numpy(), 2, *[t.numpy() for t in p])
    assert np.abs(got - ref).max() <= 1e-5


# --- quantization -------------------------------------------------------------

def test_fake_quantize_lattice_fixed_point():
    lo, step = -0.75, 0.01
    x = torch.tensor(lo + step * np.array([0, 3, 17, 255]), dtype=torch.float64)
    assert torch.allclose(ad.fake_quantize(x), x, atol=1e-12, rtol=0)


@given(st.integers(0, 2**31 - 1))
def test_fake_quantize_error_bound(seed):
    x = torch.randn(2000, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 3
    step = (x.max() - x.min()) / 255
    assert (ad.fake_quantize(x) - x).abs().max() <= step / 2 + 1e-12


@given(st.integers(0, 2**31 - 1))
def test_fake_quantize_idempotent(seed):
    x = torch.randn(500, generator=torch.Generator().manual_seed(seed))
    once = ad.fake_quantize(x)
    assert torch.equal(ad.fake_quantize(once), once)


def test_fake_quantize_straight_through():
    x = torch.randn(30, requires_grad=True)
    ad.fake_quantize(x).sum().backward()
    assert torch.equal(x.grad, torch.ones(30))


def test_fake_quantize_constant():
    x = torch.full((10,), 0.3)
    assert torch.equal(ad.fake_quantize(x), x)


def test_quantized_linear_error_bound():
    torch.manual_seed(0)
    lin = ad.Linear(16, 8, quantize=True)
    x = torch.randn(32, 16)
    with torch.no_grad():
        yq = lin(x)
        lin.quantize = False
        y = lin(x)
    sw = float(lin.weight.detach().max() - lin.weight.detach().min()) / 255 / 2
    sb = float(lin.bias.detach().max() - lin.bias.detach().min()) / 255 / 2
    bound = sw * x.abs().sum(-1, keepdim=True) + sb
    assert torch.all((yq - y).abs() <= bound + 1e-6)


# --- optimizer ----------------------------------------------------------------

def test_lr_schedule_points():
    assert ad.lr_at(0, 1000) == 0.0
    assert ad.lr_at(200, 1000) == pytest.approx(0.001)
    assert ad.lr_at(1000, 1000) == pytest.approx(1e-5)
    vals = [ad.lr_at(s, 1000) for s in range(200, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_zero_gradient_no_change():
    p = torch.nn.Parameter(torch.randn(5))
    before = p.detach().clone()
    opt = ad.Adam([("p", p)], ad.Schedule(10))
    for _ in range(5):
        p.grad = torch.zeros(5)
        opt.step()
    assert torch.equal(p.detach(), before)


def test_adam_constant_gradient_step_size():
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    sched = ad.Schedule(10_000, warmup_fraction=0.0, base_lr=0.01, min_lr=0.01)
    opt = ad.Adam([("p", p)], sched)
    g = torch.tensor([2.0, -0.5, 1e-3], dtype=torch.float64)
    for _ in range(200):
        before = p.detach().clone()
        p.grad = g.clone()
        opt.step()
    delta = p.detach() - before
    assert torch.equal(torch.sign(delta), -torch.sign(g))
    assert torch.allclose(delta.abs(), torch.full((3,), 0.01, dtype=torch.float64), rtol=1e-3)


def test_adam_quadratic_converges():
    x = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = ad.Adam([("x", x)], ad.Schedule(500, base_lr=0.01, min_lr=0.01, warmup_fraction=0.0))
    for _ in range(500):
        opt.zero_grad()
        (x ** 2).sum().backward()
        opt.step()
    assert abs(x.item()) < 0.05


def test_adam_nonfinite_gradient_names_parameter():
    p = torch.nn.Parameter(torch.zeros(2))
    opt = ad.Adam([("encoder.weight", p)], ad.Schedule(10))
    p.grad = torch.tensor([math.nan, 0.0])
    with pytest.raises(FloatingPointError, match="encoder.weight"):
        opt.step()


def test_moment_shapes_match():
    m = ad.Conv3d(2, 3, 3)
    opt = ad.Adam(m.named_parameters(), ad.Schedule(10))
    for n, p in m.named_parameters():
        assert opt.state.exp_avg[n].shape == p.shape == opt.state.exp_avg_sq[n].shape


def test_param_records_roundtrip():
    from collections import OrderedDict
    params = OrderedDict([("a", np.random.rand(2, 3).astype(np.float32)), ("s", np.float32(0.1) * np.ones(()))])
    buf = io.BytesIO()
    ad.write_param_records(buf, params)
    buf.seek(0)
    back = ad.read_param_records(buf)
    assert list(back) == ["a", "s"]
    assert back["s"].shape == ()
    assert all(np.array_equal(back[k], params[k]) for k in params)
