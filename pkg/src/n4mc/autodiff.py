"""Dense tensor ops with reverse-mode gradients, quantization-aware layers and Adam.

Tensors are ``torch.Tensor``; torch's autograd tape provides the reverse pass.
Ops that torch does not ship (3D pixel shuffle, straight-through fake
quantization) or ships slowly on CPU (depthwise 3D convolution backward) are
implemented here as explicit autograd functions.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError


def _check(cond: bool, msg: str):
    if not cond:
        raise ValidationError(msg)


# ---------------------------------------------------------------------------
# convolution


class _DepthwiseConv3d(torch.autograd.Function):
    """Stride-1 depthwise 3D convolution.

    The input gradient is a correlation with the flipped kernel; the weight
    gradient is a cross-correlation evaluated with real FFTs.
    """

    @staticmethod
    def forward(ctx, x, weight, bias, padding):
        ctx.save_for_backward(x, weight)
        ctx.padding = padding
        ctx.has_bias = bias is not None
        return F.conv3d(x, weight, bias, padding=padding, groups=x.shape[1])

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved_tensors
        p = ctx.padding
        c = x.shape[1]
        kd, kh, kw = w.shape[2:]
        gx = gw = gb = None
        if ctx.needs_input_grad[0]:
            gx = F.conv3d(g, w.flip(2, 3, 4), padding=(kd - 1 - p[0], kh - 1 - p[1], kw - 1 - p[2]), groups=c)
        if ctx.needs_input_grad[1]:
            xp = F.pad(x, (p[2], p[2], p[1], p[1], p[0], p[0]))
            size = xp.shape[2:]
            X = torch.fft.rfftn(xp, s=size, dim=(2, 3, 4))
            G = torch.fft.rfftn(g, s=size, dim=(2, 3, 4))
            corr = torch.fft.irfftn((X * G.conj()).sum(0), s=size, dim=(1, 2, 3))
            gw = corr[:, :kd, :kh, :kw].unsqueeze(1).contiguous().to(w.dtype)
        if ctx.has_bias and ctx.needs_input_grad[2]:
            gb = g.sum(dim=(0, 2, 3, 4))
        return gx, gw, gb, None


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(a) for a in v)


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> torch.Tensor:
    """Cross-correlation of ``x`` [B,C,D,H,W] with ``weight`` [O,C/groups,kd,kh,kw]."""
    stride, padding = _triple(stride), _triple(padding)
    _check(x.dim() == 5 and weight.dim() == 5,
           f"conv3d expects 5-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    _check(x.shape[1] == weight.shape[1] * groups and weight.shape[0] % groups == 0,
           f"conv3d channel mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}, groups={groups}")
    for ax in range(3):
        _check(x.shape[2 + ax] + 2 * padding[ax] >= weight.shape[2 + ax],
               f"conv3d kernel {tuple(weight.shape[2:])} does not fit padded input {tuple(x.shape[2:])}")
    if bias is not None:
        _check(bias.shape == (weight.shape[0],), f"conv3d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    if groups == x.shape[1] == weight.shape[0] and stride == (1, 1, 1) and torch.is_grad_enabled():
        return _DepthwiseConv3d.apply(x, weight, bias, padding)
    return F.conv3d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    _check(weight.dim() == 2 and x.shape[-1] == weight.shape[1],
           f"linear shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    _check(d >= 1 and gamma.shape == (d,) and beta.shape == (d,),
           f"layer_norm expects gamma/beta of shape ({d},)")
    return F.layer_norm(x, (d,), gamma, beta, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the Gaussian CDF."""
    return F.gelu(x, approximate="none")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


class _PixelShuffle3d(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, r):
        ctx.r = r
        return _shuffle(x, r)

    @staticmethod
    def backward(ctx, g):
        return _unshuffle(g, ctx.r), None


def _shuffle(x, r):
    b, c, d, h, w = x.shape
    oc = c // (r ** 3)
    y = x.reshape(b, oc, r, r, r, d, h, w).permute(0, 1, 5, 2, 6, 3, 7, 4)
    return y.reshape(b, oc, d * r, h * r, w * r)


def _unshuffle(x, r):
    b, c, d, h, w = x.shape
    y = x.reshape(b, c, d // r, r, h // r, r, w // r, r).permute(0, 1, 3, 5, 7, 2, 4, 6)
    return y.reshape(b, c * r ** 3, d // r, h // r, w // r)


def pixel_shuffle3d(x: torch.Tensor, r: int) -> torch.Tensor:
    """[B, C*r^3, D, H, W] -> [B, C, D*r, H*r, W*r]; channel ``c*r^3 + (i*r + j)*r + l``
    lands at spatial offset (i, j, l) inside each r^3 block."""
    _check(x.dim() == 5 and r >= 1 and x.shape[1] % (r ** 3) == 0,
           f"pixel_shuffle3d: {x.shape[1]} channels not divisible by r^3={r ** 3}")
    return _PixelShuffle3d.apply(x, r)


def pixel_unshuffle3d(x: torch.Tensor, r: int) -> torch.Tensor:
    _check(x.dim() == 5 and all(s % r == 0 for s in x.shape[2:]),
           f"pixel_unshuffle3d: spatial dims {tuple(x.shape[2:])} not divisible by {r}")
    return _unshuffle(x, r)


def multi_head_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                         w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
                         return_weights: bool = False):
    """Scaled dot-product attention over [B, T, L] inputs with per-head scale 1/sqrt(L/heads)."""
    width = q.shape[-1]
    _check(width % heads == 0, f"attention width {width} not divisible by {heads} heads")
    hd = width // heads
    B, Tq, _ = q.shape
    Tk = k.shape[1]
    Q = linear(q, w_q, b_q).reshape(B, Tq, heads, hd).transpose(1, 2)
    K = linear(k, w_k, b_k).reshape(B, Tk, heads, hd).transpose(1, 2)
    V = linear(v, w_v, b_v).reshape(B, Tk, heads, hd).transpose(1, 2)
    att = softmax(Q @ K.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    out = (att @ V).transpose(1, 2).reshape(B, Tq, width)
    out = linear(out, w_o, b_o)
    return (out, att) if return_weights else out


# ---------------------------------------------------------------------------
# quantization


def affine_params(x: torch.Tensor, bits: int = 8) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-tensor ``(offset, scale)`` covering [min, max] with ``2^bits`` levels."""
    lo = x.detach().min()
    hi = x.detach().max()
    return lo, (hi - lo) / (2 ** bits - 1)


def affine_codes(x: torch.Tensor, lo: torch.Tensor, scale: torch.Tensor, bits: int = 8) -> torch.Tensor:
    if float(scale) == 0.0:
        return torch.zeros_like(x, dtype=torch.int64)
    return torch.clamp(torch.round((x.detach() - lo) / scale), 0, 2 ** bits - 1).to(torch.int64)


def affine_dequantize(codes: torch.Tensor, lo: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return lo + codes.to(lo.dtype) * scale


class _FakeQuantize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bits):
        lo, scale = affine_params(x, bits)
        if float(scale) == 0.0:
            return x.clone()
        return affine_dequantize(affine_codes(x, lo, scale, bits), lo, scale)

    @staticmethod
    def backward(ctx, g):
        # straight-through: every input lies inside [min, max] by construction
        return g, None


def fake_quantize(x: torch.Tensor, bits: int = 8) -> torch.Tensor:
    _check(bits == 8, f"only 8-bit quantization is supported, got {bits}")
    return _FakeQuantize.apply(x, bits)


# ---------------------------------------------------------------------------
# layers


class QuantModule(nn.Module):
    """Base for layers whose parameters pass through :func:`fake_quantize`.

    ``quantize=False`` uses parameters verbatim, which is how weights loaded from
    a bitstream (already on the quantization lattice) are consumed.
    """

    def __init__(self, quantize: bool):
        super().__init__()
        self.quantize = quantize

    def q(self, p: torch.Tensor | None) -> torch.Tensor | None:
        if p is None or not self.quantize:
            return p
        return fake_quantize(p, 8)


class Conv3d(QuantModule):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, quantize: bool = False):
        super().__init__(quantize)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * kernel ** 3
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.empty(cout, cin // groups, kernel, kernel, kernel).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(cout).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return conv3d(x, self.q(self.weight), self.q(self.bias), self.stride, self.padding, self.groups)


class Linear(QuantModule):
    def __init__(self, cin: int, cout: int, bias: bool = True, quantize: bool = False):
        super().__init__(quantize)
        bound = 1.0 / math.sqrt(cin)
        self.weight = nn.Parameter(torch.empty(cout, cin).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(cout).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return linear(x, self.q(self.weight), self.q(self.bias))


class LayerNorm(QuantModule):
    def __init__(self, d: int, eps: float = 1e-6, quantize: bool = False):
        super().__init__(quantize)
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, self.q(self.weight), self.q(self.bias), self.eps)


class MultiheadAttention(nn.Module):
    def __init__(self, width: int, heads: int, quantize: bool = False):
        super().__init__()
        _check(width % heads == 0, f"attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(width, width, quantize=quantize)
        self.k_proj = Linear(width, width, quantize=quantize)
        self.v_proj = Linear(width, width, quantize=quantize)
        self.out_proj = Linear(width, width, quantize=quantize)

    def forward(self, q, k, v):
        m = [self.q_proj, self.k_proj, self.v_proj, self.out_proj]
        args = []
        for lin in m:
            args += [lin.q(lin.weight), lin.q(lin.bias)]
        return multi_head_attention(q, k, v, self.heads, *args)


def set_quantize(module: nn.Module, enabled: bool) -> None:
    for m in module.modules():
        if isinstance(m, QuantModule):
            m.quantize = enabled


def effective_parameters(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Parameters as the forward pass sees them (after fake quantization)."""
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    owners = {}
    for mname, m in module.named_modules():
        for pname, p in m.named_parameters(recurse=False):
            owners[f"{mname}.{pname}" if mname else pname] = (m, p)
    for name, _ in module.named_parameters():
        m, p = owners[name]
        with torch.no_grad():
            out[name] = m.q(p) if isinstance(m, QuantModule) else p.detach().clone()
    return out


# ---------------------------------------------------------------------------
# optimization


def lr_at(step: int, total_steps: int, base_lr: float = 1e-3, min_lr: float = 1e-5,
          warmup_fraction: float = 0.2) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to ``min_lr``."""
    _check(0 <= step <= total_steps, f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    frac = (step - warm) / (total_steps - warm)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class Schedule:
    total_steps: int
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_fraction: float = 0.2

    def __call__(self, step: int) -> float:
        return lr_at(min(step, self.total_steps), self.total_steps, self.base_lr, self.min_lr,
                     self.warmup_fraction)


@dataclass
class OptimizerState:
    schedule: Schedule
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) driven by a warmup-cosine schedule."""

    betas = (0.9, 0.999)
    eps = 1e-8

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], schedule: Schedule):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.state = OptimizerState(schedule)
        for n, p in self.params:
            self.state.exp_avg[n] = torch.zeros_like(p)
            self.state.exp_avg_sq[n] = torch.zeros_like(p)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> float:
        st = self.state
        st.step += 1
        lr = st.schedule(st.step)
        b1, b2 = self.betas
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for n, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter '{n}'")
            m = st.exp_avg[n].mul_(b1).add_(g, alpha=1 - b1)
            v = st.exp_avg_sq[n].mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)
        return lr


# ---------------------------------------------------------------------------
# parameter serialization: ordered (name, shape, float32 data) records


def write_param_records(fh: BinaryIO, params: "OrderedDict[str, np.ndarray]") -> None:
    fh.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        a = np.array(arr, dtype="<f4", order="C")
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)) + nb)
        fh.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_param_records(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    def take(n):
        b = fh.read(n)
        if len(b) != n:
            raise ValidationError("truncated parameter record")
        return b

    (count,) = struct.unpack("<I", take(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}I", take(4 * nd)) if nd else ()
        size = int(np.prod(shape)) if nd else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return out
