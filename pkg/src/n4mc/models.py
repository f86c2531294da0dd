"""Per-sequence networks: volume encoder, quantized decoder, latent mapper, interpolator."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .errors import FingerprintMismatch, ValidationError
from .voxel import RESOLUTIONS, TsdfDefGrid

# resolution -> (feature lattice k', feature dim d, decoder channel schedule)
PRESETS = {
    32: (4, 16, (24, 16, 12, 8)),
    64: (4, 64, (32, 24, 16, 12, 8)),
    128: (8, 16, (48, 36, 24, 16, 12)),
    256: (8, 32, (64, 48, 32, 24, 16)),
}


def _fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AutoencoderConfig:
    k: int
    feature_res: int
    feature_dim: int
    decoder_channels: tuple[int, ...]
    stage_channels: tuple[int, ...] = (64, 64, 64, 16)
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    kernel: int = 7
    expansion: int = 4

    def __post_init__(self):
        if self.k not in RESOLUTIONS:
            raise ValidationError(f"resolution {self.k} not in {RESOLUTIONS}")
        ratio = self.k // self.feature_res
        if ratio * self.feature_res != self.k or ratio & (ratio - 1) or ratio < 2:
            raise ValidationError(f"k/k' = {self.k}/{self.feature_res} must be a power of two >= 2")
        if self.stem_stride * int(np.prod(self.stage_strides)) != ratio:
            raise ValidationError(f"cannot realize total stride {ratio} with a stem and three 2x downsamples")
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ValidationError("the encoder has exactly four stages")

    @classmethod
    def for_resolution(cls, k: int, **overrides) -> "AutoencoderConfig":
        if k not in PRESETS:
            raise ValidationError(f"no preset for resolution {k}; choose from {sorted(PRESETS)}")
        kp, d, ch = PRESETS[k]
        blocks = (4, 2, 2, 2) if k == 256 else (2, 2, 2, 2)
        kw = dict(k=k, feature_res=kp, feature_dim=d, decoder_channels=ch, stage_blocks=blocks)
        kw.update(overrides)
        return cls(**kw)

    @property
    def total_stride(self) -> int:
        return self.k // self.feature_res

    @property
    def stem_stride(self) -> int:
        return max(2, self.total_stride // 8)

    @property
    def stage_strides(self) -> tuple[int, int, int]:
        rest = self.total_stride // max(2, self.total_stride // 8)
        twos = int(round(math.log2(rest))) if rest >= 1 else 0
        return tuple(2 if i < twos else 1 for i in range(3))

    @property
    def upsample_steps(self) -> int:
        return int(round(math.log2(self.total_stride)))

    def fingerprint(self) -> str:
        return _fingerprint({"kind": "autoencoder", **asdict(self)})


@dataclass(frozen=True)
class InterpolatorConfig:
    feature_res: int
    feature_dim: int
    width: int = 16
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_ratio: int = 4
    voxel_hidden: int = 64
    latent_dim: int = 32
    time_bands: int = 16
    prior_hidden: int = 64
    film_hidden: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValidationError(f"transformer width {self.width} not divisible by {self.heads} heads")

    @property
    def tokens(self) -> int:
        return self.feature_res ** 3

    def fingerprint(self) -> str:
        return _fingerprint({"kind": "interpolator", **asdict(self)})


@dataclass(frozen=True)
class MapperConfig:
    point_dim: int = 128
    time_bands: int = 16
    hidden: tuple[int, int] = (256, 256)
    latent_dim: int = 32
    sigma_init: float = 0.1
    noise_std: float = 0.01

    @property
    def input_dim(self) -> int:
        return 4 * self.point_dim + 2 * self.time_bands

    def fingerprint(self) -> str:
        return _fingerprint({"kind": "mapper", **asdict(self)})


# ---------------------------------------------------------------------------
# encoder


class ChannelNorm(nn.Module):
    """Layer norm over the channel axis of a [B, C, D, H, W] tensor."""

    def __init__(self, c: int):
        super().__init__()
        self.norm = ad.LayerNorm(c)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


class ConvNeXtBlock(nn.Module):
    def __init__(self, c: int, kernel: int = 7, expansion: int = 4):
        super().__init__()
        self.dw = ad.Conv3d(c, c, kernel, padding=kernel // 2, groups=c)
        self.norm = ad.LayerNorm(c)
        self.pw1 = ad.Linear(c, expansion * c)
        self.pw2 = ad.Linear(expansion * c, c)

    def forward(self, x):
        y = self.dw(x).permute(0, 2, 3, 4, 1)
        y = self.pw2(ad.gelu(self.pw1(self.norm(y))))
        return x + y.permute(0, 4, 1, 2, 3)


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        s = cfg.stem_stride
        self.stem = ad.Conv3d(4, ch[0], s, stride=s)
        self.stem_norm = ChannelNorm(ch[0])
        self.down = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(4):
            if i > 0:
                st = cfg.stage_strides[i - 1]
                self.down.append(nn.Sequential(ChannelNorm(ch[i - 1]), ad.Conv3d(ch[i - 1], ch[i], st, stride=st)))
            self.stages.append(nn.Sequential(*[ConvNeXtBlock(ch[i], cfg.kernel, cfg.expansion)
                                               for _ in range(cfg.stage_blocks[i])]))
        self.head_norm = ChannelNorm(ch[-1])
        self.head = ad.Conv3d(ch[-1], cfg.feature_dim, 1)

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        """[B, 4, k, k, k] -> [B, d, k', k', k']."""
        k = self.cfg.k
        if grids.dim() != 5 or tuple(grids.shape[1:]) != (4, k, k, k):
            raise ValidationError(f"encoder for k={k} got input of shape {tuple(grids.shape)}")
        x = self.stem_norm(self.stem(grids))
        for i in range(4):
            if i > 0:
                x = self.down[i - 1](x)
            x = self.stages[i](x)
        return self.head(self.head_norm(x))


# ---------------------------------------------------------------------------
# decoder


class Decoder(nn.Module):
    """Feature lattice -> TSDF-Def volume via PixelShuffle upsampling; all weights quantized."""

    def __init__(self, cfg: AutoencoderConfig, quantize: bool = True):
        super().__init__()
        self.cfg = cfg
        ch = cfg.decoder_channels
        self.head = ad.Conv3d(cfg.feature_dim, ch[0], 3, padding=1, quantize=quantize)
        self.ups = nn.ModuleList()
        for i in range(cfg.upsample_steps):
            cin = ch[min(i, len(ch) - 1)]
            cout = ch[min(i + 1, len(ch) - 1)]
            self.ups.append(ad.Conv3d(cin, cout * 8, 3, padding=1, quantize=quantize))
        last = ch[min(cfg.upsample_steps, len(ch) - 1)]
        self.out = ad.Conv3d(last, 4, 3, padding=1, quantize=quantize)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """[B, d, k', k', k'] -> [B, 4, k, k, k] with channel 0 in [-1, 1]."""
        c = self.cfg
        want = (c.feature_dim,) + (c.feature_res,) * 3
        if feats.dim() != 5 or tuple(feats.shape[1:]) != want:
            raise ValidationError(f"decoder expects features [B, {want}], got {tuple(feats.shape)}")
        x = self.head(feats)
        for conv in self.ups:
            x = ad.gelu(ad.pixel_shuffle3d(conv(x), 2))
        y = self.out(x)
        half_voxel = 0.5 * 2.0 / (c.k - 1)
        return torch.cat([torch.tanh(y[:, :1]), half_voxel * torch.tanh(y[:, 1:])], dim=1)


# ---------------------------------------------------------------------------
# latent mapper


def time_embedding(alpha, bands: int = 16) -> torch.Tensor:
    """Interleaved ``sin(2^b pi a), cos(2^b pi a)`` for b < bands; shape [..., 2*bands]."""
    a = torch.as_tensor(alpha, dtype=torch.float32)
    freqs = (2.0 ** torch.arange(bands, dtype=torch.float64) * math.pi)
    ang = a.to(torch.float64)[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(*a.shape, 2 * bands).to(torch.float32)


class PointEncoder(nn.Module):
    def __init__(self, dim: int = 128):
        super().__init__()
        self.l1 = ad.Linear(3, dim)
        self.l2 = ad.Linear(dim, dim)
        self.l3 = ad.Linear(dim, dim)

    def forward(self, pts: torch.Tensor) -> torch.Tensor:
        """[..., p, 3] -> [..., dim] via shared per-point layers and a max over points."""
        if pts.shape[-2] < 1:
            raise ValidationError("point encoder needs at least one point")
        h = self.l3(ad.gelu(self.l2(ad.gelu(self.l1(pts)))))
        return h.max(dim=-2).values


class LatentMapper(nn.Module):
    def __init__(self, cfg: MapperConfig = MapperConfig()):
        super().__init__()
        self.cfg = cfg
        self.points = PointEncoder(cfg.point_dim)
        h1, h2 = cfg.hidden
        self.fc1 = ad.Linear(cfg.input_dim, h1)
        self.fc2 = ad.Linear(h1, h2)
        self.fc3 = ad.Linear(h2, cfg.latent_dim)
        self.norm = ad.LayerNorm(cfg.latent_dim)
        self.sigma = nn.Parameter(torch.tensor(cfg.sigma_init))

    def forward(self, cs, ct, ce, alpha, noise: torch.Generator | None = None) -> torch.Tensor:
        """Latent code for the frame at ``alpha`` between key frames; noise is added when a generator is given."""
        if not (cs.shape == ct.shape == ce.shape):
            raise ValidationError(f"center sets differ in shape: {tuple(cs.shape)}, {tuple(ct.shape)}, {tuple(ce.shape)}")
        zs, zt, ze = self.points(cs), self.points(ct), self.points(ce)
        delta = 0.5 * (ze - zs)
        gamma = time_embedding(alpha, self.cfg.time_bands).expand(*zs.shape[:-1], -1)
        x = torch.cat([zs, ze, zt, delta, gamma], dim=-1)
        z = self.norm(self.fc3(ad.gelu(self.fc2(ad.gelu(self.fc1(x))))))
        z = self.sigma * z
        if noise is not None:
            z = z + self.cfg.noise_std * torch.randn(z.shape, generator=noise)
        return z


# ---------------------------------------------------------------------------
# interpolation transformer


class QuantTable(ad.QuantModule):
    def __init__(self, rows: int, cols: int, std: float = 0.02):
        super().__init__(True)
        self.weight = nn.Parameter(torch.randn(rows, cols) * std)

    def forward(self):
        return self.q(self.weight)


class _MLP(nn.Module):
    def __init__(self, dims, quantize=True):
        super().__init__()
        self.layers = nn.ModuleList([ad.Linear(a, b, quantize=quantize) for a, b in zip(dims[:-1], dims[1:])])

    def forward(self, x):
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class _FeedForward(nn.Module):
    def __init__(self, width, ratio):
        super().__init__()
        self.fc1 = ad.Linear(width, ratio * width, quantize=True)
        self.fc2 = ad.Linear(ratio * width, width, quantize=True)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, width, heads, ratio):
        super().__init__()
        self.norm1 = ad.LayerNorm(width, quantize=True)
        self.attn = ad.MultiheadAttention(width, heads, quantize=True)
        self.norm2 = ad.LayerNorm(width, quantize=True)
        self.ff = _FeedForward(width, ratio)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, width, heads, ratio):
        super().__init__()
        self.norm1 = ad.LayerNorm(width, quantize=True)
        self.self_attn = ad.MultiheadAttention(width, heads, quantize=True)
        self.norm2 = ad.LayerNorm(width, quantize=True)
        self.cross_attn = ad.MultiheadAttention(width, heads, quantize=True)
        self.norm3 = ad.LayerNorm(width, quantize=True)
        self.ff = _FeedForward(width, ratio)

    def forward(self, x, memory):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h)
        x = x + self.cross_attn(self.norm2(x), memory, memory)
        return x + self.ff(self.norm3(x))


class Interpolator(nn.Module):
    """Predicts intermediate-frame features from the two key-frame features and a latent code.

    Output = (1 - t) * Fs + t * Fe + residual, where the residual is read out of
    FiLM-modulated per-voxel queries attending to the encoded key-frame tokens.
    The readout and FiLM layers start at zero, so an untrained model is a lerp.
    """

    def __init__(self, cfg: InterpolatorConfig):
        super().__init__()
        self.cfg = cfg
        L, d = cfg.width, cfg.feature_dim
        self.voxel = _MLP((d, cfg.voxel_hidden, cfg.voxel_hidden))
        self.voxel_proj = ad.Linear(cfg.voxel_hidden, L, quantize=True)
        self.coords = QuantTable(cfg.tokens, L)
        self.time_proj = ad.Linear(2 * cfg.time_bands, L, quantize=True)
        self.encoder = nn.ModuleList([EncoderLayer(L, cfg.heads, cfg.ff_ratio) for _ in range(cfg.encoder_layers)])
        self.memory_norm = ad.LayerNorm(L, quantize=True)
        self.prior = _MLP((2 * d + 1, cfg.prior_hidden, L))
        self.film = _MLP((cfg.latent_dim + 2 * cfg.time_bands, cfg.film_hidden, 2 * L))
        self.decoder = nn.ModuleList([DecoderLayer(L, cfg.heads, cfg.ff_ratio) for _ in range(cfg.decoder_layers)])
        self.out_norm = ad.LayerNorm(L, quantize=True)
        self.readout = _MLP((L, cfg.voxel_hidden, d))
        with torch.no_grad():
            for lin in (self.film.layers[-1], self.readout.layers[-1]):
                lin.weight.zero_()
                lin.bias.zero_()
        self.calls = 0

    def forward(self, fs: torch.Tensor, fe: torch.Tensor, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``fs``, ``fe``: [B, d, k', k', k']; ``z``: [B, latent]; ``t``: [B] -> [B, d, k', k', k']."""
        cfg = self.cfg
        want = (cfg.feature_dim,) + (cfg.feature_res,) * 3
        if fs.shape != fe.shape or tuple(fs.shape[1:]) != want:
            raise ValidationError(f"key features must both be [B, {want}], got {tuple(fs.shape)} and {tuple(fe.shape)}")
        t = torch.as_tensor(t, dtype=fs.dtype).reshape(-1)
        if bool(((t <= 0) | (t >= 1)).any()):
            raise ValidationError("interpolation time must lie strictly inside (0, 1)")
        self.calls += 1
        B = fs.shape[0]
        ts = fs.flatten(2).transpose(1, 2)  # [B, T, d]
        te = fe.flatten(2).transpose(1, 2)
        coords = self.coords()[None]
        g0 = self.time_proj(time_embedding(torch.zeros(1), cfg.time_bands))
        g1 = self.time_proj(time_embedding(torch.ones(1), cfg.time_bands))
        mem = torch.cat([self.voxel_proj(self.voxel(ts)) + coords + g0,
                         self.voxel_proj(self.voxel(te)) + coords + g1], dim=1)
        for layer in self.encoder:
            mem = layer(mem)
        mem = self.memory_norm(mem)
        tt = t[:, None, None].expand(B, ts.shape[1], 1)
        prior = self.prior(torch.cat([ts, te, tt], dim=-1))
        gamma_t = time_embedding(t, cfg.time_bands)
        gb = self.film(torch.cat([z, gamma_t], dim=-1))[:, None, :]
        gamma, beta = gb[..., :cfg.width], gb[..., cfg.width:]
        q = (1 + gamma) * prior + beta + coords
        for layer in self.decoder:
            q = layer(q, mem)
        res = self.readout(self.out_norm(q))
        w = t[:, None, None]
        out = (1 - w) * ts + w * te + res
        return out.transpose(1, 2).reshape(fs.shape)


# ---------------------------------------------------------------------------
# weight containers


WEIGHTS_MAGIC = b"N4MW"
COMPONENTS = ("encoder", "decoder", "mapper", "transformer")


@dataclass(eq=False)
class ModelWeights:
    component: str
    fingerprint: str
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValidationError(f"unknown component '{self.component}'")

    @classmethod
    def from_module(cls, component: str, module: nn.Module, fingerprint: str,
                    effective: bool = True) -> "ModelWeights":
        """Snapshot parameters; ``effective`` stores them as the forward pass sees them."""
        src = ad.effective_parameters(module) if effective else OrderedDict(
            (n, p.detach()) for n, p in module.named_parameters())
        params = OrderedDict((n, t.detach().cpu().numpy().astype(np.float32)) for n, t in src.items())
        return cls(component, fingerprint, params)

    def load_into(self, module: nn.Module, fingerprint: str) -> nn.Module:
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch(f"{self.component} weights were built for config {self.fingerprint}, "
                                      f"model config is {fingerprint}")
        own = OrderedDict(module.named_parameters())
        if list(own) != list(self.params):
            raise FingerprintMismatch(f"{self.component} parameter names do not match the model")
        with torch.no_grad():
            for name, p in own.items():
                arr = self.params[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise FingerprintMismatch(f"parameter '{name}' has shape {arr.shape}, model expects {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.array(arr, dtype=np.float32, order="C")))
        return module

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        comp = self.component.encode()
        buf.write(WEIGHTS_MAGIC + struct.pack("<B", len(comp)) + comp + bytes.fromhex(self.fingerprint))
        ad.write_param_records(buf, self.params)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if data[:4] != WEIGHTS_MAGIC:
            raise ValidationError("not a weights file")
        n = data[4]
        comp = data[5:5 + n].decode()
        fp = data[5 + n:13 + n].hex()
        return cls(comp, fp, ad.read_param_records(io.BytesIO(data[13 + n:])))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# array-level helpers (grid layout [k, k, k, 4], feature layout [k', k', k', d])


def grids_to_tensor(grids: list[TsdfDefGrid]) -> torch.Tensor:
    return torch.from_numpy(np.stack([g.values for g in grids])).permute(0, 4, 1, 2, 3).contiguous()


def tensor_to_grid(x: torch.Tensor, tau: float) -> TsdfDefGrid:
    k = x.shape[-1]
    vals = x.detach().permute(1, 2, 3, 0).cpu().numpy()
    return TsdfDefGrid(k, tau, vals)


def features_to_array(f: torch.Tensor) -> np.ndarray:
    """[d, k', k', k'] -> [k', k', k', d]."""
    return f.detach().permute(1, 2, 3, 0).cpu().numpy().astype(np.float32)


def array_to_features(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).permute(3, 0, 1, 2).contiguous()


@torch.no_grad()
def encode(grid: TsdfDefGrid, encoder: Encoder) -> np.ndarray:
    if grid.k != encoder.cfg.k:
        raise ValidationError(f"grid resolution {grid.k} does not match encoder resolution {encoder.cfg.k}")
    return features_to_array(encoder(grids_to_tensor([grid]))[0])


@torch.no_grad()
def decode(features: np.ndarray, decoder: Decoder, tau: float) -> TsdfDefGrid:
    return tensor_to_grid(decoder(array_to_features(features)[None])[0], tau)
