"""Losses and the two per-sequence training stages.

Stage A fits encoder and decoder to every frame. Stage B freezes the decoder and
fits the latent mapper and the interpolator on the intermediate frames of each
key-frame group.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from .errors import EmptyInputError, TrainingDiverged, ValidationError
from .models import (AutoencoderConfig, Decoder, Encoder, InterpolatorConfig, Interpolator, LatentMapper,
                     MapperConfig, grids_to_tensor)
from .tracking import VolumeCenters
from .voxel import TsdfDefGrid

log = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_RANGE = 2.0


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    mask: float = 2.0
    ssim: float = 0.5
    alpha: float = 0.5

    def __post_init__(self):
        if min(self.l1, self.mask, self.ssim) < 0 or max(self.l1, self.mask, self.ssim) <= 0:
            raise ValidationError("loss weights must be non-negative with at least one positive")


@dataclass(frozen=True)
class TrainingPlan:
    stage_a_steps: int = 20000
    stage_b_steps: int = 10000
    finetune_steps: int = 500
    batch_size: int = 2
    group_size: int = 4
    seed: int = 0
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.group_size < 2:
            raise ValidationError(f"group size must be >= 2, got {self.group_size}")
        if self.stage_a_steps < 1 or self.stage_b_steps < 1 or self.batch_size < 1 or self.finetune_steps < 0:
            raise ValidationError("iteration counts and batch size must be >= 1")

    def schedule(self, steps: int) -> ad.Schedule:
        return ad.Schedule(steps, self.base_lr, self.min_lr, self.warmup_fraction)


# ---------------------------------------------------------------------------
# losses


def ssim3d(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW, data_range: float = SSIM_RANGE) -> torch.Tensor:
    """Mean SSIM over all valid ``window^3`` boxes of [B, C, D, H, W] volumes, channels averaged."""
    if a.shape != b.shape or a.dim() != 5:
        raise ValidationError(f"ssim3d needs two equal 5-D shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def pool(x):
        return F.avg_pool3d(x, window, stride=1)

    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a * mu_a
    var_b = pool(b * b) - mu_b * mu_b
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, w: LossWeights = LossWeights()):
    """Weighted L1 + near-surface L1 + (1 - SSIM) on [B, 4, k, k, k] volumes.

    The near-surface mask comes from the target's TSDF channel only.
    Returns ``(total, {"l1", "mask", "ssim"})`` with detached float parts.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    diff = (pred - target).abs()
    l1 = diff.mean()
    mask = (target[:, :1].abs() < w.alpha).expand_as(diff)
    n = int(mask.sum())
    if n:
        masked = (diff * mask).sum() / n
    else:
        log.debug("near-surface mask is empty; mask term contributes 0")
        masked = diff.sum() * 0.0
    ssim_term = 1.0 - ssim3d(pred, target) if w.ssim else diff.sum() * 0.0
    total = w.l1 * l1 + w.mask * masked + w.ssim * ssim_term
    return total, {"l1": l1.item(), "mask": masked.item(), "ssim": float(ssim_term.detach())}


# ---------------------------------------------------------------------------
# groups


@dataclass(frozen=True)
class Group:
    start: int
    intermediates: tuple[int, ...]
    end: int

    @property
    def alphas(self) -> tuple[float, ...]:
        span = self.end - self.start
        return tuple((t - self.start) / span for t in self.intermediates)


def build_groups(n_frames: int, n: int) -> list[Group]:
    """Key frames at 0, n, 2n, ... plus the last frame; everything between is interpolated."""
    if n_frames < 2 or n < 2:
        raise ValidationError(f"need at least 2 frames and group size >= 2 (got N={n_frames}, n={n})")
    keys = list(range(0, n_frames, n))
    if keys[-1] != n_frames - 1:
        keys.append(n_frames - 1)
    return [Group(s, tuple(range(s + 1, e)), e) for s, e in zip(keys[:-1], keys[1:])]


def key_frames(groups: list[Group]) -> list[int]:
    return [groups[0].start] + [g.end for g in groups]


# ---------------------------------------------------------------------------
# stage A


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, step, total, parts, lr):
        self.rows.append({"step": step, "total": float(total), "l1": parts["l1"], "mask": parts["mask"],
                          "ssim": parts["ssim"], "lr": lr})

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["step", "total", "l1", "mask", "ssim", "lr"])
            wr.writeheader()
            wr.writerows(self.rows)


@dataclass
class AutoencoderResult:
    encoder: Encoder
    decoder: Decoder
    history: History


def quantize_features(f: torch.Tensor, fake: bool = True) -> torch.Tensor:
    """Per-frame 8-bit quantization of a [B, d, k', k', k'] batch."""
    op = ad.fake_quantize if fake else (lambda x, bits: ad.fake_quantize(x.detach(), bits))
    return torch.stack([op(f[i], 8) for i in range(f.shape[0])])


def _check_finite(loss, stage, step):
    if not torch.isfinite(loss):
        raise TrainingDiverged(stage, step)


def train_autoencoder(grids: list[TsdfDefGrid], plan: TrainingPlan, weights: LossWeights = LossWeights(),
                      config: AutoencoderConfig | None = None, progress=None) -> AutoencoderResult:
    if not grids:
        raise EmptyInputError("no frames to train on")
    k = grids[0].k
    if any(g.k != k for g in grids):
        raise ValidationError("all frames must share one resolution")
    cfg = config or AutoencoderConfig.for_resolution(k)
    torch.manual_seed(plan.seed)
    encoder, decoder = Encoder(cfg), Decoder(cfg)
    data = grids_to_tensor(grids)
    params = list(encoder.named_parameters(prefix="encoder")) + list(decoder.named_parameters(prefix="decoder"))
    opt = ad.Adam(params, plan.schedule(plan.stage_a_steps))
    rng = np.random.default_rng(plan.seed)
    batch = min(plan.batch_size, len(grids))
    hist = History()
    for step in range(plan.stage_a_steps):
        idx = np.sort(rng.choice(len(grids), size=batch, replace=False))
        x = data[idx]
        pred = decoder(quantize_features(encoder(x)))
        loss, parts = reconstruction_loss(pred, x, weights)
        _check_finite(loss, "A", step)
        opt.zero_grad()
        loss.backward()
        try:
            lr = opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged("A", step) from exc
        hist.add(step, loss.item(), parts, lr)
        if progress:
            progress(step, plan.stage_a_steps, loss.item())
    encoder.eval()
    decoder.eval()
    return AutoencoderResult(encoder, decoder, hist)


@torch.no_grad()
def encode_frames(encoder: Encoder, grids: list[TsdfDefGrid], chunk: int = 2) -> torch.Tensor:
    """Unquantized features for every frame, [N, d, k', k', k']."""
    data = grids_to_tensor(grids)
    return torch.cat([encoder(data[i:i + chunk]) for i in range(0, len(grids), chunk)])


# ---------------------------------------------------------------------------
# stage B


@dataclass
class InterpolatorResult:
    mapper: LatentMapper
    interpolator: Interpolator
    history: History


def _centers_tensor(centers: VolumeCenters) -> torch.Tensor:
    return torch.from_numpy(centers.positions.astype(np.float32))


def group_latents(mapper: LatentMapper, centers: torch.Tensor, g: Group, noise=None,
                  zero: bool = False) -> torch.Tensor:
    m = len(g.intermediates)
    if zero:
        return torch.zeros(m, mapper.cfg.latent_dim)
    cs = centers[g.start].expand(m, -1, -1)
    ce = centers[g.end].expand(m, -1, -1)
    ct = centers[list(g.intermediates)]
    return mapper(cs, ct, ce, torch.tensor(g.alphas, dtype=torch.float32), noise=noise)


def quantize_latents(z: torch.Tensor) -> torch.Tensor:
    """Per-code-vector 8-bit fake quantization."""
    return torch.stack([ad.fake_quantize(z[i], 8) for i in range(z.shape[0])])


def predict_group(interp: Interpolator, feats: torch.Tensor, g: Group, z: torch.Tensor) -> torch.Tensor:
    m = len(g.intermediates)
    fs = feats[g.start][None].expand(m, -1, -1, -1, -1)
    fe = feats[g.end][None].expand(m, -1, -1, -1, -1)
    return interp(fs, fe, z, torch.tensor(g.alphas, dtype=feats.dtype))


def train_interpolator(features: torch.Tensor, grids: list[TsdfDefGrid], centers: VolumeCenters,
                       decoder: Decoder, plan: TrainingPlan, weights: LossWeights = LossWeights(),
                       config: InterpolatorConfig | None = None, zero_latent: bool = False,
                       progress=None) -> InterpolatorResult:
    """Fit mapper and interpolator with ``decoder`` frozen.

    ``features`` are the unquantized encoder outputs for every frame. The last
    ``plan.finetune_steps`` steps switch to quantized key features and latents.
    """
    n_frames = len(grids)
    if features.shape[0] != n_frames or centers.frames != n_frames:
        raise ValidationError(f"{features.shape[0]} feature frames, {centers.frames} center frames, {n_frames} grids")
    groups = [g for g in build_groups(n_frames, plan.group_size) if g.intermediates]
    d, kp = features.shape[1], features.shape[2]
    cfg = config or InterpolatorConfig(feature_res=kp, feature_dim=d)
    torch.manual_seed(plan.seed + 1)
    mapper = LatentMapper(MapperConfig())
    interp = Interpolator(cfg)
    for p in decoder.parameters():
        p.requires_grad_(False)
    hist = History()
    if not groups:
        return InterpolatorResult(mapper, interp, hist)
    data = grids_to_tensor(grids)
    ctr = _centers_tensor(centers)
    feats = features.detach()
    feats_q = quantize_features(feats, fake=False).detach()
    params = list(interp.named_parameters(prefix="transformer"))
    if not zero_latent:
        params += list(mapper.named_parameters(prefix="mapper"))
    total = plan.stage_b_steps + plan.finetune_steps
    opt = ad.Adam(params, plan.schedule(total))
    rng = np.random.default_rng(plan.seed + 1)
    noise = torch.Generator().manual_seed(plan.seed + 2)
    for step in range(total):
        finetune = step >= plan.stage_b_steps
        g = groups[int(rng.integers(len(groups)))]
        z = group_latents(mapper, ctr, g, noise=noise, zero=zero_latent)
        if finetune:
            z = quantize_latents(z)
        pred = decoder(predict_group(interp, feats_q if finetune else feats, g, z))
        loss, parts = reconstruction_loss(pred, data[list(g.intermediates)], weights)
        _check_finite(loss, "B", step)
        opt.zero_grad()
        loss.backward()
        try:
            lr = opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged("B", step) from exc
        hist.add(step, loss.item(), parts, lr)
        if progress:
            progress(step, total, loss.item())
    mapper.eval()
    interp.eval()
    return InterpolatorResult(mapper, interp, hist)


@torch.no_grad()
def intermediate_losses(features: torch.Tensor, grids: list[TsdfDefGrid], centers: VolumeCenters,
                        decoder: Decoder, mapper: LatentMapper, interp: Interpolator, group_size: int,
                        weights: LossWeights = LossWeights(), zero_latent: bool = False) -> dict[int, float]:
    """Reconstruction loss per intermediate frame using quantized key features and latents."""
    feats_q = quantize_features(features, fake=False)
    data = grids_to_tensor(grids)
    ctr = _centers_tensor(centers)
    out = {}
    for g in build_groups(len(grids), group_size):
        if not g.intermediates:
            continue
        z = quantize_latents(group_latents(mapper, ctr, g, zero=zero_latent))
        pred = decoder(predict_group(interp, feats_q, g, z))
        for i, t in enumerate(g.intermediates):
            out[t] = float(reconstruction_loss(pred[i:i + 1], data[t:t + 1], weights)[0])
    return out
