"""Desk-scale experiments shared by the run_* scripts and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from n4mc import fixtures
from n4mc.codec.pipeline import _assemble, decompress_sequence
from n4mc.config import CodecConfig
from n4mc.dmc import deformable_marching_cubes
from n4mc.mesh import NormalizationTransform, TriangleMesh, normalize_sequence
from n4mc.metrics import d_psnr
from n4mc.models import grids_to_tensor, tensor_to_grid
from n4mc.tracking import TrackingConfig, VolumeCenters, track_sequence
from n4mc.training import (LossWeights, TrainingPlan, encode_frames, intermediate_losses, quantize_features,
                           train_autoencoder, train_interpolator)
from n4mc.voxel import TsdfDefGrid, compute_tsdf_def

D2_SAMPLES = 50000


@dataclass
class Prepared:
    meshes: list[TriangleMesh]  # normalized
    transform: NormalizationTransform
    grids: list[TsdfDefGrid]
    centers: VolumeCenters


def prepare(meshes, k: int, tracking: TrackingConfig | None = TrackingConfig()) -> Prepared:
    normed, xf = normalize_sequence(meshes)
    grids = [compute_tsdf_def(m, k) for m in normed]
    centers = track_sequence(normed, tracking) if tracking is not None else None
    if centers is not None:
        centers = VolumeCenters(centers.positions.astype(np.float32).astype(np.float64))
    return Prepared(normed, xf, grids, centers)


# ---------------------------------------------------------------------------
# single-frame overfit


def overfit(steps: int = 2000, k: int = 32, seed: int = 0, frame: int = 2, progress=None) -> dict:
    """Fit encoder+decoder to one frame; compare against the analytic grid through the same extraction."""
    t0 = time.perf_counter()
    mesh = fixtures.deforming_sphere(12)[frame]
    prep = prepare([mesh], k, tracking=None)
    plan = TrainingPlan(stage_a_steps=steps, batch_size=1, seed=seed)
    res = train_autoencoder(prep.grids, plan, progress=progress)
    with torch.no_grad():
        pred = res.decoder(quantize_features(res.encoder(grids_to_tensor(prep.grids))))
    grid = tensor_to_grid(pred[0], prep.grids[0].tau)
    target = prep.meshes[0]
    decoded = deformable_marching_cubes(grid)
    baseline = deformable_marching_cubes(prep.grids[0])
    totals = res.history.totals
    return {
        "initial_loss": totals[0],
        "final_loss": totals[-1],
        "history": totals,
        "d2_model": d_psnr(target, decoded, D2_SAMPLES) if not decoded.is_empty else 0.0,
        "d2_baseline": d_psnr(target, baseline, D2_SAMPLES),
        "seconds": time.perf_counter() - t0,
    }


def window_drops(history: list[float], window: int = 500, smooth: int = 25) -> list[float]:
    """Relative loss drop over each ``window``-step span starting in the first half (smoothed ends)."""
    h = np.asarray(history)
    half = len(h) // 2
    out = []
    for s in range(0, half - window + 1, smooth):
        a = h[s:s + smooth].mean()
        b = h[s + window - smooth:s + window].mean()
        out.append(float(1 - b / a))
    return out


# ---------------------------------------------------------------------------
# interpolation with and without latent conditioning


@dataclass
class Trained:
    prep: Prepared
    encoder: torch.nn.Module
    decoder: torch.nn.Module
    features: torch.Tensor
    stage_a_seconds: float


def train_stage_a(prep: Prepared, steps: int, batch_size: int = 2, seed: int = 0, progress=None) -> Trained:
    t0 = time.perf_counter()
    res = train_autoencoder(prep.grids, TrainingPlan(stage_a_steps=steps, batch_size=batch_size, seed=seed),
                            progress=progress)
    return Trained(prep, res.encoder, res.decoder, encode_frames(res.encoder, prep.grids), time.perf_counter() - t0)


def stage_b(trained: Trained, group_size: int, steps: int, finetune: int = 0, zero_latent: bool = False,
            seed: int = 0, width: int = 16):
    from n4mc.models import InterpolatorConfig

    p = trained.prep
    plan = TrainingPlan(stage_b_steps=steps, finetune_steps=finetune, group_size=group_size, seed=seed)
    cfg = InterpolatorConfig(trained.features.shape[2], trained.features.shape[1], width=width)
    res = train_interpolator(trained.features, p.grids, p.centers, trained.decoder, plan, LossWeights(), cfg,
                             zero_latent=zero_latent)
    losses = intermediate_losses(trained.features, p.grids, p.centers, trained.decoder, res.mapper,
                                 res.interpolator, group_size, zero_latent=zero_latent)
    return res, losses


def interpolation_ablation(trained: Trained, steps: int, group_size: int = 4, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    _, on = stage_b(trained, group_size, steps, zero_latent=False, seed=seed)
    _, off = stage_b(trained, group_size, steps, zero_latent=True, seed=seed)
    return {"on": on, "off": off, "mean_on": float(np.mean(list(on.values()))),
            "mean_off": float(np.mean(list(off.values()))), "seconds": time.perf_counter() - t0}


def group_size_sweep(trained: Trained, sizes=(3, 5, 7), steps: int = 400, seed: int = 0) -> dict:
    """Container size and mean intermediate loss per group size; stage A is shared."""
    t0 = time.perf_counter()
    p = trained.prep
    k = p.grids[0].k
    rows = {}
    for n in sizes:
        res, losses = stage_b(trained, n, steps, seed=seed)
        config = CodecConfig(resolution=k, group_size=n, seed=seed)
        cont = _assemble(trained.features, p.centers, trained.decoder, res.mapper, res.interpolator,
                         config.autoencoder(), config.interpolator(), config, p.transform, len(p.grids))
        rows[n] = {"bits": 8 * len(cont.to_bytes()), "mean_loss": float(np.mean(list(losses.values())))}
    return {"rows": rows, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# end-to-end


def roundtrip(config: CodecConfig, meshes=None, workdir=None, progress=None) -> dict:
    from n4mc.codec.pipeline import compress_sequence
    from n4mc.training import build_groups, key_frames

    t0 = time.perf_counter()
    meshes = meshes if meshes is not None else fixtures.deforming_sphere(12)
    res = compress_sequence(meshes, config, workdir=workdir, progress=progress)
    first = decompress_sequence(res.data)
    second = decompress_sequence(res.data)
    identical = all(np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
                    for a, b in zip(first.meshes, second.meshes))
    keys = set(key_frames(build_groups(len(meshes), config.group_size)))
    d2 = {i: (d_psnr(ref, out, D2_SAMPLES) if not out.is_empty else 0.0)
          for i, (ref, out) in enumerate(zip(meshes, first.meshes))}
    inter = [v for i, v in d2.items() if i not in keys]
    key = [v for i, v in d2.items() if i in keys]
    return {
        "data": res.data,
        "meshes": first.meshes,
        "frames": len(first.meshes),
        "deterministic": identical,
        "d2": d2,
        "d2_intermediate": float(np.mean(inter)),
        "d2_key": float(np.mean(key)),
        "timings": res.timings,
        "seconds": time.perf_counter() - t0,
    }


def acceptance_roundtrip_config(k: int = 64, group_size: int = 4, stage_a: int = 500, stage_b: int = 250,
                                finetune: int = 30) -> CodecConfig:
    plan = TrainingPlan(stage_a_steps=stage_a, stage_b_steps=stage_b, finetune_steps=finetune, batch_size=1)
    return CodecConfig(resolution=k, group_size=group_size, training=plan)
