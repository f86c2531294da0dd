"""End-to-end compression and decompression of mesh sequences."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..autodiff import set_quantize
from ..config import CodecConfig
from ..dmc import deformable_marching_cubes
from ..errors import CorruptionError, FingerprintMismatch, StageError, ValidationError
from ..mesh import NormalizationTransform, TriangleMesh, normalize_sequence
from ..models import (AutoencoderConfig, Decoder, Encoder, InterpolatorConfig, Interpolator, LatentMapper,
                      MapperConfig, ModelWeights, _fingerprint, tensor_to_grid)
from ..refine import refine_tsdf_def
from ..tracking import VolumeCenters, track_sequence
from ..training import (History, build_groups, encode_frames, group_latents, key_frames, train_autoencoder,
                        train_interpolator)
from ..voxel import TsdfDefGrid, compute_tsdf_def, default_tau
from . import container as ct
from .quant import dequantize, quantize_tensor

log = logging.getLogger(__name__)

FRAME_RATE = 30
STAGES = ("normalize", "voxelize", "track", "stage_a", "stage_b", "assemble")


def codec_fingerprint(ae: AutoencoderConfig, ic: InterpolatorConfig) -> str:
    return _fingerprint({"autoencoder": ae.fingerprint(), "interpolator": ic.fingerprint()})


def bitrate_mbps(n_bytes: int, frames: int, fps: int = FRAME_RATE) -> float:
    if frames < 1:
        raise ValidationError("frame count must be >= 1")
    return n_bytes * 8 * fps / frames / 1e6


@dataclass
class CompressResult:
    data: bytes
    container: ct.Container
    timings: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    workdir: Path | None = None

    @property
    def bits(self) -> int:
        return 8 * len(self.data)

    @property
    def bitrate_mbps(self) -> float:
        return bitrate_mbps(len(self.data), self.container.header.frames)

    def manifest(self, config: CodecConfig) -> dict:
        return {
            "config": config.to_dict(),
            "frames": self.container.header.frames,
            "bytes": len(self.data),
            "bitrate_mbps": self.bitrate_mbps,
            "sections": [{"name": n, "offset": o, "length": ln} for n, o, ln in self.container.section_table()],
            "stage_seconds": self.timings,
            "losses": {k: {"first": h.totals[0], "last": h.totals[-1], "steps": len(h.rows)}
                       for k, h in self.histories.items() if h.rows},
        }


class _Workdir:
    """Stage checkpoints. ``state.json`` lists finished stages for one config fingerprint."""

    def __init__(self, path: Path | None, fingerprint: str, resume: bool):
        self.path = path
        self.fingerprint = fingerprint
        self.done: list[str] = []
        if path is None:
            return
        path.mkdir(parents=True, exist_ok=True)
        state = path / "state.json"
        if resume and state.exists():
            st = json.loads(state.read_text())
            if st.get("fingerprint") != fingerprint:
                raise ValidationError(f"{path} holds checkpoints for a different configuration; "
                                      "use a fresh workdir or drop --resume")
            self.done = list(st.get("done", []))
        else:
            self._write()

    def _write(self):
        (self.path / "state.json").write_text(json.dumps({"fingerprint": self.fingerprint, "done": self.done}))

    def has(self, stage: str) -> bool:
        return self.path is not None and stage in self.done

    def mark(self, stage: str):
        if self.path is not None and stage not in self.done:
            self.done.append(stage)
            self._write()

    def file(self, name: str) -> Path:
        return self.path / name


def _run(stage: str, fn, hint: str | None = None):
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc, hint) from exc


def compress_sequence(meshes: list[TriangleMesh], config: CodecConfig, workdir=None, resume: bool = False,
                      progress=None) -> CompressResult:
    """Train the per-sequence models and pack everything a decoder needs into a container."""
    if len(meshes) < 2:
        raise ValidationError(f"need at least 2 frames, got {len(meshes)}")
    ae_cfg, ic_cfg = config.autoencoder(), config.interpolator()
    run_fp = _fingerprint({"config": config.to_dict(), "frames": len(meshes)})
    wd = _Workdir(Path(workdir) if workdir else None, run_fp, resume)
    hint = f"rerun with --resume --workdir {wd.path}" if wd.path else None
    plan = config.plan
    timings: dict[str, float] = {}
    histories: dict[str, History] = {}

    def say(msg):
        log.info(msg)
        if progress:
            progress(msg)

    t0 = time.perf_counter()
    normed, transform = _run("normalize", lambda: normalize_sequence(meshes), hint)
    timings["normalize"] = time.perf_counter() - t0

    # voxelize
    t0 = time.perf_counter()
    k = config.resolution
    if wd.has("voxelize"):
        vals = np.load(wd.file("grids.npy"))
        tau = default_tau(k)
        grids = [TsdfDefGrid(k, tau, v) for v in vals]
    else:
        def voxelize():
            out = []
            for i, m in enumerate(normed):
                g = compute_tsdf_def(m, k)
                if config.refine_iterations:
                    g = refine_tsdf_def(g, m, config.refine_iterations, seed=config.seed)
                out.append(g)
                say(f"voxelized frame {i + 1}/{len(normed)}")
            return out
        grids = _run("voxelize", voxelize, hint)
        if wd.path:
            np.save(wd.file("grids.npy"), np.stack([g.values for g in grids]))
            wd.mark("voxelize")
    timings["voxelize"] = time.perf_counter() - t0

    # track
    t0 = time.perf_counter()
    if wd.has("track"):
        centers = VolumeCenters.load(wd.file("centers.vctr"))
    else:
        centers = _run("track", lambda: track_sequence(normed, config.tracking_config,
                                                       progress=lambda i, n: say(f"tracked frame {i + 1}/{n}")), hint)
        if wd.path:
            centers.save(wd.file("centers.vctr"))
            wd.mark("track")
    # the container and the models see float32 centers either way
    centers = VolumeCenters(centers.positions.astype(np.float32).astype(np.float64))
    timings["track"] = time.perf_counter() - t0

    # stage A
    t0 = time.perf_counter()
    if wd.has("stage_a"):
        encoder = ModelWeights.load(wd.file("encoder.n4mw")).load_into(Encoder(ae_cfg), ae_cfg.fingerprint())
        decoder = ModelWeights.load(wd.file("decoder.n4mw")).load_into(Decoder(ae_cfg), ae_cfg.fingerprint())
    else:
        res = _run("stage_a", lambda: train_autoencoder(
            grids, plan, config.loss, ae_cfg,
            progress=lambda s, n, l: s % 50 == 0 and say(f"stage A step {s}/{n} loss {l:.5f}")), hint)
        encoder, decoder = res.encoder, res.decoder
        histories["stage_a"] = res.history
        if wd.path:
            ModelWeights.from_module("encoder", encoder, ae_cfg.fingerprint(), effective=False).save(
                wd.file("encoder.n4mw"))
            ModelWeights.from_module("decoder", decoder, ae_cfg.fingerprint(), effective=False).save(
                wd.file("decoder.n4mw"))
            res.history.write_csv(wd.file("stage_a.csv"))
            wd.mark("stage_a")
    encoder.eval()
    decoder.eval()
    timings["stage_a"] = time.perf_counter() - t0

    # stage B
    t0 = time.perf_counter()
    features = encode_frames(encoder, grids)
    if wd.has("stage_b"):
        mapper = ModelWeights.load(wd.file("mapper.n4mw")).load_into(LatentMapper(MapperConfig()),
                                                                     MapperConfig().fingerprint())
        interp = ModelWeights.load(wd.file("transformer.n4mw")).load_into(Interpolator(ic_cfg), ic_cfg.fingerprint())
    else:
        res_b = _run("stage_b", lambda: train_interpolator(
            features, grids, centers, decoder, plan, config.loss, ic_cfg,
            progress=lambda s, n, l: s % 50 == 0 and say(f"stage B step {s}/{n} loss {l:.5f}")), hint)
        mapper, interp = res_b.mapper, res_b.interpolator
        histories["stage_b"] = res_b.history
        if wd.path:
            ModelWeights.from_module("mapper", mapper, MapperConfig().fingerprint(), effective=False).save(
                wd.file("mapper.n4mw"))
            ModelWeights.from_module("transformer", interp, ic_cfg.fingerprint(), effective=False).save(
                wd.file("transformer.n4mw"))
            res_b.history.write_csv(wd.file("stage_b.csv"))
            wd.mark("stage_b")
    timings["stage_b"] = time.perf_counter() - t0

    # assemble
    t0 = time.perf_counter()
    cont = _run("assemble", lambda: _assemble(features, centers, decoder, mapper, interp, ae_cfg, ic_cfg,
                                              config, transform, len(meshes)), hint)
    data = cont.to_bytes()
    timings["assemble"] = time.perf_counter() - t0
    return CompressResult(data, cont, timings, histories, wd.path)


@torch.no_grad()
def _assemble(features, centers, decoder, mapper, interp, ae_cfg, ic_cfg, config, transform, n_frames):
    groups = build_groups(n_frames, config.group_size)
    keys = key_frames(groups)
    ctr = torch.from_numpy(centers.positions.astype(np.float32))
    latents = []
    for g in groups:
        if g.intermediates:
            z = group_latents(mapper, ctr, g)
            latents += [quantize_tensor(z[i]) for i in range(z.shape[0])]
    sections = {
        ct.Section.CONFIG: json.dumps({"autoencoder": asdict(ae_cfg), "interpolator": asdict(ic_cfg)},
                                      sort_keys=True, separators=(",", ":")).encode(),
        ct.Section.DECODER: ct.pack_blobs([quantize_tensor(p) for _, p in decoder.named_parameters()]),
        ct.Section.TRANSFORMER: ct.pack_blobs([quantize_tensor(p) for _, p in interp.named_parameters()]),
        ct.Section.LATENTS: ct.pack_blobs(latents),
        ct.Section.KEY_FEATURES: ct.pack_blobs([quantize_tensor(features[i]) for i in keys]),
    }
    header = ct.Header(codec_fingerprint(ae_cfg, ic_cfg), ae_cfg.k, ae_cfg.feature_res, ae_cfg.feature_dim,
                       ic_cfg.width, n_frames, config.group_size, centers.p, default_tau(ae_cfg.k),
                       tuple(float(c) for c in transform.center), float(transform.scale))
    return ct.Container(header, {int(k): v for k, v in sections.items()})


# ---------------------------------------------------------------------------
# decompression


@dataclass
class DecodedModels:
    header: ct.Header
    decoder: Decoder
    interpolator: Interpolator
    key_features: dict[int, torch.Tensor]
    latents: dict[int, torch.Tensor]
    transform: NormalizationTransform


def _load_params(module: torch.nn.Module, blobs, section: str):
    params = list(module.named_parameters())
    if len(params) != len(blobs):
        raise FingerprintMismatch(f"section {section} holds {len(blobs)} tensors, model expects {len(params)}")
    with torch.no_grad():
        for (name, p), b in zip(params, blobs):
            if tuple(b.shape) != tuple(p.shape):
                raise FingerprintMismatch(f"{section}: tensor '{name}' has shape {b.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(dequantize(b)))
            p.requires_grad_(False)


def load_models(data: bytes) -> DecodedModels:
    cont = ct.Container.from_bytes(data)
    h = cont.header
    missing = [s.name.lower() for s in ct.Section if int(s) not in cont.sections]
    if missing:
        raise CorruptionError(f"missing sections: {', '.join(missing)}", section=missing[0])
    try:
        cfg = json.loads(cont.sections[ct.Section.CONFIG])
        ae_raw = dict(cfg["autoencoder"])
        for key in ("decoder_channels", "stage_channels", "stage_blocks"):
            ae_raw[key] = tuple(ae_raw[key])
        ae_cfg = AutoencoderConfig(**ae_raw)
        ic_cfg = InterpolatorConfig(**cfg["interpolator"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable model configuration: {exc}", section="config") from exc
    if codec_fingerprint(ae_cfg, ic_cfg) != h.fingerprint:
        raise FingerprintMismatch(f"header fingerprint {h.fingerprint} does not match the stored configuration")
    if (ae_cfg.k, ae_cfg.feature_res, ae_cfg.feature_dim, ic_cfg.width) != (h.k, h.feature_res, h.feature_dim, h.width):
        raise FingerprintMismatch("header dimensions disagree with the stored configuration")

    decoder = Decoder(ae_cfg, quantize=False)
    _load_params(decoder, ct.unpack_blobs(cont.sections[ct.Section.DECODER], "decoder"), "decoder")
    interp = Interpolator(ic_cfg)
    set_quantize(interp, False)
    _load_params(interp, ct.unpack_blobs(cont.sections[ct.Section.TRANSFORMER], "transformer"), "transformer")
    decoder.eval()
    interp.eval()

    groups = build_groups(h.frames, h.group_size)
    keys = key_frames(groups)
    feats = ct.unpack_blobs(cont.sections[ct.Section.KEY_FEATURES], "key_features")
    if len(feats) != len(keys):
        raise CorruptionError(f"{len(feats)} key-frame blobs for {len(keys)} key frames", section="key_features")
    inter = [t for g in groups for t in g.intermediates]
    lat = ct.unpack_blobs(cont.sections[ct.Section.LATENTS], "latents")
    if len(lat) != len(inter):
        raise CorruptionError(f"{len(lat)} latent codes for {len(inter)} intermediate frames", section="latents")
    key_features = {i: torch.from_numpy(dequantize(b)) for i, b in zip(keys, feats)}
    latents = {t: torch.from_numpy(dequantize(b)) for t, b in zip(inter, lat)}
    transform = NormalizationTransform(np.array(h.center), h.scale)
    return DecodedModels(h, decoder, interp, key_features, latents, transform)


@dataclass
class DecodeResult:
    meshes: list[TriangleMesh]
    grids: list[TsdfDefGrid]
    timings: list[dict]  # per frame: {"inference": s, "marching_cubes": s}
    transformer_calls: dict[int, int]  # frame -> interpolator invocations while decoding it


@torch.no_grad()
def decompress_sequence(data: bytes, normalized: bool = False) -> DecodeResult:
    """Decode every frame; ``normalized=True`` keeps meshes in the canonical cube."""
    m = load_models(data)
    h = m.header
    groups = build_groups(h.frames, h.group_size)
    owner = {}
    for g in groups:
        for i, t in enumerate(g.intermediates):
            owner[t] = (g, g.alphas[i])
    meshes, grids, timings, calls = [], [], [], {}
    for f in range(h.frames):
        before = m.interpolator.calls
        t0 = time.perf_counter()
        if f in m.key_features:
            feat = m.key_features[f]
        else:
            g, alpha = owner[f]
            feat = m.interpolator(m.key_features[g.start][None], m.key_features[g.end][None],
                                  m.latents[f][None], torch.tensor([alpha], dtype=torch.float32))[0]
        grid = tensor_to_grid(m.decoder(feat[None])[0], h.tau)
        t1 = time.perf_counter()
        mesh = deformable_marching_cubes(grid)
        if not normalized:
            mesh = m.transform.inverse_mesh(mesh)
        t2 = time.perf_counter()
        meshes.append(mesh)
        grids.append(grid)
        timings.append({"inference": t1 - t0, "marching_cubes": t2 - t1})
        calls[f] = m.interpolator.calls - before
    return DecodeResult(meshes, grids, timings, calls)
