"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 invalid input or corrupt data, 4 internal error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import CodecConfig
from .errors import CorruptionError, FingerprintMismatch, N4MCError, StageError, ValidationError
from .mesh import load_mesh, save_mesh

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INTERNAL = 0, 2, 3, 4
MESH_SUFFIXES = (".obj", ".ply")

log = logging.getLogger("n4mc")


def set_threads(n: int | None) -> int:
    """Cap worker threads for torch and numba. Results do not depend on the count."""
    if n is None:
        env = os.environ.get("N4MC_THREADS")
        n = int(env) if env else None
    if n is None:
        return 0
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    import numba
    import torch
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def find_meshes(pattern: str) -> list[Path]:
    """Mesh files from a directory or glob, in lexicographic order."""
    p = Path(pattern)
    if p.is_dir():
        files = [f for f in p.iterdir() if f.suffix.lower() in MESH_SUFFIXES]
    else:
        files = [Path(f) for f in glob.glob(pattern) if Path(f).suffix.lower() in MESH_SUFFIXES]
    if not files:
        raise ValidationError(f"no .obj/.ply meshes found at '{pattern}'")
    return sorted(files, key=lambda f: f.name)


def _load_all(pattern: str):
    return [load_mesh(f) for f in find_meshes(pattern)]


def _write_atomic(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    tmp.replace(path)


def build_config(args) -> CodecConfig:
    cfg = CodecConfig.from_json(args.config) if args.config else CodecConfig()
    cfg = cfg.with_overrides(resolution=args.resolution, group_size=args.group_size, width=args.width,
                             seed=args.seed, refine_iterations=args.refine_iterations)
    training = {"stage_a_steps": args.stage_a_steps, "stage_b_steps": args.stage_b_steps,
                "finetune_steps": args.finetune_steps, "batch_size": args.batch_size}
    training = {k: v for k, v in training.items() if v is not None}
    if training:
        cfg = replace(cfg, training=replace(cfg.training, **training))
    if args.points is not None:
        cfg = replace(cfg, tracking=replace(cfg.tracking, p=args.points))
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_compress(args) -> int:
    from .codec.pipeline import compress_sequence

    cfg = build_config(args)
    meshes = _load_all(args.input)
    out = Path(args.output)
    workdir = args.workdir or str(out.with_name(out.name + ".work"))
    res = compress_sequence(meshes, cfg, workdir=workdir, resume=args.resume, progress=log.info)
    _write_atomic(out, res.data)
    manifest = res.manifest(cfg)
    manifest["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    mpath = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out} ({len(res.data)} bytes, {res.bitrate_mbps:.4f} Mbps at 30 fps), manifest {mpath}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .codec.pipeline import decompress_sequence

    data = Path(args.container).read_bytes()
    res = decompress_sequence(data, normalized=args.normalized)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(res.meshes):
        path = outdir / f"frame_{i:04d}.obj"
        if mesh.is_empty:
            # keep frame numbering intact; the decoded grid had no zero crossing
            log.warning("frame %d decoded to an empty surface", i)
            path.write_text("# empty frame\n")
        else:
            save_mesh(mesh, path)
    print(f"{'frame':>5}  {'inference_ms':>12}  {'marching_cubes_ms':>17}")
    for i, t in enumerate(res.timings):
        print(f"{i:5d}  {1e3 * t['inference']:12.2f}  {1e3 * t['marching_cubes']:17.2f}")
    if args.timings:
        Path(args.timings).write_text(json.dumps(res.timings, indent=2) + "\n")
    print(f"wrote {len(res.meshes)} meshes to {outdir}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .mesh import normalize_sequence
    from .tracking import TrackingConfig, track_sequence

    meshes = _load_all(args.input)
    normed, _ = normalize_sequence(meshes)
    cfg = TrackingConfig(p=args.points, seed=args.seed)
    centers = track_sequence(normed, cfg, progress=lambda i, n: log.info("tracked frame %d/%d", i + 1, n))
    centers.save(args.output)
    print(f"wrote {args.output} ({centers.frames} frames x {centers.p} centers)")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import evaluate_sequences

    ref = _load_all(args.reference)
    test = _load_all(args.test)
    container = Path(args.container).read_bytes() if args.container else None
    report = evaluate_sequences(ref, test, container=container, samples=args.samples, resolution=args.resolution)
    text = report.to_json(args.output)
    if not args.output:
        print(text)
    else:
        print(f"D1 {report.d1_psnr:.2f} dB  D2 {report.d2_psnr:.2f} dB  "
              f"image PSNR {report.image_psnr:.2f} dB  SSIM {report.image_ssim:.4f}")
    return EXIT_OK


def inspect_text(data: bytes) -> str:
    from .codec.container import Container

    c = Container.from_bytes(data)
    h = c.header
    lines = [
        f"container   {len(data)} bytes, version {c.version}",
        f"fingerprint {h.fingerprint}",
        f"frames      {h.frames}  group size {h.group_size}  centers {h.centers}",
        f"grid        k={h.k}  tau={h.tau:.6g}  features {h.feature_res}^3 x {h.feature_dim}  width {h.width}",
        f"normalize   center=({h.center[0]:.6g}, {h.center[1]:.6g}, {h.center[2]:.6g})  scale={h.scale:.6g}",
        "",
        f"{'section':<14}{'offset':>10}{'bytes':>10}{'share':>8}",
        f"{'(header)':<14}{0:>10}{c.overhead_bytes:>10}{100 * c.overhead_bytes / len(data):>7.2f}%",
    ]
    for name, off, ln in c.section_table():
        lines.append(f"{name:<14}{off:>10}{ln:>10}{100 * ln / len(data):>7.2f}%")
    total = c.overhead_bytes + sum(ln for _, _, ln in c.section_table())
    lines.append(f"{'total':<14}{'':>10}{total:>10}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_text(Path(args.container).read_bytes()))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="n4mc", description="Neural compression of triangle-mesh sequences.")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap (fallback: $N4MC_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="train per-sequence models and write a container")
    c.add_argument("input", help="directory or glob of .obj/.ply frames (sorted by filename)")
    c.add_argument("output", help="container path (.n4mc)")
    c.add_argument("--config", help="JSON config; flags below override it")
    c.add_argument("--resolution", type=int)
    c.add_argument("--group-size", type=int)
    c.add_argument("--width", type=int, help="transformer width (16, 24 or 32)")
    c.add_argument("--seed", type=int)
    c.add_argument("--points", type=int, help="number of tracked volume centers")
    c.add_argument("--refine-iterations", type=int)
    c.add_argument("--stage-a-steps", type=int)
    c.add_argument("--stage-b-steps", type=int)
    c.add_argument("--finetune-steps", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--workdir", help="checkpoint directory (default: <output>.work)")
    c.add_argument("--resume", action="store_true", help="continue from the last completed stage")
    c.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a container into frame_%%04d.obj files")
    d.add_argument("container")
    d.add_argument("output", help="output directory")
    d.add_argument("--normalized", action="store_true", help="keep meshes in the canonical cube")
    d.add_argument("--timings", help="also write per-frame timings as JSON")
    d.set_defaults(func=cmd_decompress)

    t = sub.add_parser("track", help="track volume centers and write a VCTR cache")
    t.add_argument("input")
    t.add_argument("output")
    t.add_argument("--points", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_track)

    m = sub.add_parser("metrics", help="compare two mesh sequences")
    m.add_argument("reference")
    m.add_argument("test")
    m.add_argument("--container", help="container whose size gives the bitrate")
    m.add_argument("--output", help="write the report JSON here instead of stdout")
    m.add_argument("--samples", type=int, default=50000)
    m.add_argument("--resolution", type=int, default=512)
    m.set_defaults(func=cmd_metrics)

    i = sub.add_parser("inspect", help="print header and section sizes of a container")
    i.add_argument("container")
    i.set_defaults(func=cmd_inspect)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, (ValidationError, CorruptionError, FingerprintMismatch, FileNotFoundError,
                        IsADirectoryError, PermissionError)):
        return EXIT_VALIDATION
    return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        set_threads(args.threads)
        return args.func(args)
    except (N4MCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
