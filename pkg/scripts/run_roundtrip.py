"""Compress and decompress a deforming sphere end to end; report per-frame D2 and timings."""

import argparse
import json

from n4mc import fixtures

import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--group-size", type=int, default=4)
    ap.add_argument("--stage-a-steps", type=int, default=500)
    ap.add_argument("--stage-b-steps", type=int, default=250)
    ap.add_argument("--finetune-steps", type=int, default=30)
    ap.add_argument("--workdir", help="keep checkpoints here (enables inspection of the trained models)")
    ap.add_argument("--container", help="also write the container to this path")
    ap.add_argument("--out")
    args = ap.parse_args()

    config = ex.acceptance_roundtrip_config(args.resolution, args.group_size, args.stage_a_steps,
                                            args.stage_b_steps, args.finetune_steps)
    r = ex.roundtrip(config, fixtures.deforming_sphere(args.frames), args.workdir, progress=print)
    for i, v in r["d2"].items():
        print(f"frame {i:3d}  D2 {v:6.2f} dB")
    print(f"{len(r['data'])} bytes, intermediate D2 {r['d2_intermediate']:.2f} dB, key {r['d2_key']:.2f} dB, "
          f"deterministic decode {r['deterministic']}, {r['seconds'] / 60:.1f} min")
    if args.container:
        with open(args.container, "wb") as fh:
            fh.write(r["data"])
    if args.out:
        summary = {k: v for k, v in r.items() if k not in ("data", "meshes")}
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
