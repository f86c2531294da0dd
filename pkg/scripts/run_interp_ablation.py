"""Intermediate-frame loss with and without the per-frame latent on the oscillating sphere."""

import argparse
import json

from n4mc import fixtures
from n4mc.tracking import TrackingConfig

import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--group-size", type=int, default=4)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--stage-a-steps", type=int, default=1200)
    ap.add_argument("--stage-b-steps", type=int, default=800)
    ap.add_argument("--out")
    args = ap.parse_args()

    prep = ex.prepare(fixtures.oscillating_sphere(args.frames), args.resolution, TrackingConfig(p=args.points))
    trained = ex.train_stage_a(prep, args.stage_a_steps)
    print(f"stage A done in {trained.stage_a_seconds / 60:.1f} min", flush=True)
    r = ex.interpolation_ablation(trained, args.stage_b_steps, args.group_size)
    print(f"{'frame':>5}  {'latents on':>10}  {'latents off':>11}")
    for i in sorted(r["on"]):
        print(f"{i:5d}  {r['on'][i]:10.5f}  {r['off'][i]:11.5f}")
    print(f" mean  {r['mean_on']:10.5f}  {r['mean_off']:11.5f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({k: v for k, v in r.items()}, fh, indent=2)


if __name__ == "__main__":
    main()
