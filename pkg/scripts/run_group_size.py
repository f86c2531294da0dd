"""Container size and intermediate loss as the group size grows, with a fixed training budget."""

import argparse
import json

from n4mc import fixtures
from n4mc.tracking import TrackingConfig

import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[3, 5, 7])
    ap.add_argument("--fixture", choices=["deforming", "oscillating"], default="deforming")
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--stage-a-steps", type=int, default=2000)
    ap.add_argument("--stage-b-steps", type=int, default=2000)
    ap.add_argument("--out")
    args = ap.parse_args()

    make = fixtures.deforming_sphere if args.fixture == "deforming" else fixtures.oscillating_sphere
    prep = ex.prepare(make(args.frames), args.resolution, TrackingConfig(p=args.points))
    trained = ex.train_stage_a(prep, args.stage_a_steps)
    r = ex.group_size_sweep(trained, tuple(args.sizes), args.stage_b_steps)
    print(f"{'n':>3}  {'bits':>10}  {'mean loss':>10}")
    for n, row in r["rows"].items():
        print(f"{n:3d}  {row['bits']:10d}  {row['mean_loss']:10.5f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(r, fh, indent=2)


if __name__ == "__main__":
    main()
