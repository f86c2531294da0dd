"""Overfit the autoencoder to one frame and compare D2 against the analytic-grid baseline."""

import argparse
import json

import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frame", type=int, default=2, help="frame of the 12-frame deforming sphere")
    ap.add_argument("--out", help="write the result (with loss history) as JSON")
    args = ap.parse_args()

    def progress(step, total, loss):
        if (step + 1) % 100 == 0:
            print(f"step {step + 1:5d}/{total}  loss {loss:.5f}", flush=True)

    r = ex.overfit(args.steps, args.resolution, args.seed, args.frame, progress=progress)
    print(f"loss {r['initial_loss']:.4f} -> {r['final_loss']:.4f}  "
          f"D2 {r['d2_model']:.2f} dB (baseline {r['d2_baseline']:.2f} dB)  {r['seconds'] / 60:.1f} min")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(r, fh, indent=2)


if __name__ == "__main__":
    main()
