"""Single default run: learned head vs. the all-free and majority-class predictors.

This is the calibration run for the end-to-end learning threshold.

    python3 scripts/baseline.py --seed 0
"""

import argparse
import json

from vggtocc.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    args = ap.parse_args()
    rec = run_ablation(args.seed, True, args.steps, args.lr)
    print(json.dumps(rec.to_dict(), indent=1))
    print(f"model IoU {rec.iou:.4f}  majority (class {rec.majority_class}) {rec.majority_iou:.4f}  "
          f"all-free {rec.all_free_iou:.4f}  margin {rec.iou - max(rec.majority_iou, rec.all_free_iou):+.4f}")


if __name__ == "__main__":
    main()
