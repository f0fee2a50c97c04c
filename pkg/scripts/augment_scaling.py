"""Zero-shot accuracy as a function of how many rewrites each caption gets.

    python3 scripts/augment_scaling.py --counts 0,1,2,3,4 --seeds 0

Count 0 trains in clip mode; every other count trains laclip on that many
paraphrase rewrites per caption.
"""

import argparse

from laclip_kit.dataset import SyntheticSpec
from laclip_kit.experiments import augment_scaling, format_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--counts", default="0,1,2,3,4")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--sigma", type=float, default=0.1)
    args = ap.parse_args()
    rows = augment_scaling([int(k) for k in args.counts.split(",")], [int(s) for s in args.seeds.split(",")],
                           SyntheticSpec(noise_sigma=args.sigma), args.epochs)
    print(format_rows(rows))


if __name__ == "__main__":
    main()
