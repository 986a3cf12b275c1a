"""Compare routing variants on an unseen subject, from Python.

    python3 demos/cross_subject.py --seeds 0 1 --epochs 15

Prints one line per (seed, variant) with seen and held-out semantic loss.
"""

import argparse

from spheremoe.analysis import run_ablation
from spheremoe.config import desk_config
from spheremoe.synth import gen_cohort


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=None, help="default: the desk profile's epoch count")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--variants", nargs="+", default=["anatomy", "none", "random_anatomy", "swapped_anatomy"])
    args = p.parse_args()
    for seed in args.seeds:
        cohort = gen_cohort(5, args.samples, seed=seed, n_heldout=1)
        for v in args.variants:
            r = run_ablation(cohort, desk_config(), v, seed, epochs=args.epochs, measure_memory=False)
            print(f"seed {seed} {v:<16} seen {r['seen_loss']:7.2f} held-out {r['heldout_loss']:7.2f} "
                  f"2-way {r['two_way']:.3f} ({r['wall_s']:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
