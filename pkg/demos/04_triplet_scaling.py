"""Time triplet matching against an all-pairs enumeration as the slot count doubles.

Matching relation slots to object slots by cosine argmax costs O(K N D); scoring
every ordered slot pair costs O(K N^2 D).

    python3 demos/04_triplet_scaling.py
"""

import argparse

from slotvsg.experiments import scaling_ratios


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="64,128,256")
    parser.add_argument("--relations", type=int, default=24)
    parser.add_argument("--repeats", type=int, default=15)
    args = parser.parse_args()

    ns = [int(n) for n in args.sizes.split(",")]
    match_r, pair_r, match_t, pair_t = scaling_ratios(ns, k=args.relations, repeats=args.repeats)
    print(f"{'N':>6} {'matcher ms':>12} {'all pairs ms':>14}")
    for n, a, b in zip(ns, match_t, pair_t):
        print(f"{n:>6} {1e3 * a:>12.3f} {1e3 * b:>14.3f}")
    print("time ratio per doubling, matcher:   ", [round(r, 2) for r in match_r])
    print("time ratio per doubling, all pairs: ", [round(r, 2) for r in pair_r])


if __name__ == "__main__":
    main()
