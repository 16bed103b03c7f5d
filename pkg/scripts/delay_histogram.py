"""Initial-delay histogram of MILk against the wait-k point closest in DAL.

Reads the output directory of a finished sweep.

    python scripts/delay_histogram.py runs/sweep --lam 0.2
"""

import argparse
from pathlib import Path

from milkstream import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sweep_dir")
    ap.add_argument("--lam", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = Path(args.sweep_dir)
    records = harness.read_curves(root / "curves.csv")
    milk = next(r for r in records if r.method == "milk" and r.param == args.lam and r.seed == args.seed)
    waits = [r for r in records if r.method == "wait_k" and r.seed == args.seed and not r.failed]
    wk = min(waits, key=lambda r: abs(r.dal - milk.dal))
    paths = [root / "traces" / f"{harness.point_name(r.method, r.param, r.seed)}.jsonl" for r in (milk, wk)]
    hist = harness.initial_delay_histogram(paths)
    harness.write_histogram(hist, root / "delay_histogram.csv", root / "delay_histogram.svg")
    for (name, counts), r in zip(hist.items(), (milk, wk)):
        print(f"{name}: DAL {r.dal:.2f}, quality {r.quality:.3f}, "
              f"initial-delay variance {harness.histogram_variance(counts):.2f}")
    print(f"wrote {root / 'delay_histogram.svg'}")


if __name__ == "__main__":
    main()
