"""Default latency-quality sweep on marker_lookahead, followed by a short curve summary.

    python scripts/run_sweep.py --out runs/sweep [--config my.ini]
"""

import argparse
import json
from pathlib import Path

from scipy.stats import spearmanr

from milkstream import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    cfg = harness.apply_overrides(cfg, out=args.out)
    records = harness.run_sweep(cfg, progress=lambda r: print(",".join(r.csv_row()), flush=True))

    milk = sorted((r for r in records if r.method == "milk" and not r.failed), key=lambda r: r.param)
    if len(milk) > 2:
        rho = spearmanr([r.param for r in milk], [r.dal for r in milk]).statistic
        print(f"Spearman(lambda, DAL) over {len(milk)} MILk points: {rho:.3f}")
    log = [json.loads(x) for x in (Path(args.out) / "sweep_log.jsonl").read_text().splitlines()]
    for rec in log:
        if "initial_delay_variance" in rec:
            print(f"{rec['point']:>16}  expected DAL {rec['expected_dal']:6.2f}  "
                  f"initial-delay variance {rec['initial_delay_variance']:6.2f}")


if __name__ == "__main__":
    main()
