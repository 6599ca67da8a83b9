"""Dubins car around a circular obstacle with an uncertainty-inflated radius.

Runs a short sweep over sampled nominal parameters and prints per-trial
clearances; the full 50-trial sweep is ``sppc sweep``.

    python demos/dubins_obstacle.py [trials]
"""

import sys

from sppc.obstacles import SweepConfig, run_dubins_sweep


def main(trials=5):
    report = run_dubins_sweep(trials, seed=0, cfg=SweepConfig())
    for r in report.rows:
        print(f"trial {r['trial']}: b=({r['b1']:.3f}, {r['b2']:.3f}) min clearance {r['min_clearance']:+.4f} "
              f"node margin {r['min_node_margin']:+.1e} final error {r['final_error']:.4f}")
    s = report.summary()
    print(f"violation fraction {s['violation_fraction']:.2f}, node violations {s['node_violations']}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
