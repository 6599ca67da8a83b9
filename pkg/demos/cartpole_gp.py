"""Cart-pole swing-up with unmodeled damping: nominal model vs GP-corrected model.

Runs the episodic and MPC presets and prints the final errors. Outputs go to
$SPPC_OUTPUT_ROOT (default runs/).

    python demos/cartpole_gp.py
"""

import numpy as np

from sppc import experiments as ex


def main():
    root = ex.output_root()
    for name in ("cartpole_gp_episodic", "cartpole_gp_mpc"):
        cfg = ex.resolve_config(name)
        summary = ex.run_experiment(cfg, root / name)
        print(name)
        for series, s in summary["series"].items():
            angle = abs(s["final_state"][2] - np.pi)
            print(f"  {series:8s} final error {s['final_error']:.4f}  angle error {angle:.4f}  "
                  f"({s['termination']}, {s['iterations']} solves)")


if __name__ == "__main__":
    main()
