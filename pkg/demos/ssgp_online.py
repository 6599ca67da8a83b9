"""Online SSGP learning inside the MPC loop on the strongly mismatched cart pole.

The nominal model misses large parameter errors; the SSGP residual is
updated after every rollout of p steps. Takes a few minutes.

    python demos/ssgp_online.py
"""

from sppc import experiments as ex


def main():
    cfg = ex.resolve_config("cartpole_ssgp_mpc")
    summary = ex.run_experiment(cfg, ex.output_root() / "cartpole_ssgp_mpc")
    for series, s in summary["series"].items():
        print(f"{series:8s} final error {s['final_error']:.4f} at t={s['final_time']:.2f} "
              f"({s['termination']}, {s['model_updates']} model updates)")


if __name__ == "__main__":
    main()
