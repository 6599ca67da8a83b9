"""Command-line entry point: ``sppc run | gp-train | sweep | export-plotdata | selftest``.

Exit codes: 0 ok, 2 config error, 3 solver failure, 4 threshold failure
(also used for a degraded GP fit and a failed self-test).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_THRESHOLD = 4

log = logging.getLogger("sppc")


def _load_config_file(path):
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ex.ConfigError(f"cannot read config file {path}: {exc}") from exc


def _run_dir(args, name):
    return Path(args.out) if args.out else ex.output_root() / name


def cmd_run(args):
    base = _load_config_file(args.config)
    experiment = args.experiment or (base or {}).get("experiment")
    if not experiment:
        raise ex.ConfigError("no experiment given; pass a preset name or a config file with 'experiment'")
    cfg = ex.resolve_config(experiment, args.set, base=base, seed=args.seed)
    out = _run_dir(args, experiment)
    summary = ex.run_experiment(cfg, out)
    _report(summary)
    print(f"outputs in {out}")
    return EXIT_OK if summary["ok"] else EXIT_THRESHOLD


def cmd_sweep(args):
    overrides = list(args.set)
    if args.trials is not None:
        overrides.append(f"sweep.trials={args.trials}")
    if args.workers is not None:
        overrides.append(f"sweep.workers={args.workers}")
    cfg = ex.resolve_config("dubins_obstacle_sweep", overrides, base=_load_config_file(args.config), seed=args.seed)
    out = _run_dir(args, "dubins_obstacle_sweep")
    summary = ex.run_experiment(cfg, out)
    _report(summary)
    print(f"outputs in {out}")
    return EXIT_OK if summary["ok"] else EXIT_THRESHOLD


def _report(summary):
    for name, s in summary.get("series", {}).items():
        print(f"{name:8s} final_error={s['final_error']:.4g} termination={s['termination']} statuses={s['statuses']}")
    for name, c in summary.get("thresholds", {}).items():
        flag = "PASS" if c["passed"] else "FAIL"
        print(f"{flag} {name}: final_error {c['final_error']:.4g} <= {c['max']}")
    if "sweep" in summary:
        s = summary["sweep"]
        print(f"trials={s['trials']} violation_fraction={s['violation_fraction']:.3f} "
              f"node_violations={s['node_violations']} solver_failures={s['solver_failures']}")


def cmd_gp_train(args):
    if args.system not in ("cartpole", "quadrotor"):
        raise ex.ConfigError("gp-train supports cartpole and quadrotor")
    if args.n < 1:
        raise ex.ConfigError("N must be at least 1")
    table = args.table
    cfg = ex.resolve_config(f"{'quad' if args.system == 'quadrotor' else 'cartpole'}_gp_episodic",
                            args.set + [f"gp.n_train={args.n}"], seed=args.seed)
    cfg["plant"] = {"true": f"table{table}_{args.system}_true", "nominal": f"table{table}_{args.system}_nominal"}
    true, nominal = ex._plant(cfg, "true"), ex._plant(cfg, "nominal")
    base = ex.SemiParametricModel(nominal)
    gp, fit = ex.train_gp(true, base, cfg, args.seed)
    out = Path(args.output) if args.output else ex.output_root() / f"gp_{args.system}_table{table}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"system": args.system, "plant": cfg["plant"], "seed": args.seed, "n_train": args.n}
    ex.write_text(out, ex.dump_json(ex.gp_model_dict(gp, fit, meta)))
    for j, (hp, lml) in enumerate(zip(gp.hyperparams, fit.log_marginal_likelihood)):
        ls = " ".join(f"{v:.4g}" for v in hp.lengthscales)
        print(f"output {j}: LML={lml:.4f} signal_std={hp.signal_std:.4g} noise_std={hp.noise_std:.4g} lengthscales=[{ls}]")
    print(f"model written to {out}")
    insufficient = args.n <= len(nominal.residual_inputs)
    if fit.degraded or insufficient:
        print("warning: hyperparameter fit degraded" + (" (insufficient data)" if insufficient else ""))
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_export(args):
    try:
        paths = ex.export_plotdata(args.run_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_selftest(args):
    results = selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_THRESHOLD


def selftest():
    """Quick oracle checks of the core numerics; returns (name, passed, detail) tuples."""
    from scipy.linalg import eigh_tridiagonal

    from .dynamics import PRESETS, CartPole, SemiParametricModel
    from .gpfull import GaussianProcess, KernelHyperparams, TrainingSet
    from .polybasis import differentiation_matrix, lg_nodes, quadrature_weights
    from .ssgp import SsgpState, sample_basis
    from .transcribe import OcProblem, check_gradients, transcribe

    out = []
    rng = np.random.default_rng(0)

    err = 0.0
    for K in (2, 5, 10, 20, 40):
        k = np.arange(1, K)
        beta = k / np.sqrt(4.0 * k**2 - 1.0)
        w_ref, V = eigh_tridiagonal(np.zeros(K), beta)
        x = lg_nodes(K)
        err = max(err, np.abs(x - w_ref).max(), np.abs(quadrature_weights(x) - 2.0 * V[0] ** 2).max())
    out.append(("lg nodes and weights vs Jacobi matrix", err < 1e-10, f"max error {err:.2e}"))

    K = 10
    x = lg_nodes(K)
    support = np.concatenate(([-1.0], x))
    c = rng.standard_normal(K + 1)
    D = differentiation_matrix(support)
    derr = np.abs(D @ np.polyval(c, support) - np.polyval(np.polyder(c), x)).max()
    out.append(("differentiation matrix on degree-K polynomial", derr < 1e-8, f"max error {derr:.2e}"))

    Z = rng.uniform(-1, 1, (15, 2))
    Y = np.sin(Z[:, :1] * 3)
    gp = GaussianProcess(TrainingSet(Z, Y), KernelHyperparams(1.0, 1e-9, np.array([0.7, 0.7])))
    ierr = np.abs(gp.predict_mean(Z) - Y).max()
    out.append(("GP interpolates training targets", ierr < 1e-6, f"max error {ierr:.2e}"))

    hp = KernelHyperparams(1.0, 0.1, np.ones(2))
    state = SsgpState(sample_basis(hp, 20, 1), 1, forgetting=0.95)
    A = state.A.copy()
    b = state.b.copy()
    for _ in range(30):
        z, y = rng.standard_normal(2), rng.standard_normal(1)
        phi = state.basis.feature_map(z)
        A = 0.95 * A + 0.05 * np.outer(phi, phi)
        b = 0.95 * b + 0.05 * np.outer(phi, y)
        state.online_update(z, y)
    w_ref = np.linalg.solve(A, b)
    werr = np.abs(state.weights - w_ref).max() / max(np.abs(w_ref).max(), 1e-300)
    out.append(("SSGP rank-1 updates vs dense recurrence", werr < 1e-8, f"relative error {werr:.2e}"))

    plant = CartPole(PRESETS["table1_cartpole_nominal"])
    Zg = rng.uniform(-1, 1, (20, 5))
    gp5 = GaussianProcess(TrainingSet(Zg, rng.standard_normal((20, 2))), KernelHyperparams(0.5, 0.1, np.ones(5)))
    model = SemiParametricModel(plant, gp5)
    prob = OcProblem(model, x0=np.zeros(4), xf=[0, 0, np.pi, 0], t0=0.0, tf=1.5, Q=np.eye(4), R=np.eye(1))
    nlp = transcribe(prob, K=6)
    g = check_gradients(nlp, nlp.linear_guess() + 0.1 * rng.standard_normal(nlp.n_var))
    gerr = max(g.values())
    out.append(("transcription Jacobian with GP residual vs central differences", gerr < 1e-5,
                f"max relative error {gerr:.2e}"))
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="sppc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (same layout as a resolved config.json)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. mpc.K=30; repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help=f"output directory (default ${ex.OUTPUT_ROOT_ENV}/<experiment>, else runs/)")

    p = sub.add_parser("run", help="run a preset experiment")
    p.add_argument("experiment", nargs="?", help=f"one of: {', '.join(sorted(ex.PRESET_CONFIGS))}")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Dubins obstacle Monte-Carlo sweep")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="worker processes")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gp-train", help="train and store a full GP residual model")
    p.add_argument("--system", default="cartpole")
    p.add_argument("--table", type=int, choices=(1, 2), default=1, help="parameter split")
    p.add_argument("-N", "--n", type=int, default=200, help="training samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="gp.* overrides")
    p.add_argument("-o", "--output", help="model file path")
    p.set_defaults(func=cmd_gp_train)

    p = sub.add_parser("export-plotdata", help="long-format plot CSVs from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
