"""Experiment presets, config resolution and artifact writing for the CLI.

A config is a nested dict. Resolution is defaults, then the preset, then
dotted-key overrides; every key must already exist in the defaults, except
under ``thresholds`` which maps series names to a maximum final error.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .dynamics import (PRESETS, CartPole, Dubins, Quadrotor, SemiParametricModel, box_training_data,
                       generate_training_data)
from .gpfull import (
    GaussianProcess,
    HyperparamFit,
    KernelHyperparams,
    TrainingSet,
    log_marginal_likelihood,
    train_hyperparams,
)
from .mpcloop import MpcConfig, run_episode
from .nlpsolve import NlpSolveOptions
from .obstacles import SweepConfig, SweepReport, run_dubins_trial, sweep_nominals
from .ssgp import SsgpState, sample_basis
from .transcribe import OcProblem

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SPPC_OUTPUT_ROOT"

SYSTEMS = {"cartpole": CartPole, "quadrotor": Quadrotor, "dubins": Dubins}
SERIES = ("nominal", "exact", "gp", "ssgp")


class ConfigError(ValueError):
    """Invalid experiment name, key or value."""


class SolverFailure(RuntimeError):
    """An episode produced no usable plan or diverged."""


def _mpc_defaults():
    d = asdict(MpcConfig())
    d.pop("solver")
    return d


DEFAULTS = {
    "experiment": "",
    "seed": 0,
    "system": "cartpole",
    "plant": {"true": "table1_cartpole_true", "nominal": "table1_cartpole_nominal"},
    "problem": {
        "x0": [0.0, 0.0, 0.0, 0.0],
        "xf": [0.0, 0.0, float(np.pi), 0.0],
        "tf": 1.5,
        "Q_diag": [0.0, 0.0, 0.0, 0.0],
        "R_diag": [1.0],
        "terminal": "hard",
        "Qf_diag": None,
        "terminal_indices": None,
        "error_indices": [0, 2],
        "control_lower": None,
        "control_upper": None,
        "u_ref": None,
        "u_guess": None,
        "hover_controls": False,
    },
    "mpc": _mpc_defaults(),
    "solver": asdict(NlpSolveOptions()),
    "series": ["nominal"],
    "gp": {
        "n_train": 200,
        "restarts": 3,
        "noise_init": 1e-3,
        "lengthscale_init": 1.0,
        "amplitude": 1.0,
        "period": 4.0,
        "sample_every": 5,
        "model_path": None,
    },
    "ssgp": {
        "n_features": 100,
        "forgetting": 0.99,
        "signal_std": 1.0,
        "noise_std": 0.1,
        "lengthscales": None,
        "n_pretrain": 0,
        "pretrain_box": None,
        "fit_hyperparams": True,
        "amplitude": 1.0,
        "period": 4.0,
        "sample_every": 5,
    },
    "sweep": dict(asdict(SweepConfig()), trials=50, workers=1),
    "thresholds": {},
}

_FREE_FORM = {"thresholds"}

_CARTPOLE_EPISODIC = {
    "system": "cartpole",
    "problem": {"tf": 1.5},
    "mpc": {"mode": "episodic", "K": 40},
    "solver": {"mu0": 1000.0},
}
_CARTPOLE_MPC = {
    "system": "cartpole",
    "problem": {"tf": 1.5},
    "mpc": {"mode": "mpc", "K": 20, "p": 5, "dt": 0.01, "t_max": 1.5},
    "solver": {"mu0": 1000.0},
}
_QUAD_PROBLEM = {
    "x0": [-1.0, 1.0, 0.5] + [0.0] * 9,
    "xf": [0.5, -1.0, 1.5] + [0.0] * 9,
    "tf": 3.0,
    "Q_diag": [1.0, 1.0, 1.0] + [0.0] * 9,
    "R_diag": [1.0] * 4,
    "terminal": "cost",
    "Qf_diag": [1000.0] * 3 + [100.0] * 6 + [10.0] * 3,
    "error_indices": [0, 1, 2],
    "control_lower": [0.0] * 4,
    "hover_controls": True,
}

PRESET_CONFIGS = {
    "cartpole_exact_episodic": dict(_CARTPOLE_EPISODIC, series=["exact"],
                                    plant={"true": "table1_cartpole_nominal", "nominal": "table1_cartpole_nominal"},
                                    thresholds={"exact": 0.05}),
    "cartpole_gp_episodic": dict(_CARTPOLE_EPISODIC, series=["nominal", "gp"]),
    "cartpole_gp_mpc": dict(_CARTPOLE_MPC, series=["nominal", "gp"]),
    "cartpole_ssgp_mpc": dict(
        _CARTPOLE_MPC,
        plant={"true": "table2_cartpole_true", "nominal": "table2_cartpole_nominal"},
        series=["nominal", "ssgp"],
        mpc=dict(_CARTPOLE_MPC["mpc"], t_max=5.0),
        ssgp={"n_pretrain": 500, "pretrain_box": [[-1, -3, -1, -8, -15], [1, 3, 4.2, 8, 15]]},
        thresholds={"ssgp": 0.05},
    ),
    "quad_exact_mpc": {
        "system": "quadrotor",
        "plant": {"true": "table1_quadrotor_true", "nominal": "table1_quadrotor_true"},
        "problem": _QUAD_PROBLEM,
        "mpc": {"mode": "mpc", "K": 12, "p": 10, "dt": 0.01, "t_max": 5.0},
        "solver": {"mu0": 1000.0},
        "series": ["exact"],
        "thresholds": {"exact": 0.05},
    },
    "quad_gp_episodic": {
        "system": "quadrotor",
        "plant": {"true": "table1_quadrotor_true", "nominal": "table1_quadrotor_nominal"},
        "problem": _QUAD_PROBLEM,
        "mpc": {"mode": "episodic", "K": 20},
        "solver": {"mu0": 1000.0},
        "series": ["nominal", "gp"],
    },
    "quad_gp_mpc": {
        "system": "quadrotor",
        "plant": {"true": "table1_quadrotor_true", "nominal": "table1_quadrotor_nominal"},
        "problem": _QUAD_PROBLEM,
        "mpc": {"mode": "mpc", "K": 12, "p": 10, "dt": 0.01, "t_max": 5.0},
        "solver": {"mu0": 1000.0},
        "series": ["nominal", "gp"],
    },
    "quad_ssgp_mpc": {
        "system": "quadrotor",
        "plant": {"true": "table2_quadrotor_true", "nominal": "table2_quadrotor_nominal"},
        "problem": _QUAD_PROBLEM,
        "mpc": {"mode": "mpc", "K": 12, "p": 10, "dt": 0.01, "t_max": 5.0},
        "solver": {"mu0": 1000.0},
        "series": ["nominal", "ssgp"],
        "ssgp": {"n_pretrain": 200},
        "thresholds": {"ssgp": 0.05},
    },
    "dubins_obstacle_sweep": {"system": "dubins", "series": []},
}


# ---------------------------------------------------------------- config


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in out:
            valid = ", ".join(sorted(out))
            raise ConfigError(f"unknown key '{where}'; valid keys here: {valid}")
        if isinstance(out[key], dict) and key not in _FREE_FORM:
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' is a section, not a value")
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text):
    """'a.b=value' -> (['a', 'b'], value); the value is read as JSON when it parses."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def _nest(keys, val):
    out = val
    for k in reversed(keys):
        out = {k: out}
    return out


def resolve_config(experiment, overrides=(), base=None, seed=None):
    """
    Fully explicit config for `experiment`.

    Parameters
    ----------
    overrides : sequence of str
        Dotted ``key=value`` strings applied last.
    base : dict, optional
        A config file's contents, applied between the preset and overrides.
    """
    if experiment not in PRESET_CONFIGS:
        raise ConfigError(f"unknown experiment '{experiment}'; valid: {', '.join(sorted(PRESET_CONFIGS))}")
    cfg = _merge(DEFAULTS, PRESET_CONFIGS[experiment])
    if experiment == "dubins_obstacle_sweep":
        cfg["plant"] = {"true": "dubins_true", "nominal": "dubins_true"}
    if base:
        cfg = _merge(cfg, {k: v for k, v in base.items() if k != "experiment"})
    for text in overrides:
        keys, val = parse_override(text)
        cfg = _merge(cfg, _nest(keys, val))
    cfg["experiment"] = experiment
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["system"] not in SYSTEMS:
        raise ConfigError(f"system must be one of {sorted(SYSTEMS)}")
    for role in ("true", "nominal"):
        if cfg["plant"][role] not in PRESETS:
            raise ConfigError(f"plant.{role} must be one of {sorted(PRESETS)}")
    for s in cfg["series"]:
        if s not in SERIES:
            raise ConfigError(f"series entries must be among {SERIES}")
    for s, v in cfg["thresholds"].items():
        if s not in cfg["series"]:
            raise ConfigError(f"threshold for series '{s}' that is not run")
        if not isinstance(v, (int, float)) or v <= 0:
            raise ConfigError(f"threshold for '{s}' must be a positive number")
    box = cfg["ssgp"]["pretrain_box"]
    if box is not None and cfg["system"] != "dubins":
        plant = _plant(cfg, "true")
        width = plant.state_dim + plant.control_dim
        if np.shape(box) != (2, width):
            raise ConfigError(f"ssgp.pretrain_box must be [lower, upper] with {width} entries each")
    try:
        mpc_config(cfg)
        if cfg["system"] == "dubins":
            sweep_config(cfg)
        else:
            build_problem(cfg, SemiParametricModel(_plant(cfg, "nominal")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def mpc_config(cfg):
    solver = NlpSolveOptions(**cfg["solver"])
    return MpcConfig(solver=solver, **cfg["mpc"])


def sweep_config(cfg):
    s = dict(cfg["sweep"])
    s.pop("trials")
    s.pop("workers")
    names = {f.name for f in fields(SweepConfig)}
    return SweepConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items() if k in names})


# ---------------------------------------------------------------- models


def _plant(cfg, role):
    return SYSTEMS[cfg["system"]](PRESETS[cfg["plant"][role]])


def build_problem(cfg, model):
    p = cfg["problem"]
    n, m = model.state_dim, model.control_dim
    plant = model.parametric
    u_ref, u_guess = p["u_ref"], p["u_guess"]
    upper = p["control_upper"]
    if p["hover_controls"]:
        hover = np.full(m, plant.hover_thrust)
        u_ref = hover if u_ref is None else u_ref
        u_guess = hover if u_guess is None else u_guess
        upper = 4.0 * hover if upper is None else upper
    return OcProblem(
        model,
        x0=p["x0"],
        xf=p["xf"],
        t0=0.0,
        tf=p["tf"],
        Q=np.diag(np.broadcast_to(np.asarray(p["Q_diag"], dtype=float), (n,))),
        R=np.diag(np.broadcast_to(np.asarray(p["R_diag"], dtype=float), (m,))),
        terminal=p["terminal"],
        Qf=None if p["Qf_diag"] is None else np.diag(np.asarray(p["Qf_diag"], dtype=float)),
        terminal_indices=p["terminal_indices"],
        error_indices=p["error_indices"],
        control_lower=p["control_lower"],
        control_upper=upper,
        u_ref=u_ref,
        u_guess=u_guess,
    )


def train_gp(true, base, cfg, seed):
    """Full GP on rollout data from the true plant; returns (GaussianProcess, HyperparamFit)."""
    g = cfg["gp"]
    data = generate_training_data(true, base, g["n_train"], seed=seed, amplitude=g["amplitude"],
                                  period=g["period"], sample_every=g["sample_every"])
    init = KernelHyperparams(max(float(np.std(data.targets)), 1e-3), g["noise_init"],
                             np.full(data.input_dim, g["lengthscale_init"]))
    if len(data) < 2:
        # nothing to fit; keep the initial guess and flag the result
        log.warning("%d training sample(s); hyperparameters left at their initial values", len(data))
        hps = [init] * data.output_dim
        lml = [log_marginal_likelihood(data.inputs, data.targets[:, j], init) for j in range(data.output_dim)]
        fit = HyperparamFit(hps, lml, degraded=True)
    else:
        fit = train_hyperparams(data, init, restarts=g["restarts"], seed=seed)
    return GaussianProcess(data, fit.hyperparams), fit


def gp_model_dict(gp, fit, meta):
    return dict(meta, inputs=gp.data.inputs.tolist(), targets=gp.data.targets.tolist(),
                hyperparams=[hp.to_dict() for hp in gp.hyperparams],
                log_marginal_likelihood=[float(v) for v in fit.log_marginal_likelihood],
                degraded=bool(fit.degraded))


def load_gp_model(path):
    d = json.loads(Path(path).read_text())
    data = TrainingSet(np.asarray(d["inputs"]), np.asarray(d["targets"]))
    return GaussianProcess(data, [KernelHyperparams.from_dict(h) for h in d["hyperparams"]])


def build_ssgp(true, base, cfg, seed):
    """SSGP residual: hyperparameters fit on an initial batch when one is configured, then batch-initialized."""
    s = cfg["ssgp"]
    d, q = len(base.input_indices), len(base.output_indices)
    ls = np.ones(d) if s["lengthscales"] is None else np.asarray(s["lengthscales"], dtype=float)
    hp = KernelHyperparams(s["signal_std"], s["noise_std"], ls)
    data = None
    scale = None
    if s["n_pretrain"] > 0:
        if s["pretrain_box"] is not None:
            lower, upper = s["pretrain_box"]
            data = box_training_data(true, base, s["n_pretrain"], lower, upper, seed=seed)
        else:
            data = generate_training_data(true, base, s["n_pretrain"], seed=seed, amplitude=s["amplitude"],
                                          period=s["period"], sample_every=s["sample_every"])
        scale = np.maximum(data.targets.std(axis=0), 1e-6)
        if s["fit_hyperparams"]:
            scaled = TrainingSet(data.inputs, data.targets / scale)
            fit = train_hyperparams(scaled, KernelHyperparams(1.0, 0.1, ls), restarts=3, seed=seed, shared=True)
            hp = fit.hyperparams[0]
    basis = sample_basis(hp, s["n_features"], seed)
    if data is None:
        return SsgpState(basis, q, forgetting=s["forgetting"])
    return SsgpState.batch_fit(data, basis, forgetting=s["forgetting"], output_scale=scale)


def build_model(series, cfg, seed):
    true = _plant(cfg, "true")
    nominal = _plant(cfg, "nominal")
    base = SemiParametricModel(nominal)
    if series == "nominal":
        return base
    if series == "exact":
        return SemiParametricModel(true)
    if series == "gp":
        if cfg["gp"]["model_path"]:
            return SemiParametricModel(nominal, load_gp_model(cfg["gp"]["model_path"]))
        gp, _ = train_gp(true, base, cfg, seed)
        return SemiParametricModel(nominal, gp)
    return SemiParametricModel(nominal, build_ssgp(true, base, cfg, seed))


def series_mode(series, cfg):
    mode = cfg["mpc"]["mode"]
    return "mpc_online" if series == "ssgp" and mode != "episodic" else mode


def run_series(series, cfg):
    """Build the model for `series` and run one episode on the true plant."""
    seed = cfg["seed"]
    model = build_model(series, cfg, seed)
    problem = build_problem(cfg, model)
    mcfg = replace(mpc_config(cfg), mode=series_mode(series, cfg))
    try:
        return run_episode(problem, _plant(cfg, "true"), model, mcfg, seed=seed)
    except FloatingPointError as exc:
        raise SolverFailure(f"{series}: {exc}") from exc


# ---------------------------------------------------------------- artifacts


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path, text):
    Path(path).write_text(text, newline="")


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def output_root(cli_value=None):
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_experiment(cfg, out_dir):
    """
    Run every series of a resolved config, writing CSVs, the resolved config
    and a summary with a sha256 manifest.

    Returns the summary dict; ``summary['ok']`` is False when a threshold fails.
    Raises SolverFailure when an episode has no converged solve at all.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", dump_json(cfg))
    if cfg["system"] == "dubins":
        return _run_sweep_experiment(cfg, out)
    results, timing = {}, {}
    files = ["config.json"]
    for name in cfg["series"]:
        episode = run_series(name, cfg)
        if "converged" not in episode.statuses:
            raise SolverFailure(f"series '{name}': no solve converged ({episode.statuses})")
        write_text(out / f"{name}.csv", episode.to_csv())
        files.append(f"{name}.csv")
        results[name] = episode.summary()
        timing[name] = round(episode.wall_time, 3)
    checks = {}
    for name, limit in sorted(cfg["thresholds"].items()):
        err = results[name]["final_error"]
        checks[name] = {"final_error": err, "max": limit, "passed": bool(err <= limit)}
    summary = {
        "experiment": cfg["experiment"],
        "seed": cfg["seed"],
        "series": results,
        "thresholds": checks,
        "ok": all(c["passed"] for c in checks.values()),
        "wall_time": timing,
        "manifest": {f: sha256(out / f) for f in files},
    }
    write_text(out / "summary.json", dump_json(summary))
    return summary


def _trial_job(args):
    cfg, b, basis_seed, opts = args
    try:
        episode, row = run_dubins_trial(cfg, b, basis_seed, opts)
        return episode.to_csv(), row
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("trial aborted: %s", exc)
        return None, {"b1": b[0], "b2": b[1], "min_clearance": float("nan"), "min_node_margin": float("nan"),
                      "final_error": float("nan"), "status": "aborted", "violations": -1, "solver_failures": 1}


def run_sweep(scfg, trials, seed, workers=1, opts=None):
    """Dubins sweep with optional process-level parallelism; returns (SweepReport, trajectory CSV texts)."""
    jobs = [(scfg, b, s, opts) for b, s in sweep_nominals(scfg, trials, seed)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    report = SweepReport(scfg, seed)
    for i, (_, row) in enumerate(results):
        row["trial"] = i
        report.rows.append(row)
    return report, [text for text, _ in results]


def _run_sweep_experiment(cfg, out):
    sw = cfg["sweep"]
    report, texts = run_sweep(sweep_config(cfg), sw["trials"], cfg["seed"], workers=sw["workers"],
                              opts=NlpSolveOptions(**dict(cfg["solver"], mu0=sw["mu0"],
                                                          constraint_tol=sw["constraint_tol"])))
    files = ["config.json", "sweep.csv"]
    write_text(out / "sweep.csv", report.to_csv())
    for i, text in enumerate(texts):
        if text is not None:
            write_text(out / f"trial_{i:03d}.csv", text)
            files.append(f"trial_{i:03d}.csv")
    s = report.summary()
    summary = {
        "experiment": cfg["experiment"],
        "seed": cfg["seed"],
        "sweep": {k: v for k, v in s.items() if k != "config"},
        "ok": s["node_violations"] == 0 and s["violation_fraction"] <= 0.05,
        "manifest": {f: sha256(out / f) for f in files},
    }
    write_text(out / "summary.json", dump_json(summary))
    return summary


# ---------------------------------------------------------------- plot data


def export_plotdata(run_dir):
    """
    Long-format (t, series, variable, value) CSVs for states and controls.

    Values are copied verbatim from the trajectory CSVs, so re-export is
    byte-identical. Returns the written paths.
    """
    run = Path(run_dir)
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing {cfg_path}; expected config.json and one <series>.csv per series")
    cfg = json.loads(cfg_path.read_text())
    series = list(cfg.get("series", []))
    expected = [run / f"{s}.csv" for s in series]
    missing = [str(p) for p in expected if not p.exists()]
    if missing or not series:
        raise FileNotFoundError("missing run files: " + (", ".join(missing) or "no series in config.json"))
    system = SYSTEMS[cfg["system"]]
    families = {"states": set(system.state_names), "controls": set(system.control_names)}
    written = []
    for family, names in families.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "series", "variable", "value"))
        for s, path in zip(series, expected):
            rows = list(csv.reader(io.StringIO(path.read_text())))
            header = rows[0]
            cols = [j for j, h in enumerate(header) if h in names]
            for row in rows[1:]:
                for j in cols:
                    if family == "controls" and row[-1] == "-1":
                        continue
                    w.writerow((row[0], s, header[j], row[j]))
        target = run / f"plot_{family}.csv"
        write_text(target, buf.getvalue())
        written.append(target)
    return written
