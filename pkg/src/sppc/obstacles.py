"""Circular obstacle constraints with an uncertainty-inflated radius, and the
Dubins Monte-Carlo sweep built on them.

The constraint at each collocation node is

    |p - c| - (O_r + B_r + U_r) >= 0

where U_r is the kappa-sigma extent of the propagated position covariance
along the body-to-obstacle direction. U_r is computed from the warm-start
guess before each solve and held fixed inside it.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dynamics import PRESETS, Dubins, DubinsParams, SemiParametricModel
from .gpfull import KernelHyperparams, TrainingSet, train_hyperparams
from .mpcloop import MpcConfig, run_episode
from .nlpsolve import NlpSolveOptions
from .ssgp import SsgpState, sample_basis
from .transcribe import OcProblem

__all__ = [
    "Obstacle",
    "ObstacleConstraint",
    "SweepConfig",
    "SweepReport",
    "UncertaintyInputs",
    "obstacle_constraint",
    "propagate_covariance",
    "run_dubins_sweep",
    "sweep_nominals",
    "uncertainty_radius",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class UncertaintyInputs:
    position_cov: np.ndarray
    velocity_cov: np.ndarray
    cross_cov: np.ndarray = None
    dt: float = 0.1
    kappa: float = 2.0

    def __post_init__(self):
        P = np.asarray(self.position_cov, dtype=float)
        V = np.asarray(self.velocity_cov, dtype=float)
        C = np.zeros_like(P) if self.cross_cov is None else np.asarray(self.cross_cov, dtype=float)
        for name, M in (("position", P), ("velocity", V)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} covariance must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} covariance must be positive semidefinite")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        object.__setattr__(self, "position_cov", P)
        object.__setattr__(self, "velocity_cov", V)
        object.__setattr__(self, "cross_cov", C)


def obstacle_constraint(position, obstacle, B_r, U_r):
    """Signed clearance |p - c| - (O_r + B_r + U_r); feasible iff >= 0."""
    d = np.linalg.norm(np.asarray(position, dtype=float) - obstacle.center, axis=-1)
    return d - (obstacle.radius + B_r + U_r)


def propagate_covariance(inputs):
    """
    One-step position covariance Sigma_x0 + Sigma_v dt^2 + 2 Sigma_xv.

    The cross term carries no dt factor; it is applied as written and
    defaults to zero. Negative eigenvalues left after symmetrizing are
    clamped to zero.
    """
    S = inputs.position_cov + inputs.velocity_cov * inputs.dt**2 + 2.0 * inputs.cross_cov
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() < 0:
        log.info("propagated covariance not PSD (min eigenvalue %.3e); clamping", w.min())
        S = (V * np.maximum(w, 0.0)) @ V.T
    return S


def uncertainty_radius(cov, direction, kappa=2.0):
    """kappa * sqrt(d^T Sigma d) for a unit direction d."""
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    q = float(d @ np.asarray(cov, dtype=float) @ d)
    if q < -1e-12:
        raise ValueError("covariance is not positive semidefinite along the direction")
    return kappa * np.sqrt(max(q, 0.0))


class ObstacleConstraint:
    """
    Path constraint for :func:`sppc.transcribe.transcribe`: one clearance per
    interior node, with a fixed per-node uncertainty radius.
    """

    size = 1

    def __init__(self, obstacle, buffer_radius=0.1, position_indices=(0, 1), radii=0.0):
        self.obstacle = obstacle
        self.buffer_radius = float(buffer_radius)
        self.position_indices = tuple(position_indices)
        self.radii = np.asarray(radii, dtype=float)

    def with_radii(self, radii):
        return ObstacleConstraint(self.obstacle, self.buffer_radius, self.position_indices, radii)

    def __call__(self, X, U):
        P = np.asarray(X)[:, list(self.position_indices)]
        val = obstacle_constraint(P, self.obstacle, self.buffer_radius, self.radii)
        return val[:, None]

    def jacobian(self, X, U):
        X = np.asarray(X)
        P = X[:, list(self.position_indices)]
        diff = P - self.obstacle.center
        dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        Gx = np.zeros((X.shape[0], 1, X.shape[1]))
        Gx[:, 0, list(self.position_indices)] = diff / dist[:, None]
        Gu = np.zeros((X.shape[0], 1, np.asarray(U).shape[1]))
        return Gx, Gu


def node_radii(model, X, U, node_times, obstacle, position_indices=(0, 1), kappa=2.0):
    """
    Uncertainty radius at each interior node of a guessed trajectory.

    Position covariance starts at zero at X_0 and accumulates the velocity
    variance of the learned residual over each node gap; without a learned
    residual the velocity covariance, and so every radius, is zero.
    """
    K = U.shape[0]
    radii = np.zeros(K)
    residual = getattr(model, "residual", None)
    if residual is None:
        return radii
    pos = list(position_indices)
    rows = [list(model.output_indices).index(i) for i in pos]
    _, var = residual.predict(model.residual_input(X[1:-1], U))
    var = np.atleast_2d(var)
    Sigma = np.zeros((2, 2))
    for k in range(K):
        dt = node_times[k + 1] - node_times[k]
        Sigma = propagate_covariance(UncertaintyInputs(Sigma, np.diag(var[k, rows]), dt=dt, kappa=kappa))
        diff = obstacle.center - X[k + 1, pos]
        norm = np.linalg.norm(diff)
        direction = diff / norm if norm > 1e-12 else np.array([1.0, 0.0])
        radii[k] = uncertainty_radius(Sigma, direction, kappa)
    return radii


def uncertainty_hook(obstacle, kappa=2.0, position_indices=(0, 1), enabled=True):
    """
    Pre-solve hook for :func:`run_episode` that refreshes the per-node radii
    of every ObstacleConstraint from the guess the solve will start from.
    """

    def hook(problem, nlp, guess, model):
        X, U = nlp.unpack(guess)
        if enabled:
            radii = node_radii(model, X, U, nlp.node_times(), obstacle, position_indices, kappa)
        else:
            radii = np.zeros(U.shape[0])
        cons = tuple(c.with_radii(radii) if isinstance(c, ObstacleConstraint) else c for c in problem.path_constraints)
        return replace(problem, path_constraints=cons)

    return hook


@dataclass(frozen=True)
class SweepConfig:
    start: tuple = (5.0, 5.0)
    goal: tuple = (2.0, -2.0)
    obstacle_center: tuple = (3.5, 1.5)
    obstacle_radius: float = 2.0
    buffer_radius: float = 0.1
    kappa: float = 2.0
    use_uncertainty: bool = True
    b_true: float = 0.3
    b_mean: float = 0.3
    b_std: float = 0.3
    b_limit: float = 0.9
    fixed_nominal: bool = False
    tf: float = 5.0
    t_max: float = 7.0
    K: int = 15
    p: int = 50
    horizon_floor_steps: int = 1
    dt: float = 0.01
    tol: float = 0.05
    control_bound: float = 10.0
    control_weights: tuple = (1.0, 0.1)
    n_features: int = 50
    n_pretrain: int = 200
    fit_hyperparams: bool = True
    forgetting: float = 0.99
    signal_std: float = 0.3
    noise_std: float = 0.01
    lengthscales: tuple = (1.0, 2.0, 2.0)
    detour_side: float = 1.0
    mu0: float = 1000.0
    constraint_tol: float = 1e-7


@dataclass
class SweepReport:
    config: SweepConfig
    seed: int
    rows: list = field(default_factory=list)

    @property
    def trials(self):
        return len(self.rows)

    def to_csv(self):
        cols = ("trial", "b1", "b2", "min_clearance", "min_node_margin", "final_error", "status",
                "violations", "solver_failures")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
        return buf.getvalue()

    def summary(self):
        clear = np.array([r["min_clearance"] for r in self.rows], dtype=float)
        margins = np.array([r["min_node_margin"] for r in self.rows], dtype=float)
        finite = clear[np.isfinite(clear)]
        # aborted trials carry NaN and count as violations
        return {
            "trials": self.trials,
            "seed": self.seed,
            "violation_fraction": float(np.mean(~(clear >= -1e-2))),
            "node_violations": int(np.sum(~(margins >= -1e-6))),
            "aborted": int(sum(r["status"] == "aborted" for r in self.rows)),
            "clearance_quantiles": {
                q: float(np.quantile(finite, float(q))) for q in ("0.0", "0.05", "0.5", "0.95", "1.0")
            } if finite.size else {},
            "min_node_margin": float(np.nanmin(margins)) if np.isfinite(margins).any() else float("nan"),
            "mean_final_error": float(np.nanmean([r["final_error"] for r in self.rows]))
            if finite.size else float("nan"),
            "solver_failures": int(sum(r["solver_failures"] for r in self.rows)),
            "config": asdict(self.config),
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _sample_b(rng, cfg):
    while True:
        b = rng.normal(cfg.b_mean, cfg.b_std)
        if abs(b) < cfg.b_limit:
            return float(b)


def excitation_data(true_plant, model, n, rng, heading, speed_max, turn_max):
    """
    Residual samples at uniformly drawn (heading, speed, turn): heading within
    pi of the initial one, controls over the whole admissible box. Used to
    initialize the SSGP before the episode.
    """
    X = np.zeros((n, 3))
    X[:, 2] = heading + rng.uniform(-np.pi, np.pi, n)
    U = np.column_stack((rng.uniform(-speed_max, speed_max, n), rng.uniform(-turn_max, turn_max, n)))
    return TrainingSet(model.residual_input(X, U), model.residual_targets(true_plant, X, U))


def detour_guess(cfg):
    """Cold start bending around one side of the obstacle so the solver does not sit on the symmetric chord."""
    start, goal = np.asarray(cfg.start, dtype=float), np.asarray(cfg.goal, dtype=float)
    center = np.asarray(cfg.obstacle_center, dtype=float)
    chord = goal - start
    normal = cfg.detour_side * np.array([-chord[1], chord[0]]) / np.linalg.norm(chord)
    clearance = cfg.obstacle_radius + cfg.buffer_radius + 0.5

    def guess(nlp):
        p = nlp.problem
        t = nlp.node_times()
        s = (t - p.t0) / (p.tf - p.t0)
        line = (1 - s)[:, None] * p.x0[:2] + s[:, None] * goal
        # push the straight line outwards to clear the obstacle
        along = center + normal * clearance - (start + goal) / 2.0
        bump = np.sin(np.pi * s)[:, None] * along[None, :]
        P = line + bump
        V = np.gradient(P, t, axis=0)
        heading = np.unwrap(np.arctan2(V[:, 1], V[:, 0]))
        X = np.column_stack((P, heading))
        X[0] = p.x0
        speed = np.linalg.norm(V, axis=1)
        omega = np.gradient(heading, t)
        U = np.column_stack((speed, omega))[1:-1]
        return nlp.clip(nlp.pack(X, U))

    return guess


def run_dubins_trial(cfg, b_nominal, seed=0, opts=None):
    """One mpc_online episode around the obstacle; returns (EpisodeLog, row dict)."""
    true = Dubins(replace(PRESETS["dubins_true"], b_1=cfg.b_true, b_2=cfg.b_true))
    nominal = Dubins(DubinsParams(b_nominal[0], b_nominal[1]))
    start, goal = np.asarray(cfg.start, dtype=float), np.asarray(cfg.goal, dtype=float)
    heading = float(np.arctan2(*(goal - start)[::-1]))
    hp = KernelHyperparams(cfg.signal_std, cfg.noise_std, np.asarray(cfg.lengthscales, dtype=float))
    model = SemiParametricModel(nominal)
    rng = np.random.default_rng(seed)
    data = excitation_data(true, model, cfg.n_pretrain, rng, heading, cfg.control_bound, cfg.control_bound)
    scale = np.maximum(data.targets.std(axis=0), 1e-6)
    if cfg.fit_hyperparams:
        scaled = TrainingSet(data.inputs, data.targets / scale)
        init = KernelHyperparams(1.0, cfg.noise_std, hp.lengthscales)
        hp = train_hyperparams(scaled, init, restarts=1, seed=seed, shared=True).hyperparams[0]
    basis = sample_basis(hp, cfg.n_features, seed)
    ssgp = SsgpState.batch_fit(data, basis, forgetting=cfg.forgetting, output_scale=scale)
    model = SemiParametricModel(nominal, ssgp)
    obstacle = Obstacle(np.asarray(cfg.obstacle_center, dtype=float), cfg.obstacle_radius)
    bound = cfg.control_bound
    problem = OcProblem(
        model,
        x0=[start[0], start[1], heading],
        xf=[goal[0], goal[1], 0.0],
        t0=0.0,
        tf=cfg.tf,
        Q=np.zeros((3, 3)),
        R=np.diag(cfg.control_weights),
        terminal_indices=(0, 1),
        error_indices=(0, 1),
        control_lower=[-bound, -bound],
        control_upper=[bound, bound],
        path_constraints=(ObstacleConstraint(obstacle, cfg.buffer_radius),),
    )
    mcfg = MpcConfig(mode="mpc_online", p=cfg.p, dt=cfg.dt, tol=cfg.tol, t_max=cfg.t_max, K=cfg.K,
                     horizon_floor_steps=cfg.horizon_floor_steps,
                     solver=opts or NlpSolveOptions(mu0=cfg.mu0, constraint_tol=cfg.constraint_tol))
    hook = uncertainty_hook(obstacle, cfg.kappa, enabled=cfg.use_uncertainty)
    episode = run_episode(problem, true, model, mcfg, seed=seed, initial_guess=detour_guess(cfg), problem_hook=hook)
    clearance = obstacle_constraint(episode.states[:, :2], obstacle, cfg.buffer_radius, 0.0)
    margins = [
        float(np.min(p["path_values"])) for p in episode.plans
        if p["status"] == "converged" and p.get("path_values") is not None and len(p["path_values"])
    ]
    row = {
        "b1": b_nominal[0],
        "b2": b_nominal[1],
        "min_clearance": float(clearance.min()),
        "min_node_margin": min(margins) if margins else 0.0,
        "final_error": episode.final_error,
        "status": episode.termination,
        "violations": int(np.sum(clearance < -1e-2)),
        "solver_failures": sum(s != "converged" for s in episode.statuses),
    }
    return episode, row


def sweep_nominals(cfg, trials, seed):
    """
    Per-trial (nominal b pair, basis seed), each from its own stream spawned
    from `seed`; independent of how trials are later scheduled.
    """
    out = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        if cfg.fixed_nominal:
            b = (cfg.b_true, cfg.b_true)
        else:
            b = (_sample_b(rng, cfg), _sample_b(rng, cfg))
        out.append((b, int(rng.integers(2**31))))
    return out


def run_dubins_sweep(trials, seed=0, cfg=None, opts=None, keep_episodes=False):
    """
    Monte-Carlo sweep over nominal parameters b1, b2 ~ N(b_mean, b_std^2),
    resampled while |b| >= b_limit; the true plant uses b_true.

    Solver failures are counted per trial; a trial whose rollout diverges is
    recorded as 'aborted' and the sweep continues.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    cfg = cfg or SweepConfig()
    report = SweepReport(cfg, seed)
    episodes = []
    for i, (b, basis_seed) in enumerate(sweep_nominals(cfg, trials, seed)):
        try:
            episode, row = run_dubins_trial(cfg, b, basis_seed, opts)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("trial %d aborted: %s", i, exc)
            episode, row = None, {
                "b1": b[0], "b2": b[1], "min_clearance": float("nan"), "min_node_margin": float("nan"),
                "final_error": float("nan"), "status": "aborted", "violations": -1, "solver_failures": 1,
            }
        row["trial"] = i
        report.rows.append(row)
        if keep_episodes:
            episodes.append(episode)
    return (report, episodes) if keep_episodes else report
