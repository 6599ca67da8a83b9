"""Episodic, MPC and online-learning MPC episodes on a true plant.

Every mode plans with the (semi-parametric) model and rolls the plan out on
the true plant with a zero-order hold at the integrator rate. In
``mpc_online`` mode the SSGP residual absorbs each rolled-out sample before
the next re-solve.
"""

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dynamics import rk4_step
from .nlpsolve import NlpSolveOptions, solve
from .ssgp import SsgpState
from .transcribe import interpolate_solution, transcribe

__all__ = ["EpisodeLog", "MpcConfig", "Plan", "run_episode", "warm_start"]

log = logging.getLogger(__name__)

MODES = ("episodic", "mpc", "mpc_online")


@dataclass(frozen=True)
class MpcConfig:
    """
    Episode settings.

    The planning problem's own ``tf`` is the target arrival time; re-solves
    use the shrinking window ``[t, max(tf, t + horizon_floor_steps * p * dt)]``
    and the episode stops at ``t_max`` at the latest.
    """

    mode: str = "mpc"
    p: int = 5
    dt: float = 0.01
    tol: float = 0.05
    t_max: float = 5.0
    K: int = 20
    warm_start: bool = True
    horizon_floor_steps: int = 10
    solver: NlpSolveOptions = field(default_factory=NlpSolveOptions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.tol <= 0 or self.t_max <= 0 or self.dt <= 0:
            raise ValueError("tol, t_max and dt must be positive")
        if self.K < 2:
            raise ValueError("collocation order must be at least 2")


@dataclass
class Plan:
    """One accepted NLP solution and the transcription it belongs to."""

    nlp: object
    x: np.ndarray
    status: str

    def controls_at(self, times):
        p = self.nlp.problem
        t = np.clip(times, p.t0, p.tf)
        return interpolate_solution(self.nlp, self.x, t)[1]

    def states_at(self, times):
        """States at `times`, clamped to the window; at or past tf this is X_f itself."""
        p = self.nlp.problem
        t = np.clip(np.atleast_1d(times), p.t0, p.tf)
        X, _ = interpolate_solution(self.nlp, self.x, t)
        Xf = self.nlp.unpack(self.x)[0][-1]
        X[t >= p.tf] = Xf
        return X


@dataclass
class EpisodeLog:
    mode: str
    seed: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    phase: np.ndarray
    plans: list
    statuses: list
    solver_iterations: list
    model_updates: int
    final_error: float
    total_cost: float
    termination: str
    state_names: tuple = ()
    control_names: tuple = ()
    wall_time: float = 0.0

    def __post_init__(self):
        if len(self.times) != len(self.states) or len(self.controls) != len(self.times) - 1:
            raise ValueError("times, states and controls lengths disagree")

    @property
    def n_iterations(self):
        return len(self.statuses)

    def to_csv(self):
        """One row per integrator step; the final state row carries NaN controls and phase -1."""
        n, m = self.states.shape[1], self.controls.shape[1]
        snames = self.state_names or tuple(f"x{i}" for i in range(n))
        cnames = self.control_names or tuple(f"u{j}" for j in range(m))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t",) + tuple(snames) + tuple(cnames) + ("phase",))
        for k, t in enumerate(self.times):
            if k < len(self.controls):
                u, ph = self.controls[k], int(self.phase[k])
            else:
                u, ph = np.full(m, np.nan), -1
            w.writerow([repr(float(t))] + [repr(float(a)) for a in self.states[k]]
                       + [repr(float(a)) for a in u] + [ph])
        return buf.getvalue()

    def summary(self):
        statuses = {s: self.statuses.count(s) for s in sorted(set(self.statuses))}
        return {
            "mode": self.mode,
            "seed": self.seed,
            "final_error": self.final_error,
            "total_cost": self.total_cost,
            "iterations": self.n_iterations,
            "statuses": statuses,
            "solver_iterations": list(self.solver_iterations),
            "model_updates": self.model_updates,
            "termination": self.termination,
            "steps": len(self.controls),
            "final_time": float(self.times[-1]),
            "final_state": [float(a) for a in self.states[-1]],
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def warm_start(previous, nlp, x0=None):
    """
    Re-sample a previous plan onto the node times of `nlp`.

    Query times are clamped to the previous window, so a horizon that
    extends past the old final time holds the old final state and control.
    X_0 is replaced by `x0` when given.
    """
    times = nlp.node_times()
    X = previous.states_at(times)
    U = previous.controls_at(times[1:-1])
    if x0 is not None:
        X[0] = x0
    return nlp.clip(nlp.pack(X, U))


def _cold_start(nlp):
    return nlp.linear_guess()


def _zoh_controls(plan, t_start, steps, dt, lower, upper):
    mid = t_start + (np.arange(steps) + 0.5) * dt
    return np.clip(plan.controls_at(mid), lower, upper)


def run_episode(problem, true_dynamics, model, cfg, seed=0, initial_guess=None, problem_hook=None):
    """
    Run one episode and return its :class:`EpisodeLog`.

    `problem.dynamics` is ignored in favour of `model`; `true_dynamics`
    only ever sees the applied controls.

    Parameters
    ----------
    initial_guess : callable, optional
        ``initial_guess(nlp) -> x`` used for cold starts instead of the
        straight-line guess.
    problem_hook : callable, optional
        ``problem_hook(problem, nlp, guess, model) -> problem`` called before
        every solve; if it returns a new problem, that one is transcribed and
        the guess re-packed into it. Used to refresh per-node constraint data.
    """
    if problem.dynamics is not model:
        problem = replace(problem, dynamics=model)
    online = cfg.mode == "mpc_online"
    if online and not isinstance(getattr(model, "residual", None), SsgpState):
        raise TypeError("mpc_online needs a SemiParametricModel with an SsgpState residual")
    if true_dynamics.state_dim != problem.state_dim or true_dynamics.control_dim != problem.control_dim:
        raise ValueError("true plant and problem dimensions disagree")

    wall = time.perf_counter()
    dt, p = cfg.dt, cfg.p
    t0 = problem.t0
    x = problem.x0.copy()
    states, controls, phase = [x.copy()], [], []
    plans, statuses, iters = [], [], []
    updates = 0
    cost = 0.0
    plan = None
    step = 0

    def apply(us, iteration):
        nonlocal x, cost, step, updates
        for u in us:
            x_next = rk4_step(true_dynamics, x, u, dt)
            if not np.all(np.isfinite(x_next)):
                raise FloatingPointError(f"true rollout diverged at t={t0 + step * dt:.3f}")
            cost += float(problem.running_cost(x, u)[0]) * dt
            if online:
                z = model.residual_input(x, u)[0]
                y = model.residual_targets(true_dynamics, x, u)
                model.residual.online_update(z, np.ravel(y))
                updates += 1
            controls.append(np.asarray(u, dtype=float))
            phase.append(iteration)
            x = x_next
            step += 1
            states.append(x.copy())
        if online and len(us):
            model.residual.solve_weights()

    def plan_from(t_now, tf, iteration):
        nonlocal plan
        window = problem.with_window(x, t_now, tf)
        nlp = transcribe(window, K=cfg.K)
        if plan is not None and cfg.warm_start:
            guess = warm_start(plan, nlp, x)
        elif initial_guess is not None:
            guess = nlp.clip(np.asarray(initial_guess(nlp), dtype=float))
        else:
            guess = _cold_start(nlp)
        if problem_hook is not None:
            window = problem_hook(window, nlp, guess, model)
            nlp = transcribe(window, K=cfg.K)
        sol = solve(nlp, guess, cfg.solver)
        log.info("iteration %d t=%.3f tf=%.3f: %s after %d inner / %d outer / %d evaluations, violation %.2e",
                 iteration, t_now, tf, sol.status, sol.iterations, sol.outer_iterations, sol.evaluations,
                 sol.eq_violation)
        statuses.append(sol.status)
        iters.append(sol.iterations)
        if sol.status == "converged" or plan is None:
            if sol.status != "converged":
                log.warning("iteration %d: solver %s with no previous plan; using its iterate", iteration, sol.status)
            plan = Plan(nlp, sol.x, sol.status)
        else:
            log.warning("iteration %d: solver %s; reusing previous control tail", iteration, sol.status)
        plans.append({
            "iteration": iteration,
            "t0": float(t_now),
            "tf": float(tf),
            "status": sol.status,
            "node_times": nlp.node_times(),
            "X": nlp.unpack(sol.x)[0],
            "U": nlp.unpack(sol.x)[1],
            "path_values": nlp.inequality(sol.x),
        })

    if cfg.mode == "episodic":
        plan_from(t0, problem.tf, 0)
        steps = int(round((problem.tf - t0) / dt))
        apply(_zoh_controls(plan, t0, steps, dt, problem.control_lower, problem.control_upper), 0)
        termination = "horizon"
    else:
        iteration = 0
        floor = cfg.horizon_floor_steps * p * dt
        max_steps = int(round((cfg.t_max - t0) / dt))
        termination = "t_max"
        while step < max_steps:
            if problem.error(x) <= cfg.tol:
                termination = "tolerance"
                break
            t_now = t0 + step * dt
            plan_from(t_now, max(problem.tf, t_now + floor), iteration)
            n_apply = min(p, max_steps - step)
            apply(_zoh_controls(plan, t_now, n_apply, dt, problem.control_lower, problem.control_upper), iteration)
            iteration += 1
        else:
            if problem.error(x) <= cfg.tol:
                termination = "tolerance"

    times = t0 + dt * np.arange(len(states))
    names = getattr(true_dynamics, "state_names", ()), getattr(true_dynamics, "control_names", ())
    return EpisodeLog(
        mode=cfg.mode,
        seed=int(seed),
        times=times,
        states=np.array(states),
        controls=np.array(controls).reshape(-1, problem.control_dim),
        phase=np.array(phase, dtype=int),
        plans=plans,
        statuses=statuses,
        solver_iterations=iters,
        model_updates=updates,
        final_error=problem.error(states[-1]),
        total_cost=cost,
        termination=termination,
        state_names=tuple(names[0]),
        control_names=tuple(names[1]),
        wall_time=time.perf_counter() - wall,
    )


def config_dict(cfg):
    """Plain-dict view of an :class:`MpcConfig` for JSON persistence."""
    return asdict(cfg)
