"""Benchmark plants, semi-parametric composition, RK4 rollouts and data generation.

Vector fields are batched: ``f(x, u)`` accepts ``x`` of shape (..., n) and
``u`` of shape (..., m) and returns (..., n). ``jacobian(x, u)`` returns the
pair (df/dx of shape (..., n, n), df/du of shape (..., n, m)).
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .gpfull import TrainingSet

__all__ = [
    "CartPole",
    "CartPoleParams",
    "Dubins",
    "DubinsParams",
    "PRESETS",
    "Quadrotor",
    "QuadrotorParams",
    "SemiParametricModel",
    "generate_training_data",
    "rk4_rollout",
    "rk4_step",
]

log = logging.getLogger(__name__)

GRAVITY = 9.81


@dataclass(frozen=True)
class CartPoleParams:
    m_c: float = 0.5
    m_p: float = 0.5
    l: float = 0.6
    b_1: float = 0.0
    b_2: float = 0.0
    g: float = GRAVITY

    def __post_init__(self):
        if min(self.m_c, self.m_p, self.l) <= 0:
            raise ValueError("cart pole masses and length must be positive")
        if min(self.b_1, self.b_2) < 0:
            raise ValueError("dampings must be nonnegative")


@dataclass(frozen=True)
class QuadrotorParams:
    m: float = 1.0
    J_x: float = 8.1e-3
    J_y: float = 8.1e-3
    J_z: float = 14.2e-3
    L: float = 0.24
    g: float = GRAVITY
    yaw_coeff: float = 0.05

    def __post_init__(self):
        if min(self.m, self.J_x, self.J_y, self.J_z, self.L, self.g) <= 0:
            raise ValueError("quadrotor parameters must be positive")


@dataclass(frozen=True)
class DubinsParams:
    b_1: float = 0.3
    b_2: float = 0.3
    # which parameter scales the heading-rate row; see README
    third_row_param: str = "b2"

    def __post_init__(self):
        if abs(self.b_1) >= 1 or abs(self.b_2) >= 1:
            raise ValueError("|b| must be below 1")
        if self.third_row_param not in ("b1", "b2"):
            raise ValueError("third_row_param must be 'b1' or 'b2'")


PRESETS = {
    "table1_cartpole_true": CartPoleParams(0.5, 0.5, 0.6, 0.01, 0.01),
    "table1_cartpole_nominal": CartPoleParams(0.5, 0.5, 0.6, 0.0, 0.0),
    "table2_cartpole_true": CartPoleParams(1.0, 0.5, 0.5, 0.3, 0.3),
    "table2_cartpole_nominal": CartPoleParams(0.9, 0.45, 0.45, 0.0, 0.0),
    "table1_quadrotor_true": QuadrotorParams(m=1.0, L=0.24),
    "table1_quadrotor_nominal": QuadrotorParams(m=0.9, L=0.24),
    "table2_quadrotor_true": QuadrotorParams(m=1.0, L=0.24),
    "table2_quadrotor_nominal": QuadrotorParams(m=0.99, L=0.2376),
    "dubins_true": DubinsParams(0.3, 0.3),
}


class Plant:
    """Base class for the analytic vector fields."""

    state_dim = 0
    control_dim = 0
    accel_indices = ()
    residual_inputs = ()
    state_names = ()
    control_names = ()

    def __init__(self, params):
        self.params = params

    def with_params(self, **changes):
        return type(self)(replace(self.params, **changes))

    def __call__(self, x, u):
        raise NotImplementedError

    def jacobian(self, x, u):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.params})"


class CartPole(Plant):
    """
    Cart pole with viscous ground (b_1) and pivot (b_2) damping.

    State [x, xdot, theta, thetadot]; theta = 0 hangs down, theta = pi is
    upright. Control is the horizontal force on the cart.
    """

    state_dim = 4
    control_dim = 1
    accel_indices = (1, 3)
    residual_inputs = (0, 1, 2, 3, 4)
    state_names = ("x", "xdot", "theta", "thetadot")
    control_names = ("f",)

    def _parts(self, x, u):
        p = self.params
        M = p.m_c + p.m_p
        xd, th, thd, f = x[..., 1], x[..., 2], x[..., 3], u[..., 0]
        s, c = np.sin(th), np.cos(th)
        D = p.m_c + p.m_p * s**2
        n1 = -(p.b_2 * thd * c - p.l * f + p.l * p.b_1 * xd - p.m_p * p.l * s * (p.l * thd**2 + p.g * c))
        n2 = p.b_2 * thd * M + p.m_p * p.l * (p.b_1 * xd - f) * c - p.m_p * p.l * s * (M * p.g + p.m_p * p.l * thd**2 * c)
        return xd, th, thd, f, s, c, D, n1, n2, M

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = self.params
        xd, th, thd, f, s, c, D, n1, n2, M = self._parts(x, u)
        xdd = n1 / (p.l * D)
        thdd = n2 / (p.l**2 * p.m_p * D)
        return np.stack((xd, xdd, thd, thdd), axis=-1)

    def jacobian(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = self.params
        xd, th, thd, f, s, c, D, n1, n2, M = self._parts(x, u)
        dD = 2 * p.m_p * s * c
        # partials of the numerators
        dn1_xd = -p.l * p.b_1
        dn1_th = p.b_2 * thd * s + p.m_p * p.l * (c * (p.l * thd**2 + p.g * c) - p.g * s**2)
        dn1_thd = -p.b_2 * c + 2 * p.m_p * p.l**2 * s * thd
        dn1_f = p.l
        dn2_xd = p.m_p * p.l * p.b_1 * c
        dn2_th = (
            -p.m_p * p.l * (p.b_1 * xd - f) * s
            - p.m_p * p.l * c * (M * p.g + p.m_p * p.l * thd**2 * c)
            + p.m_p**2 * p.l**2 * thd**2 * s**2
        )
        dn2_thd = p.b_2 * M - 2 * p.m_p**2 * p.l**2 * s * c * thd
        dn2_f = -p.m_p * p.l * c
        d1 = p.l * D
        d2 = p.l**2 * p.m_p * D
        shape = np.broadcast(xd, f).shape
        Jx = np.zeros(shape + (4, 4))
        Ju = np.zeros(shape + (4, 1))
        Jx[..., 0, 1] = 1.0
        Jx[..., 2, 3] = 1.0
        Jx[..., 1, 1] = dn1_xd / d1
        Jx[..., 1, 2] = dn1_th / d1 - n1 * p.l * dD / d1**2
        Jx[..., 1, 3] = dn1_thd / d1
        Ju[..., 1, 0] = dn1_f / d1
        Jx[..., 3, 1] = dn2_xd / d2
        Jx[..., 3, 2] = dn2_th / d2 - n2 * p.l**2 * p.m_p * dD / d2**2
        Jx[..., 3, 3] = dn2_thd / d2
        Ju[..., 3, 0] = dn2_f / d2
        return Jx, Ju

    def energy(self, x):
        """Total mechanical energy (zero potential at the pivot height)."""
        p = self.params
        x = np.asarray(x, dtype=float)
        xd, th, thd = x[..., 1], x[..., 2], x[..., 3]
        vx = xd + p.l * thd * np.cos(th)
        vy = p.l * thd * np.sin(th)
        return 0.5 * p.m_c * xd**2 + 0.5 * p.m_p * (vx**2 + vy**2) - p.m_p * p.g * p.l * np.cos(th)


class Quadrotor(Plant):
    """
    Small-attitude quadrotor in a north-east-down frame.

    State [x, y, z, xd, yd, zd, phi, theta, psi, phid, thetad, psid];
    controls are the four rotor thrusts.
    """

    state_dim = 12
    control_dim = 4
    accel_indices = (3, 4, 5, 9, 10, 11)
    # attitude, rates and thrusts feed the learned residual
    residual_inputs = (6, 7, 8, 9, 10, 11, 12, 13, 14, 15)
    state_names = ("x", "y", "z", "xd", "yd", "zd", "phi", "theta", "psi", "phid", "thetad", "psid")
    control_names = ("F1", "F2", "F3", "F4")

    @property
    def hover_thrust(self):
        return self.params.m * self.params.g / 4.0

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = self.params
        ph, th, ps = x[..., 6], x[..., 7], x[..., 8]
        phd, thd, psd = x[..., 9], x[..., 10], x[..., 11]
        F1, F2, F3, F4 = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
        T = F1 + F2 + F3 + F4
        cph, sph, cth, sth, cps, sps = np.cos(ph), np.sin(ph), np.cos(th), np.sin(th), np.cos(ps), np.sin(ps)
        xdd = (cph * sth * cps + sph * sps) * T / p.m
        ydd = (cph * sth * sps - sph * cps) * T / p.m
        zdd = p.g - cph * cth * T / p.m
        phdd = (thd * psd * (p.J_y - p.J_z) + p.L * (F4 - F2)) / p.J_x
        thdd = (phd * psd * (p.J_z - p.J_x) + p.L * (F1 - F3)) / p.J_y
        psdd = (phd * thd * (p.J_x - p.J_y) + p.yaw_coeff * p.L * (F2 + F4 - F1 - F3)) / p.J_z
        return np.stack((x[..., 3], x[..., 4], x[..., 5], xdd, ydd, zdd, phd, thd, psd, phdd, thdd, psdd), axis=-1)

    def jacobian(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = self.params
        ph, th, ps = x[..., 6], x[..., 7], x[..., 8]
        phd, thd, psd = x[..., 9], x[..., 10], x[..., 11]
        T = u.sum(axis=-1)
        cph, sph, cth, sth, cps, sps = np.cos(ph), np.sin(ph), np.cos(th), np.sin(th), np.cos(ps), np.sin(ps)
        shape = np.broadcast(ph, T).shape
        Jx = np.zeros(shape + (12, 12))
        Ju = np.zeros(shape + (12, 4))
        for i in range(3):
            Jx[..., i, i + 3] = 1.0
            Jx[..., i + 6, i + 9] = 1.0
        ax = cph * sth * cps + sph * sps
        ay = cph * sth * sps - sph * cps
        az = -cph * cth
        Jx[..., 3, 6] = (-sph * sth * cps + cph * sps) * T / p.m
        Jx[..., 3, 7] = cph * cth * cps * T / p.m
        Jx[..., 3, 8] = (-cph * sth * sps + sph * cps) * T / p.m
        Jx[..., 4, 6] = (-sph * sth * sps - cph * cps) * T / p.m
        Jx[..., 4, 7] = cph * cth * sps * T / p.m
        Jx[..., 4, 8] = (cph * sth * cps + sph * sps) * T / p.m
        Jx[..., 5, 6] = sph * cth * T / p.m
        Jx[..., 5, 7] = cph * sth * T / p.m
        for k in range(4):
            Ju[..., 3, k] = ax / p.m
            Ju[..., 4, k] = ay / p.m
            Ju[..., 5, k] = az / p.m
        Jx[..., 9, 10] = psd * (p.J_y - p.J_z) / p.J_x
        Jx[..., 9, 11] = thd * (p.J_y - p.J_z) / p.J_x
        Jx[..., 10, 9] = psd * (p.J_z - p.J_x) / p.J_y
        Jx[..., 10, 11] = phd * (p.J_z - p.J_x) / p.J_y
        Jx[..., 11, 9] = thd * (p.J_x - p.J_y) / p.J_z
        Jx[..., 11, 10] = phd * (p.J_x - p.J_y) / p.J_z
        Ju[..., 9, :] = np.array([0.0, -p.L, 0.0, p.L]) / p.J_x
        Ju[..., 10, :] = np.array([p.L, 0.0, -p.L, 0.0]) / p.J_y
        Ju[..., 11, :] = p.yaw_coeff * p.L * np.array([-1.0, 1.0, -1.0, 1.0]) / p.J_z
        return Jx, Ju

    def mix(self, thrust, torques):
        """Rotor thrusts producing total `thrust` and body torques (roll, pitch, yaw)."""
        p = self.params
        tr, tp, ty = torques
        base = thrust / 4.0
        yaw = ty / (4 * p.yaw_coeff * p.L)
        return np.array([
            base + tp / (2 * p.L) - yaw,
            base - tr / (2 * p.L) + yaw,
            base - tp / (2 * p.L) - yaw,
            base + tr / (2 * p.L) + yaw,
        ])


class Dubins(Plant):
    """Unicycle with multiplicative control-effectiveness loss; state [x1, x2, heading]."""

    state_dim = 3
    control_dim = 2
    accel_indices = (0, 1, 2)
    residual_inputs = (2, 3, 4)
    state_names = ("x1", "x2", "heading")
    control_names = ("speed", "turn")

    def _gains(self):
        p = self.params
        k2 = 1.0 - (p.b_2 if p.third_row_param == "b2" else p.b_1)
        return 1.0 - p.b_1, k2

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        k1, k2 = self._gains()
        h = x[..., 2]
        return np.stack((k1 * u[..., 0] * np.cos(h), k1 * u[..., 0] * np.sin(h), k2 * u[..., 1]), axis=-1)

    def jacobian(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        k1, k2 = self._gains()
        h = x[..., 2]
        shape = np.broadcast(h, u[..., 0]).shape
        Jx = np.zeros(shape + (3, 3))
        Ju = np.zeros(shape + (3, 2))
        Jx[..., 0, 2] = -k1 * u[..., 0] * np.sin(h)
        Jx[..., 1, 2] = k1 * u[..., 0] * np.cos(h)
        Ju[..., 0, 0] = k1 * np.cos(h)
        Ju[..., 1, 0] = k1 * np.sin(h)
        Ju[..., 2, 1] = k2
        return Jx, Ju


class SemiParametricModel:
    """
    Analytic plant plus an optional learned residual on selected outputs.

    Parameters
    ----------
    parametric : Plant
    residual : object, optional
        Anything with ``predict_mean(Z) -> (q, k)`` and
        ``predict_mean_gradient(Z) -> (q, k, d)``; a GaussianProcess or
        SsgpState.
    input_indices : sequence of int
        Indices into the concatenated vector [x, u] that form the residual input.
    output_indices : sequence of int
        State-derivative rows the residual is added to.
    """

    def __init__(self, parametric, residual=None, input_indices=None, output_indices=None):
        self.parametric = parametric
        self.residual = residual
        self.input_indices = np.array(
            parametric.residual_inputs if input_indices is None else input_indices, dtype=int
        )
        self.output_indices = np.array(
            parametric.accel_indices if output_indices is None else output_indices, dtype=int
        )
        if residual is not None:
            if getattr(residual, "input_dim", len(self.input_indices)) != len(self.input_indices):
                raise ValueError("residual input dimension does not match the input layout")
            if getattr(residual, "output_dim", len(self.output_indices)) != len(self.output_indices):
                raise ValueError("residual output dimension does not match the output indices")

    @property
    def state_dim(self):
        return self.parametric.state_dim

    @property
    def control_dim(self):
        return self.parametric.control_dim

    def residual_input(self, x, u):
        xu = np.concatenate((np.atleast_2d(x), np.atleast_2d(u)), axis=-1)
        return xu[:, self.input_indices]

    def residual_mean(self, x, u):
        """Residual contribution, shape (q, n), zero outside the declared outputs."""
        x2 = np.atleast_2d(x)
        out = np.zeros(x2.shape)
        if self.residual is not None:
            out[:, self.output_indices] = self.residual.predict_mean(self.residual_input(x, u))
        return out

    def __call__(self, x, u):
        base = self.parametric(x, u)
        if self.residual is None:
            return base
        res = self.residual_mean(x, u)
        return base + (res[0] if np.ndim(x) == 1 else res)

    def jacobian(self, x, u):
        Jx, Ju = self.parametric.jacobian(x, u)
        if self.residual is None:
            return Jx, Ju
        single = np.ndim(x) == 1
        Jx = Jx.reshape(-1, *Jx.shape[-2:]).copy()
        Ju = Ju.reshape(-1, *Ju.shape[-2:]).copy()
        G = self.residual.predict_mean_gradient(self.residual_input(x, u))
        G = G.reshape(-1, len(self.output_indices), len(self.input_indices))
        n = self.state_dim
        full = np.zeros((G.shape[0], len(self.output_indices), n + self.control_dim))
        full[:, :, self.input_indices] = G
        Jx[:, self.output_indices, :] += full[:, :, :n]
        Ju[:, self.output_indices, :] += full[:, :, n:]
        if single:
            return Jx[0], Ju[0]
        return Jx, Ju

    def residual_targets(self, true_plant, x, u):
        """Training targets f_true - f_p on the declared output rows."""
        diff = np.atleast_2d(true_plant(x, u) - self.parametric(x, u))
        return diff[:, self.output_indices]


def rk4_step(f, x, u, dt):
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_rollout(f, x0, controls, dt):
    """
    Classical RK4 with zero-order-hold controls.

    Parameters
    ----------
    f : callable(x, u) -> xdot
    x0 : array_like, shape (n,)
    controls : array_like, shape (steps, m)
    dt : float

    Returns
    -------
    ndarray, shape (steps + 1, n)
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    traj = np.empty((controls.shape[0] + 1, np.size(x0)))
    traj[0] = x0
    for k, u in enumerate(controls):
        traj[k + 1] = rk4_step(f, traj[k], u, dt)
        if not np.all(np.isfinite(traj[k + 1])):
            raise FloatingPointError(f"non-finite state at rollout step {k + 1}: {traj[k + 1]}")
    return traj


@dataclass(frozen=True)
class SinusoidReference:
    amplitude: float = 1.0
    period: float = 4.0
    phase: float = 0.0

    def __call__(self, t):
        w = 2 * np.pi / self.period
        arg = w * t + self.phase
        return self.amplitude * np.sin(arg), self.amplitude * w * np.cos(arg)


def _pd_cartpole(plant, x, t, ref, kp, kd):
    r, rd = ref(t)
    return np.array([kp * (r - x[0]) + kd * (rd - x[1])])


def _pd_quadrotor(plant, x, t, ref, kp, kd):
    """Cascaded PD: circle in x-y at constant altitude, small-angle attitude loop."""
    p = plant.params
    r, rd = ref(t)
    q, qd = ref(t + ref.period / 4.0)
    ax = kp * (r - x[0]) + kd * (rd - x[3])
    ay = kp * (q - x[1]) + kd * (qd - x[4])
    az = kp * (0.0 - x[2]) + kd * (0.0 - x[5])
    thrust = p.m * (p.g - az) / max(np.cos(x[6]) * np.cos(x[7]), 0.5)
    theta_des = np.clip(ax * p.m / thrust, -0.4, 0.4)
    phi_des = np.clip(-ay * p.m / thrust, -0.4, 0.4)
    ka, kr = 40.0, 8.0
    torques = (
        p.J_x * (ka * (phi_des - x[6]) - kr * x[9]),
        p.J_y * (ka * (theta_des - x[7]) - kr * x[10]),
        p.J_z * (ka * (0.0 - x[8]) - kr * x[11]),
    )
    return plant.mix(thrust, torques)


def _sinusoid_dubins(plant, x, t, ref, kp, kd):
    r, rd = ref(t)
    return np.array([1.0 + 0.5 * r / max(ref.amplitude, 1e-12), rd / max(ref.amplitude, 1e-12)])


_CONTROLLERS = {CartPole: _pd_cartpole, Quadrotor: _pd_quadrotor, Dubins: _sinusoid_dubins}


def generate_training_data(true_plant, model, N, seed=0, kp=5.0, kd=1.0, amplitude=1.0,
                           period=4.0, dt=0.01, sample_every=5, x0=None):
    """
    Roll out a crude feedback controller tracking a sinusoid on the TRUE plant
    and record residual targets for the model's declared outputs.

    The seed jitters the reference phase and the initial state.

    Returns
    -------
    TrainingSet
        N samples with inputs laid out per ``model.input_indices`` and
        targets ``f_true - f_p`` on ``model.output_indices``.
    """
    if N < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    controller = _CONTROLLERS[type(true_plant)]
    ref = SinusoidReference(amplitude, period, rng.uniform(0, 2 * np.pi))
    n = true_plant.state_dim
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x = x + 0.01 * rng.standard_normal(n)
    X, U = [], []
    t = 0.0
    steps = N * sample_every
    for k in range(steps):
        u = controller(true_plant, x, t, ref, kp, kd)
        if k % sample_every == 0:
            X.append(x.copy())
            U.append(u.copy())
        x = rk4_step(true_plant, x, u, dt)
        t += dt
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("training rollout diverged")
    X, U = np.array(X), np.array(U)
    Z = model.residual_input(X, U)
    Y = model.residual_targets(true_plant, X, U)
    return TrainingSet(Z, Y)


def box_training_data(true_plant, model, N, lower, upper, seed=0):
    """
    Residual targets at states and controls drawn uniformly from a box.

    `lower` and `upper` cover the concatenated vector [x, u]. No rollout is
    involved, so an unstable true plant cannot spoil the coverage.
    """
    if N < 1:
        raise ValueError("need at least one sample")
    n, m = true_plant.state_dim, true_plant.control_dim
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n + m,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n + m,))
    if np.any(upper < lower):
        raise ValueError("box upper bound below lower bound")
    rng = np.random.default_rng(seed)
    S = rng.uniform(lower, upper, (int(N), n + m))
    X, U = S[:, :n], S[:, n:]
    return TrainingSet(model.residual_input(X, U), model.residual_targets(true_plant, X, U))
