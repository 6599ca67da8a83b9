"""Pseudospectral solve of a double-integrator transfer, checked by reintegration."""

import numpy as np

from sppc.dynamics import rk4_rollout
from sppc.nlpsolve import solve
from sppc.transcribe import OcProblem, interpolate_solution, transcribe


class DoubleIntegrator:
    state_dim, control_dim = 2, 1
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])

    def __call__(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T

    def jacobian(self, x, u):
        shape = np.shape(x)[:-1]
        return np.broadcast_to(self.A, shape + (2, 2)), np.broadcast_to(self.B, shape + (2, 1))


def main():
    plant = DoubleIntegrator()
    prob = OcProblem(plant, x0=[1.0, 0.0], xf=[0.0, 0.0], t0=0.0, tf=2.0, Q=np.eye(2), R=np.eye(1))
    for K in (5, 10, 20):
        nlp = transcribe(prob, K=K)
        sol = solve(nlp, nlp.linear_guess())
        dt = 1e-3
        _, U = interpolate_solution(nlp, sol.x, np.arange(0, 2.0, dt) + dt / 2)
        miss = np.linalg.norm(rk4_rollout(plant, prob.x0, U, dt)[-1])
        print(f"K={K:2d} {sol.status:10s} cost {sol.objective:.6f}  reintegrated terminal miss {miss:.2e}")


if __name__ == "__main__":
    main()
