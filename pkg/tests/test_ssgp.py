import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sppc.gpfull import GaussianProcess, KernelHyperparams, TrainingSet, se_kernel
from sppc.ssgp import SsgpState, cholesky_rank1_update, sample_basis


def dense_recurrence(state, Z, Y, lam):
    """Apply the two update equations with full matrices."""
    A = state.A.copy()
    b = state.b.copy()
    for z, y in zip(Z, Y):
        phi = state.basis.feature_map(z)
        A = lam * A + (1 - lam) * np.outer(phi, phi)
        b = lam * b + (1 - lam) * np.outer(phi, y)
    return np.linalg.solve(A, b)


def test_basis_is_deterministic():
    hp = KernelHyperparams(1.0, 0.1, [0.5, 2.0])
    np.testing.assert_array_equal(sample_basis(hp, 30, 7).omega, sample_basis(hp, 30, 7).omega)
    assert not np.array_equal(sample_basis(hp, 30, 7).omega, sample_basis(hp, 30, 8).omega)
    with pytest.raises(ValueError):
        sample_basis(hp, 0, 0)


def test_frequency_covariance_is_inverse_squared_lengthscale():
    ls = np.array([0.5, 2.0, 1.0])
    omega = sample_basis(KernelHyperparams(1.0, 0.1, ls), 10_000, 0).omega
    np.testing.assert_allclose(np.cov(omega).diagonal(), ls**-2, rtol=0.05)


def test_long_lengthscale_freezes_frequency_row():
    omega = sample_basis(KernelHyperparams(1.0, 0.1, [1.0, 1e9]), 100, 0).omega
    assert np.abs(omega[1]).max() < 1e-8


def test_feature_map_norm_and_origin():
    hp = KernelHyperparams(1.7, 0.1, [0.8, 1.2])
    basis = sample_basis(hp, 25, 3)
    z = np.random.default_rng(0).standard_normal(2)
    assert basis.feature_map(z) @ basis.feature_map(z) == pytest.approx(1.7**2)
    phi0 = basis.feature_map(np.zeros(2))
    np.testing.assert_allclose(phi0[:25], 1.7 / 5.0)
    np.testing.assert_array_equal(phi0[25:], 0.0)


def kernel_gap(r, seed):
    hp = KernelHyperparams(1.0, 0.1, [0.7, 1.3])
    basis = sample_basis(hp, r, seed)
    rng = np.random.default_rng(1000 + seed)
    Zi, Zj = rng.uniform(-1, 1, (100, 2)), rng.uniform(-1, 1, (100, 2))
    approx = (basis.features(Zi) * basis.features(Zj)).sum(1)
    exact = np.array([se_kernel(a, b, hp)[0, 0] for a, b in zip(Zi, Zj)])
    return np.abs(approx - exact).mean()


def test_kernel_approximation_improves_with_features():
    gaps = [np.mean([kernel_gap(r, s) for s in range(20)]) for r in (50, 100, 200, 400)]
    assert gaps[2] <= 0.05
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


def test_feature_jacobian_vs_finite_differences():
    basis = sample_basis(KernelHyperparams(1.0, 0.1, [0.7, 1.3, 1.0]), 20, 0)
    z = np.array([0.2, -0.4, 0.9])
    J = basis.feature_jacobian(z)[0]
    h = 1e-6
    F = np.column_stack([(basis.feature_map(z + h * e) - basis.feature_map(z - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(J, F, atol=1e-8)


def random_data(seed, n=100, d=2):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-2, 2, (n, d))
    Y = np.column_stack((np.sin(Z[:, 0]) * np.cos(Z[:, 1]), 0.5 * Z[:, 0]))
    return TrainingSet(Z, Y + 0.05 * rng.standard_normal(Y.shape))


def test_empty_fit_is_prior():
    hp = KernelHyperparams(1.0, 0.3, [1.0, 1.0])
    state = SsgpState.batch_fit(TrainingSet(np.zeros((0, 2)), np.zeros((0, 1))), sample_basis(hp, 10, 0), 1.0)
    np.testing.assert_allclose(state.A, 0.09 * np.eye(20))
    np.testing.assert_array_equal(state.weights, 0.0)
    mean, var = state.predict(np.array([0.3, 0.1]))
    assert mean[0] == 0.0
    assert var[0] > 0.09


def test_batch_fit_factor_and_full_gp_agreement():
    data = random_data(0)
    hp = KernelHyperparams(1.0, 0.1, [1.0, 1.0])
    state = SsgpState.batch_fit(data, sample_basis(hp, 400, 0))
    Phi = state.basis.features(data.inputs).T
    np.testing.assert_allclose(state.R.T @ state.R, Phi @ Phi.T + 0.01 * np.eye(800), atol=1e-10)
    grid = np.stack(np.meshgrid(np.linspace(-1.5, 1.5, 8), np.linspace(-1.5, 1.5, 8)), -1).reshape(-1, 2)
    gap = np.abs(state.predict_mean(grid) - GaussianProcess(data, hp).predict_mean(grid)).mean()
    assert gap <= 0.1


def test_output_scale_round_trip():
    data = random_data(1)
    basis = sample_basis(KernelHyperparams(1.0, 0.1, [1.0, 1.0]), 50, 0)
    plain = SsgpState.batch_fit(data, basis)
    scaled = SsgpState.batch_fit(data, basis, output_scale=[2.0, 0.5])
    z = np.array([[0.1, 0.2]])
    np.testing.assert_allclose(scaled.predict_mean(z), plain.predict_mean(z), rtol=1e-8)


@pytest.mark.parametrize("lam", [1.0, 0.995, 0.9])
def test_online_updates_match_dense_recurrence(lam):
    data = random_data(2)
    state = SsgpState.batch_fit(TrainingSet(data.inputs[:20], data.targets[:20]),
                                sample_basis(KernelHyperparams(1.0, 0.1, [1.0, 1.0]), 30, 0), forgetting=lam)
    Z, Y = data.inputs[20:70], data.targets[20:70]
    w_ref = dense_recurrence(state, Z, Y, lam)
    before = (state.R.copy(), state.b.copy())
    state.update_batch(Z, Y)
    assert np.abs(state.weights - w_ref).max() <= 1e-8 * np.abs(w_ref).max()
    if lam == 1.0:
        np.testing.assert_array_equal(state.R, before[0])
        np.testing.assert_array_equal(state.b, before[1])


def test_rank1_update_matches_dense():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((6, 6))
    A = M @ M.T + np.eye(6)
    R = np.linalg.cholesky(A).T.copy()
    v = rng.standard_normal(6)
    assert cholesky_rank1_update(R, v)
    np.testing.assert_allclose(R.T @ R, A + np.outer(v, v), atol=1e-10)
    np.testing.assert_allclose(np.tril(R, -1), 0.0)


def test_update_moves_prediction_towards_sample():
    state = SsgpState(sample_basis(KernelHyperparams(1.0, 0.1, [1.0, 1.0]), 40, 0), 1, forgetting=0.9)
    z, y = np.array([1.5, -1.0]), np.array([2.0])
    before = abs(state.predict_mean(z[None])[0, 0] - y[0])
    state.online_update(z, y)
    state.solve_weights()
    assert abs(state.predict_mean(z[None])[0, 0] - y[0]) < before


def test_repeated_observation_converges_to_target():
    state = SsgpState(sample_basis(KernelHyperparams(1.0, 0.05, [1.0]), 40, 0), 1, forgetting=0.9)
    z, y = np.array([0.4]), np.array([0.7])
    for _ in range(200):
        state.online_update(z, y)
    assert state.predict_mean(z[None])[0, 0] == pytest.approx(0.7, abs=1e-2)


def test_variance_shrinks_after_observation():
    hp = KernelHyperparams(1.0, 0.2, [1.0, 1.0])
    state = SsgpState.batch_fit(random_data(4, n=10), sample_basis(hp, 30, 0), forgetting=1.0)
    z = np.array([0.3, 0.3])
    _, var0 = state.predict(z)
    Phi = state.basis.features(z)
    A = state.A + Phi.T @ Phi
    phi = state.basis.feature_map(z)
    var1 = 0.04 * (1 + phi @ np.linalg.solve(A, phi))
    assert var1 < var0[0]


def test_gradient_vs_finite_differences_and_linearity():
    data = random_data(5)
    state = SsgpState.batch_fit(data, sample_basis(KernelHyperparams(1.0, 0.1, [0.8, 1.1]), 60, 0))
    rng = np.random.default_rng(6)
    h = 1e-5
    for _ in range(100):
        z = rng.uniform(-2, 2, 2)
        G = state.predict_mean_gradient(z)
        F = np.stack([(state.predict_mean(z + h * e)[0] - state.predict_mean(z - h * e)[0]) / (2 * h)
                      for e in np.eye(2)], -1)
        assert np.abs(G - F).max() <= 1e-5 * max(1.0, np.abs(F).max())
    z = np.array([0.1, 0.2])
    G = state.predict_mean_gradient(z)
    state._w = 2 * state.weights
    np.testing.assert_allclose(state.predict_mean_gradient(z), 2 * G)
    state._w = np.zeros_like(state._w)
    np.testing.assert_array_equal(state.predict_mean_gradient(z), 0.0)


def test_serialization_round_trip():
    state = SsgpState.batch_fit(random_data(7), sample_basis(KernelHyperparams(1.0, 0.1, [1.0, 1.0]), 20, 0))
    back = SsgpState.from_dict(state.to_dict())
    z = np.array([[0.5, -0.5]])
    np.testing.assert_allclose(back.predict_mean(z), state.predict_mean(z), rtol=1e-12)


def test_bad_forgetting_and_nonfinite_samples():
    basis = sample_basis(KernelHyperparams(1.0, 0.1, [1.0]), 5, 0)
    with pytest.raises(ValueError):
        SsgpState(basis, 1, forgetting=0.0)
    state = SsgpState(basis, 1, forgetting=0.9)
    with pytest.raises(ValueError):
        state.online_update([np.nan], [0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 0.999))
def test_copy_is_independent(seed, lam):
    state = SsgpState(sample_basis(KernelHyperparams(1.0, 0.1, [1.0]), 8, seed), 1, forgetting=lam)
    clone = state.copy()
    clone.online_update([0.3], [1.0])
    np.testing.assert_array_equal(state.b, 0.0)
    assert np.all(np.isfinite(clone.weights))
