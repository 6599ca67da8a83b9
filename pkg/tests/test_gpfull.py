import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sppc.gpfull import (
    GaussianProcess,
    KernelHyperparams,
    NotPositiveDefiniteError,
    TrainingSet,
    jittered_cholesky,
    kernel_eval,
    log_marginal_likelihood,
    se_kernel,
    train_hyperparams,
)


def random_gp(seed, n=20, d=3, m=2, noise=0.1):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-1, 1, (n, d))
    Y = rng.standard_normal((n, m))
    hps = [KernelHyperparams(rng.uniform(0.5, 2), noise, rng.uniform(0.3, 1.5, d)) for _ in range(m)]
    return GaussianProcess(TrainingSet(Z, Y), hps)


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        KernelHyperparams(0.0, 0.1, [1.0])
    with pytest.raises(ValueError):
        KernelHyperparams(1.0, -0.1, [1.0])
    with pytest.raises(ValueError):
        KernelHyperparams(1.0, 0.1, [1.0, 0.0])
    hp = KernelHyperparams(1.5, 0.2, [1.0, 2.0])
    back = KernelHyperparams.from_dict(hp.to_dict())
    assert back.to_dict() == hp.to_dict()


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        TrainingSet(np.array([[np.nan, 0.0]]), np.zeros(1))
    assert TrainingSet(np.zeros((3, 2)), np.zeros(3)).output_dim == 1


def test_kernel_eval():
    hp = KernelHyperparams(1.3, 0.0, [1.0, 2.0])
    z = np.array([0.3, -0.2])
    assert kernel_eval(z, z, hp) == pytest.approx(1.69)
    assert kernel_eval(z, z + 1e3, hp) == 0.0
    assert kernel_eval([0.0], [1.0], KernelHyperparams(1.0, 0.0, [1.0])) == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_se_kernel_matches_pointwise():
    rng = np.random.default_rng(0)
    hp = KernelHyperparams(0.7, 0.0, [0.5, 1.5, 1.0])
    A, B = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    K = se_kernel(A, B, hp)
    ref = np.array([[kernel_eval(a, b, hp) for b in B] for a in A])
    np.testing.assert_allclose(K, ref, rtol=1e-12)


def test_cholesky_reconstruction():
    gp = random_gp(1)
    Z = gp.data.inputs
    for L, hp in zip(gp.chol, gp.hyperparams):
        Ky = se_kernel(Z, Z, hp) + hp.noise_std**2 * np.eye(len(Z))
        np.testing.assert_allclose(L @ L.T, Ky, atol=1e-10)


def test_single_point_factor():
    hp = KernelHyperparams(1.2, 0.5, [1.0])
    gp = GaussianProcess(TrainingSet([[0.3]], [[1.0]]), hp)
    assert gp.chol[0][0, 0] == pytest.approx(np.sqrt(1.44 + 0.25))


def test_duplicate_rows_need_jitter():
    hp = KernelHyperparams(1.0, 0.0, [1.0])
    gp = GaussianProcess(TrainingSet([[0.0], [0.0], [1.0]], [1.0, 1.0, 0.0]), hp)
    assert gp.jitter[0] > 0.0


def test_indefinite_matrix_raises():
    with pytest.raises(NotPositiveDefiniteError):
        jittered_cholesky(np.diag([1.0, -1.0]))


def test_interpolation_and_far_field():
    rng = np.random.default_rng(2)
    Z = rng.uniform(-1, 1, (15, 2))
    Y = np.sin(3 * Z[:, :1]) + Z[:, 1:]
    hp = KernelHyperparams(1.5, 1e-9, [0.6, 0.8])
    gp = GaussianProcess(TrainingSet(Z, Y), hp)
    np.testing.assert_allclose(gp.predict_mean(Z), Y, atol=1e-6)
    mean, var = gp.predict(np.array([50.0, -50.0]))
    assert abs(mean[0]) < 1e-12
    assert var[0] == pytest.approx(1.5**2, rel=1e-2)


def test_single_point_closed_form():
    hp = KernelHyperparams(1.1, 0.3, [0.7])
    z1, y1, zs = 0.2, 0.9, 0.65
    gp = GaussianProcess(TrainingSet([[z1]], [[y1]]), hp)
    k = 1.21 * np.exp(-0.5 * ((zs - z1) / 0.7) ** 2)
    mean, var = gp.predict(np.array([zs]))
    assert mean[0] == pytest.approx(k * y1 / (1.21 + 0.09), rel=1e-12)
    assert var[0] == pytest.approx(1.21 - k**2 / (1.21 + 0.09), rel=1e-12)


def test_batch_prediction_shapes():
    gp = random_gp(3)
    mean, var = gp.predict(np.zeros((6, 3)))
    assert mean.shape == var.shape == (6, 2)
    assert np.all(var >= 0)
    assert gp.predict_mean_gradient(np.zeros(3)).shape == (2, 3)
    assert gp.predict_mean_gradient(np.zeros((4, 3))).shape == (4, 2, 3)


def test_gradient_symmetric_pair():
    hp = KernelHyperparams(1.0, 0.1, [1.0, 1.0])
    gp = GaussianProcess(TrainingSet([[1.0, 0.0], [-1.0, 0.0]], [2.0, 2.0]), hp)
    np.testing.assert_allclose(gp.predict_mean_gradient(np.zeros(2)), 0.0, atol=1e-15)


def central_difference(f, z, h=1e-5):
    cols = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_vs_finite_differences(seed):
    gp = random_gp(seed)
    z = np.random.default_rng(100 + seed).uniform(-1, 1, 3)
    G = gp.predict_mean_gradient(z)
    F = central_difference(lambda q: gp.predict_mean(q)[0], z)
    assert np.abs(G - F).max() <= 1e-5 * max(1.0, np.abs(F).max())


def test_gradient_linear_in_targets():
    gp = random_gp(4)
    scaled = GaussianProcess(TrainingSet(gp.data.inputs, 3.0 * gp.data.targets), gp.hyperparams)
    z = np.full(3, 0.1)
    np.testing.assert_allclose(scaled.predict_mean_gradient(z), 3.0 * gp.predict_mean_gradient(z), rtol=1e-10)


def test_lml_matches_dense_formula():
    gp = random_gp(5, m=1)
    Z, y, hp = gp.data.inputs, gp.data.targets[:, 0], gp.hyperparams[0]
    Ky = se_kernel(Z, Z, hp) + hp.noise_std**2 * np.eye(len(Z))
    _, logdet = np.linalg.slogdet(Ky)
    ref = -0.5 * y @ np.linalg.solve(Ky, y) - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi)
    assert log_marginal_likelihood(Z, y, hp) == pytest.approx(ref, rel=1e-10)
    assert gp.log_marginal_likelihood() == pytest.approx(ref, rel=1e-10)


def sample_gp_data(seed, n=100, ls=0.5, sf=1.0, sn=0.1):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-3, 3, (n, 1))
    K = se_kernel(Z, Z, KernelHyperparams(sf, 0.0, [ls])) + 1e-10 * np.eye(n)
    f = np.linalg.cholesky(K) @ rng.standard_normal(n)
    return TrainingSet(Z, f + sn * rng.standard_normal(n))


def test_training_recovers_lengthscale_and_never_descends():
    data = sample_gp_data(0)
    fit = train_hyperparams(data, KernelHyperparams(1.0, 0.3, [1.5]), restarts=3, seed=0)
    ls = fit.hyperparams[0].lengthscales[0]
    assert 0.25 <= ls <= 1.0
    assert not fit.degraded
    for path in fit.trace:
        assert np.all(np.diff(path) >= -1e-9 * np.abs(path[:-1]).clip(1.0))


def test_noise_free_linear_data_gives_small_noise():
    Z = np.linspace(-2, 2, 40)[:, None]
    fit = train_hyperparams(TrainingSet(Z, 0.8 * Z[:, 0] - 0.3), KernelHyperparams(1.0, 0.3, [1.0]), restarts=2)
    hp = fit.hyperparams[0]
    assert hp.noise_std <= 0.05 * hp.signal_std


def test_shared_training_gives_one_set():
    rng = np.random.default_rng(1)
    Z = rng.uniform(-1, 1, (30, 2))
    Y = np.column_stack((np.sin(2 * Z[:, 0]), np.cos(2 * Z[:, 1])))
    fit = train_hyperparams(TrainingSet(Z, Y), KernelHyperparams(1.0, 0.1, [1.0, 1.0]), restarts=1, shared=True)
    assert fit.hyperparams[0] is fit.hyperparams[1]


def test_training_needs_two_samples():
    with pytest.raises(ValueError):
        train_hyperparams(TrainingSet([[0.0]], [1.0]), KernelHyperparams(1.0, 0.1, [1.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_posterior_variance_bounded_by_prior(seed):
    gp = random_gp(seed, n=8)
    z = np.random.default_rng(seed).uniform(-2, 2, (5, 3))
    _, var = gp.predict(z)
    prior = np.array([hp.signal_std**2 for hp in gp.hyperparams])
    assert np.all(var <= prior + 1e-12)
