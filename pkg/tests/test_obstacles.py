import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sppc.dynamics import Dubins, DubinsParams, SemiParametricModel
from sppc.gpfull import KernelHyperparams, TrainingSet
from sppc.obstacles import (
    Obstacle,
    ObstacleConstraint,
    SweepConfig,
    UncertaintyInputs,
    node_radii,
    obstacle_constraint,
    propagate_covariance,
    run_dubins_sweep,
    run_dubins_trial,
    sweep_nominals,
    uncertainty_radius,
)
from sppc.ssgp import SsgpState, sample_basis


def random_psd(rng, scale=1.0):
    M = rng.standard_normal((2, 2))
    return scale * M @ M.T


def rotation(a):
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def test_obstacle_validation():
    with pytest.raises(ValueError):
        Obstacle([0.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        UncertaintyInputs(np.diag([1.0, -1.0]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        UncertaintyInputs(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        UncertaintyInputs(np.eye(2), np.eye(2), kappa=0.0)


def test_constraint_examples():
    ob = Obstacle([1.0, -2.0], 2.0)
    assert obstacle_constraint([4.0, -2.0], ob, 0.1, 0.0) == pytest.approx(0.9)
    assert obstacle_constraint([1.0, -2.0], ob, 0.1, 0.3) == pytest.approx(-2.4)
    assert obstacle_constraint([1.0, 0.4], ob, 0.1, 0.3) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.floats(0.1, 3.0))
def test_constraint_translation_invariant(vals, r):
    p, shift = np.array(vals[:2]), np.array(vals[2:])
    a = obstacle_constraint(p, Obstacle([0.5, 0.5], r), 0.1, 0.2)
    b = obstacle_constraint(p + shift, Obstacle(np.array([0.5, 0.5]) + shift, r), 0.1, 0.2)
    assert a == pytest.approx(b, abs=1e-9)


def test_propagation_examples():
    Z = np.zeros((2, 2))
    np.testing.assert_array_equal(propagate_covariance(UncertaintyInputs(Z, Z)), Z)
    S = propagate_covariance(UncertaintyInputs(Z, 0.25 * np.eye(2), dt=0.1))
    np.testing.assert_allclose(S, 0.01 * 0.25 * np.eye(2), rtol=1e-12)


def test_propagation_dominates_start():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P, V = random_psd(rng), random_psd(rng)
        S = propagate_covariance(UncertaintyInputs(P, V, dt=rng.uniform(0.01, 1.0)))
        assert np.linalg.eigvalsh(S).min() >= -1e-12
        assert np.linalg.eigvalsh(S - P).min() >= -1e-12


def test_propagation_clamps_negative_cross_term():
    S = propagate_covariance(UncertaintyInputs(np.zeros((2, 2)), np.zeros((2, 2)), cross_cov=-np.eye(2)))
    np.testing.assert_allclose(S, 0.0)


def test_radius_examples():
    for a in np.linspace(0, np.pi, 7):
        assert uncertainty_radius(0.09 * np.eye(2), [np.cos(a), np.sin(a)], 2.0) == pytest.approx(0.6)
    assert uncertainty_radius(np.diag([4.0, 1.0]), [1.0, 0.0], 1.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        uncertainty_radius(np.eye(2), [1.0, 1.0])


def test_radius_rotation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        S, a, b = random_psd(rng), rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
        d = np.array([np.cos(a), np.sin(a)])
        R = rotation(b)
        assert abs(uncertainty_radius(R @ S @ R.T, R @ d) - uncertainty_radius(S, d)) <= 1e-10


def test_radius_monotone_in_kappa_and_cov():
    rng = np.random.default_rng(2)
    d = np.array([0.6, 0.8])
    for _ in range(20):
        S, E = random_psd(rng), random_psd(rng)
        assert uncertainty_radius(S + E, d) >= uncertainty_radius(S, d)
        assert uncertainty_radius(S, d, 3.0) >= uncertainty_radius(S, d, 2.0)


def test_path_constraint_jacobian():
    con = ObstacleConstraint(Obstacle([1.0, 1.0], 0.5), 0.1, radii=np.array([0.0, 0.2, 0.1]))
    rng = np.random.default_rng(3)
    X, U = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    Gx, Gu = con.jacobian(X, U)
    h = 1e-6
    for j in range(3):
        E = np.zeros_like(X)
        E[:, j] = h
        fd = (con(X + E, U) - con(X - E, U))[:, 0] / (2 * h)
        np.testing.assert_allclose(Gx[:, 0, j], fd, atol=1e-8)
    np.testing.assert_array_equal(Gu, 0.0)


def test_node_radii_zero_without_learning_and_growing_with_it():
    plant = Dubins(DubinsParams(0.3, 0.3))
    ob = Obstacle([3.0, 0.0], 1.0)
    X = np.column_stack((np.linspace(0, 1, 7), np.zeros(7), np.zeros(7)))
    U = np.tile([1.0, 0.0], (5, 1))
    t = np.linspace(0, 1, 7)
    np.testing.assert_array_equal(node_radii(SemiParametricModel(plant), X, U, t, ob), 0.0)
    basis = sample_basis(KernelHyperparams(1.0, 0.1, np.ones(3)), 20, 0)
    ssgp = SsgpState.batch_fit(TrainingSet(np.zeros((0, 3)), np.zeros((0, 3))), basis)
    radii = node_radii(SemiParametricModel(plant, ssgp), X, U, t, ob)
    assert np.all(radii > 0) and np.all(np.diff(radii) > 0)


def test_sweep_nominals_are_bounded_and_reproducible():
    cfg = SweepConfig()
    a = sweep_nominals(cfg, 200, 5)
    assert a == sweep_nominals(cfg, 200, 5)
    b = np.array([x[0] for x in a])
    assert np.abs(b).max() < cfg.b_limit
    assert b.mean() == pytest.approx(0.3, abs=0.05)
    assert sweep_nominals(replace(cfg, fixed_nominal=True), 3, 0)[0][0] == (0.3, 0.3)


@pytest.fixture(scope="module")
def exact_trials():
    cfg = SweepConfig(fixed_nominal=True)
    return {u: run_dubins_trial(replace(cfg, use_uncertainty=u), (0.3, 0.3), seed=1) for u in (True, False)}


def test_exact_trial_respects_obstacle_at_nodes(exact_trials):
    episode, row = exact_trials[True]
    assert row["min_node_margin"] >= -1e-3
    assert row["violations"] == 0
    assert row["status"] == "tolerance"


def test_uncertainty_radius_does_not_change_exact_trial(exact_trials):
    a, b = exact_trials[True][0].states, exact_trials[False][0].states
    assert a.shape == b.shape
    assert np.abs(a - b).max() <= 1e-6


def test_sweep_report_rows():
    report = run_dubins_sweep(2, seed=3)
    assert report.trials == 2
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert [r["trial"] for r in rows] == ["0", "1"]
    summary = json.loads(report.summary_json())
    assert summary["trials"] == 2
    assert 0.0 <= summary["violation_fraction"] <= 1.0
    with pytest.raises(ValueError):
        run_dubins_sweep(0)
