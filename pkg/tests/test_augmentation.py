import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aquasentinel.augmentation import (
    INFERRED,
    MEASURED,
    AugmentationConfig,
    PhysicsModel,
    augment,
    augment_series,
    physics_residual,
    residual_components,
)
from aquasentinel.hydraulics import FLOW, PRESSURE, NodeState, DemandPattern, simulate, solve_steady_state
from aquasentinel.network import build_network
from oracles import random_tree, tree_accumulation

EXACT = AugmentationConfig(lambda_smooth=0.0, tol=1e-24, max_iters=200)


def _tree_fixture(rng, n=10):
    ids, edges = random_tree(rng, n)
    net = build_network(edges, ids)
    inflow = {v: float(rng.uniform(0.002, 0.03)) for v in ids}
    return ids, edges, net, inflow


def _readings(frame, sensors):
    return {v: frame[v] for v in sensors}


def test_residual_of_solver_output_is_tiny(campus):
    inflow = {n.id: n.base_demand for n in campus.nodes}
    frame = solve_steady_state(campus, inflow)
    assert physics_residual(campus, frame, inflow) <= 1e-12


def test_residual_perturbation_counts_terms(campus):
    inflow = {n.id: n.base_demand for n in campus.nodes}
    frame = solve_steady_state(campus, inflow)
    delta = 1e-4
    # outfall flow appears only in its own balance and in no head-loss term
    x = frame.values.copy()
    x[campus.index("OUT"), FLOW] += delta
    assert physics_residual(campus, x, inflow) == pytest.approx(delta**2, rel=1e-6)
    # an interior junction's flow enters its own balance and its child's
    x = frame.values.copy()
    x[campus.index("J11"), FLOW] += delta
    mass, _ = residual_components(campus, x, inflow)
    assert float(mass @ mass) == pytest.approx(2 * delta**2, rel=1e-6)


def test_zero_flow_frame_residual_is_sum_of_squared_demands(campus):
    inflow = {n.id: n.base_demand for n in campus.nodes}
    zero = np.zeros((len(campus.nodes), 3))
    want = sum(d * d for d in inflow.values())
    assert physics_residual(campus, zero, inflow) == pytest.approx(want, rel=1e-14)


def test_fully_observed_returns_readings(campus):
    inflow = {n.id: n.base_demand for n in campus.nodes}
    frame = solve_steady_state(campus, inflow)
    out = augment(campus, frame.as_dict(), inflow)
    assert np.array_equal(out.frame.values, frame.values)
    assert set(out.provenance.values()) == {MEASURED}
    assert out.residual == pytest.approx(
        PhysicsModel(campus, 0.1).objective(frame.values, np.array(list(inflow.values())))
    )


def test_chain_root_sensed_recovers_accumulation():
    edges = [("A", "B"), ("B", "C"), ("C", "D")]
    net = build_network(edges)
    inflow = {"A": 0.02, "B": 0.01, "C": 0.0, "D": 0.005}
    frame = solve_steady_state(net, inflow)
    out = augment(net, _readings(frame, ["A"]), inflow, EXACT)
    want = tree_accumulation(net.node_ids, edges, inflow)
    for v in net.node_ids:
        assert out.frame[v].flow == pytest.approx(want[v], rel=1e-6)
    assert out.provenance == {"A": MEASURED, "B": INFERRED, "C": INFERRED, "D": INFERRED}


def test_exact_recovery_on_noise_free_trees(rng):
    for _ in range(20):
        ids, _, net, inflow = _tree_fixture(rng, int(rng.integers(5, 16)))
        truth = solve_steady_state(net, inflow)
        sensors = list(rng.choice(ids, size=max(1, len(ids) // 4), replace=False))
        out = augment(net, _readings(truth, sensors), inflow, EXACT)
        for v in ids:
            assert out.frame[v].flow == pytest.approx(truth[v].flow, rel=1e-4)


def test_measured_values_bit_identical(rng):
    ids, _, net, inflow = _tree_fixture(rng)
    truth = solve_steady_state(net, inflow)
    noisy = {v: NodeState(*(np.array(truth[v]) * (1 + 0.05 * rng.standard_normal(3))))
             for v in ids[:3]}
    out = augment(net, noisy, inflow, AugmentationConfig(lambda_smooth=0.1, max_iters=50))
    for v, state in noisy.items():
        assert tuple(out.frame.values[net.index(v)]) == tuple(state)


def test_monotone_descent_on_random_fixtures(rng):
    for _ in range(50):
        ids, _, net, inflow = _tree_fixture(rng, int(rng.integers(4, 14)))
        truth = solve_steady_state(net, inflow)
        sensors = list(rng.choice(ids, size=2, replace=False))
        readings = {v: NodeState(*(np.array(truth[v]) * (1 + 0.02 * rng.standard_normal(3))))
                    for v in sensors}
        lam = float(rng.choice([0.0, 0.01, 0.1, 1.0]))
        out = augment(net, readings, inflow, AugmentationConfig(lambda_smooth=lam, max_iters=100))
        hist = np.array(out.history)
        assert np.all(np.diff(hist) <= 0.0)
        assert out.residual <= hist[0]


def test_gradient_matches_central_differences(rng):
    for _ in range(10):
        ids, _, net, inflow = _tree_fixture(rng, 10)
        d = np.array([inflow[v] for v in ids])
        scale = tuple(rng.uniform(0.5, 2.0, 3))
        model = PhysicsModel(net, float(rng.uniform(0, 1)), scale)
        x = solve_steady_state(net, inflow).values * (1 + 0.1 * rng.standard_normal((10, 3)))
        g = model.gradient(x, d).reshape(-1)
        fd = np.empty_like(g)
        flat = x.reshape(-1)
        for j in range(flat.size):
            h = 1e-6 * max(1.0, abs(flat[j]))
            xp, xm = flat.copy(), flat.copy()
            xp[j] += h
            xm[j] -= h
            fd[j] = (model.objective(xp.reshape(x.shape), d)
                     - model.objective(xm.reshape(x.shape), d)) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_larger_lambda_gives_smoother_field(rng):
    ids, _, net, inflow = _tree_fixture(rng, 12)
    truth = solve_steady_state(net, inflow)
    readings = {v: NodeState(*(np.array(truth[v]) * (1 + 0.1 * rng.standard_normal(3))))
                for v in ids[::3]}

    def roughness(values):
        m = PhysicsModel(net)
        return float(np.sum((values[m.dst] - values[m.src]) ** 2))

    rough = augment(net, readings, inflow, AugmentationConfig(lambda_smooth=0.0, max_iters=300))
    smooth = augment(net, readings, inflow, AugmentationConfig(lambda_smooth=10.0, max_iters=300))
    assert roughness(smooth.frame.values) <= roughness(rough.frame.values)


def test_lambda_biases_minimizer():
    net = build_network([("A", "B"), ("B", "C")])
    inflow = {"A": 0.02, "B": 0.01, "C": 0.0}
    truth = solve_steady_state(net, inflow)
    out = augment(net, _readings(truth, ["C"]), inflow, AugmentationConfig(lambda_smooth=1.0))
    assert abs(out.frame["A"].flow - truth["A"].flow) > 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(tol=0)
    with pytest.raises(ValueError):
        AugmentationConfig(max_iters=0)
    with pytest.raises(ValueError):
        AugmentationConfig(lambda_smooth=-1)


def test_series_warm_start_matches_truth(campus):
    pats = {n.id: DemandPattern(n.base_demand, 0.3) for n in campus.nodes}
    truth = simulate(campus, pats, 6)
    demands = np.column_stack([pats[v].generate(6) for v in campus.node_ids])
    sensors = ["OUT", "J06", "J13"]
    full, frames = augment_series(campus, truth, sensors, demands, EXACT)
    np.testing.assert_allclose(full.data[:, :, FLOW], truth.data[:, :, FLOW], rtol=1e-4)
    np.testing.assert_allclose(full.data[:, :, PRESSURE], truth.data[:, :, PRESSURE], rtol=1e-4)
    assert all(f.converged for f in frames)
