"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aquasentinel.augmentation import AugmentationConfig, PhysicsModel, augment  # noqa: E402
from aquasentinel.forecasting import (  # noqa: E402
    Expert,
    GateState,
    MixtureOfExperts,
    Persistence,
    gate_weights,
)
from aquasentinel.harness import (  # noqa: E402
    ExperimentConfig,
    evaluate,
    generate_scenarios,
    run_batch,
)
from aquasentinel.hydraulics import (  # noqa: E402
    FLOW,
    DemandPattern,
    LeakKind,
    NodeState,
    hazen_williams_headloss,
    leak_series,
    simulate,
    solve_steady_state,
)
from aquasentinel.localization import localize  # noqa: E402
from aquasentinel.network import betweenness, build_network, bundled_network  # noqa: E402
from aquasentinel.rtca import DetectorState, RtcaConfig, step  # noqa: E402
from oracles import (  # noqa: E402
    brute_betweenness,
    brute_sources,
    hw_scalar,
    random_dag,
    random_tree,
    rtca_batch,
)

RESULTS: list[str] = []
CONSTANT_KINDS = [k for k in LeakKind if k.is_constant]


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)


@pytest.fixture(scope="module")
def campus():
    return bundled_network()


_BATCHES: dict[int, tuple[list, float]] = {}


def batch(seed: int, kinds=None):
    """Full 110-case batch for one root seed (cached), with its wall time."""
    if seed not in _BATCHES:
        cfg = ExperimentConfig(seed=seed)
        scenarios = generate_scenarios(cfg.network(), seed)
        t0 = time.perf_counter()
        cases = run_batch(cfg, scenarios)
        _BATCHES[seed] = (cases, time.perf_counter() - t0)
    cases, elapsed = _BATCHES[seed]
    if kinds is not None:
        cases = [c for c in cases if c.scenario.kind in kinds]
    return cases, elapsed


def test_criterion_01_experiment_structure():
    cases, elapsed = batch(0)
    rep = evaluate(cases)
    rates = {k: rep.per_kind[k.value].detection_rate for k in LeakKind}
    big = all(rates[k] == 1.0 for k in CONSTANT_KINDS if k is not LeakKind.CONSTANT_LT5)
    small = rates[LeakKind.CONSTANT_LT5] >= 0.95 and rates[LeakKind.DYNAMIC_RAMP] >= 0.95
    quick = rep.within_10_of_detected >= 0.85
    ok = len(cases) == 110 and elapsed < 300 and big and small and quick and not rep.failed_cases
    detail = (f"{len(cases)} cases in {elapsed:.0f}s; detection "
              + ", ".join(f"{k.value}={r:.0%}" for k, r in rates.items())
              + f"; within 10 steps {rep.within_10_of_detected:.1%} of detected")
    record(1, "110-case reproduction", ok, detail)
    assert ok


def test_criterion_02_delay_ordering():
    delays = {k: [] for k in CONSTANT_KINDS}
    for seed in range(5):
        cases, _ = batch(seed)
        for k in CONSTANT_KINDS:
            d = [c.detection_delay for c in cases if c.scenario.kind is k and c.detected]
            delays[k].extend(d)
    means = [float(np.mean(delays[k])) for k in CONSTANT_KINDS]
    ok = all(a >= b for a, b in zip(means, means[1:]))
    record(2, "delay non-increasing with magnitude", ok,
           " >= ".join(f"{m:.2f}" for m in means) + " (5 seeds)")
    assert ok


def test_criterion_03_false_alarms():
    cfg = ExperimentConfig(seed=0)
    cases = run_batch(cfg, [None] * 100)
    events = sum(c.n_events for c in cases)
    ok = events == 0 and not any(c.error for c in cases)
    record(3, "no confirmations in 100 leak-free weeks", ok, f"{events} events")
    assert ok


def test_criterion_04_conservation(campus):
    from aquasentinel.hydraulics import LeakScenario, Ramp

    pats = {n.id: DemandPattern(n.base_demand, 0.3, 144, 1e-3, i)
            for i, n in enumerate(campus.nodes)}
    scenario = LeakScenario("C11", LeakKind.DYNAMIC_RAMP, 0.35, 432, Ramp(0.006, 0.35, 144))
    worst = 0.0
    for sc in (None, scenario):
        series = simulate(campus, pats, 1008, sc)
        demand = np.column_stack([pats[v].generate(1008) for v in campus.node_ids])
        leaks = leak_series(campus, series, sc) if sc else np.zeros((1008, len(campus.conduits)))
        for v in campus.node_ids:
            i = campus.index(v)
            inflow = demand[:, i].copy()
            outflow = np.zeros(1008)
            for k, c in enumerate(campus.conduits):
                if c.to_node == v:
                    inflow += series.conduit_outflow[:, k]
                if c.from_node == v:
                    outflow += series.conduit_outflow[:, k] + leaks[:, k]
            if not campus.out_conduits(v):
                outflow = series.data[:, i, FLOW]
            worst = max(worst, float(np.abs(inflow - outflow).max()))
    ok = worst <= 1e-9
    record(4, "junction mass balance over a week", ok, f"max residual {worst:.2e} m3/s")
    assert ok


def test_criterion_05_hazen_williams():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        q, length = rng.uniform(0, 2), rng.uniform(1, 2000)
        c, d = rng.uniform(50, 160), rng.uniform(0.03, 2.0)
        want = hw_scalar(q, length, c, d)
        got = hazen_williams_headloss(q, length, c, d)
        worst = max(worst, abs(got - want) / abs(want) if want else abs(got))
    ok = worst <= 1e-9
    record(5, "Hazen-Williams vs scalar evaluation", ok, f"max rel error {worst:.2e}")
    assert ok


def test_criterion_06_rtca_oracle():
    rng = np.random.default_rng(6)
    mismatched = 0
    for _ in range(20):
        k1 = float(rng.uniform(0.5, 3.0))
        cfg = RtcaConfig(W=int(rng.integers(1, 30)), t_persist=int(rng.integers(1, 6)),
                         alpha_ema=float(rng.uniform(0.005, 0.3)), k1=k1,
                         k2=k1 + float(rng.uniform(0, 1.5)), epsilon=1e-6,
                         warmup_steps=int(rng.integers(0, 500)))
        n = 10_000
        y_hat = 1.0 + 0.3 * np.sin(np.arange(n) / 20.0) + 0.05 * rng.random(n)
        y = y_hat * (1 + 0.02 * rng.standard_normal(n))
        for _ in range(int(rng.integers(5, 40))):
            a = int(rng.integers(0, n))
            y[a: a + int(rng.integers(1, 60))] *= 1 + float(rng.uniform(0.05, 0.5))
        state = DetectorState.initial(cfg)
        trace = [step(state, y[t], y_hat[t], cfg, t)[1] for t in range(n)]
        e_rt, e_c, mu, s2, status = rtca_batch(y, y_hat, cfg.W, cfg.t_persist, cfg.alpha_ema,
                                               cfg.k1, cfg.k2, cfg.epsilon, cfg.warmup_steps)
        same = ([r.e_rt for r in trace] == e_rt.tolist()
                and [r.e_c for r in trace] == e_c.tolist()
                and [r.mu for r in trace] == mu.tolist()
                and [r.sigma2 for r in trace] == s2.tolist()
                and [r.status.value for r in trace] == status)
        mismatched += not same
    ok = mismatched == 0
    record(6, "streaming RTCA == batch oracle", ok, f"{20 - mismatched}/20 configs identical")
    assert ok


def test_criterion_07_localization():
    cases, _ = batch(0)
    detected = [c for c in cases if c.detected]
    good = sum(c.localization_hit in ("exact", "adjacent") for c in detected)
    rate = good / len(detected) if detected else 0.0

    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(200):
        ids, edges = random_dag(rng, int(rng.integers(2, 12)), p=float(rng.uniform(0.1, 0.6)))
        net = build_network(edges, ids)
        anomalous = {v for v in ids if rng.random() < 0.4}
        mismatches += localize(net, anomalous).sources != brute_sources(ids, edges, anomalous)
    ok = rate >= 0.8 and mismatches == 0
    record(7, "localization", ok,
           f"exact/adjacent {good}/{len(detected)} = {rate:.1%}; oracle mismatches {mismatches}/200")
    assert ok


def test_criterion_08_gating(campus):
    rng = np.random.default_rng(8)
    worst = 0.0
    shift_exact = True
    for _ in range(500):
        losses = rng.uniform(0, 3, int(rng.integers(1, 8)))
        lam = float(rng.uniform(0, 20))
        w = gate_weights(losses, lam)
        e = [math.exp(-lam * l) for l in losses]
        worst = max(worst, max(abs(a - b / sum(e)) for a, b in zip(w, e)))
        shift = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        shifted = losses + shift
        if np.all(shifted - shift == losses) and np.all(shifted - losses == shift):
            shift_exact &= bool(np.array_equal(w, gate_weights(shifted, lam)))

    pats = {n.id: DemandPattern(n.base_demand, 0.3, 144, 1e-3, i)
            for i, n in enumerate(campus.nodes)}
    truth = simulate(campus, pats, 260).data
    noise = np.random.default_rng(9)

    class Oracle(Expert):
        name = "oracle"

        def predict(self, history, net):
            return truth[len(history)].copy()

    class Noisy(Expert):
        def __init__(self, name, level):
            self.name, self.level = name, level

        def predict(self, history, net):
            x = truth[len(history)]
            return x * (1 + self.level * noise.standard_normal(x.shape))

    mix = MixtureOfExperts([Noisy("noisy", 0.02), Persistence(), Oracle()], GateState.cold(3))
    mix.fit(truth[:50], campus)
    for t in range(50, 250):
        mix.update(mix.predict(truth[:t], campus), truth[t])
    w = mix.gate.weights
    dominates = bool(w[2] > w[0] and w[2] > w[1])
    ok = worst <= 1e-12 and shift_exact and dominates
    record(8, "gating", ok, f"max |w - direct| {worst:.1e}; shift exact {shift_exact}; "
                            f"planted expert weight {w[2]:.3f} after 200 steps")
    assert ok


def test_criterion_09_augmentation():
    rng = np.random.default_rng(10)
    exact = AugmentationConfig(lambda_smooth=0.0, tol=1e-24, max_iters=200)
    worst_rel = 0.0
    for _ in range(30):
        ids, edges = random_tree(rng, int(rng.integers(5, 20)))
        net = build_network(edges, ids)
        inflow = {v: float(rng.uniform(0.002, 0.03)) for v in ids}
        truth = solve_steady_state(net, inflow)
        sensors = rng.choice(ids, size=max(1, len(ids) // 4), replace=False)
        out = augment(net, {v: truth[v] for v in sensors}, inflow, exact)
        for v in ids:
            worst_rel = max(worst_rel, abs(out.frame[v].flow - truth[v].flow) / truth[v].flow)

    monotone = 0
    for _ in range(50):
        ids, edges = random_tree(rng, int(rng.integers(4, 14)))
        net = build_network(edges, ids)
        inflow = {v: float(rng.uniform(0.002, 0.03)) for v in ids}
        truth = solve_steady_state(net, inflow)
        readings = {v: NodeState(*(np.array(truth[v]) * (1 + 0.02 * rng.standard_normal(3))))
                    for v in rng.choice(ids, size=2, replace=False)}
        lam = float(rng.choice([0.0, 0.01, 0.1, 1.0]))
        hist = augment(net, readings, inflow, AugmentationConfig(lambda_smooth=lam,
                                                                 max_iters=100)).history
        monotone += bool(np.all(np.diff(hist) <= 0))

    worst_grad = 0.0
    for _ in range(10):
        ids, edges = random_tree(rng, 10)
        net = build_network(edges, ids)
        inflow = {v: float(rng.uniform(0.002, 0.03)) for v in ids}
        d = np.array([inflow[v] for v in ids])
        model = PhysicsModel(net, float(rng.uniform(0, 1)), tuple(rng.uniform(0.5, 2.0, 3)))
        x = solve_steady_state(net, inflow).values * (1 + 0.1 * rng.standard_normal((10, 3)))
        g = model.gradient(x, d).ravel()
        flat = x.ravel()
        fd = np.empty_like(g)
        for j in range(flat.size):
            h = 1e-6 * max(1.0, abs(flat[j]))
            xp, xm = flat.copy(), flat.copy()
            xp[j] += h
            xm[j] -= h
            fd[j] = (model.objective(xp.reshape(x.shape), d)
                     - model.objective(xm.reshape(x.shape), d)) / (2 * h)
        worst_grad = max(worst_grad, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))

    ok = worst_rel <= 1e-4 and monotone == 50 and worst_grad <= 1e-5
    record(9, "augmentation", ok, f"max flow rel error {worst_rel:.1e}; monotone {monotone}/50; "
                                  f"gradient rel error {worst_grad:.1e}")
    assert ok


def test_criterion_10_betweenness():
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(100):
        ids, edges = random_dag(rng, int(rng.integers(1, 7)), p=float(rng.uniform(0.2, 0.8)))
        got = betweenness(build_network(edges, ids))
        want = brute_betweenness(ids, edges)
        mismatches += any(abs(got[v] - want[v]) > 1e-12 for v in ids)
    ok = mismatches == 0
    record(10, "betweenness vs path enumeration", ok, f"{mismatches}/100 mismatches")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
