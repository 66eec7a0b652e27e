"""Virtual sensors: physics-constrained state estimation at unmonitored nodes.

The estimate minimizes

    J(X) = ||F(X)||^2 + lambda * ||grad X||^2

over the states of unmonitored nodes, with monitored nodes held fixed at
their readings. ``F`` stacks the junction mass balances and the per-conduit
Hazen-Williams head-loss mismatches; ``grad X`` is the per-conduit
difference of node states. Every term is divided by a per-channel scale so
the three channels (flow, depth, head) weigh comparably.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .hydraulics import (
    DEPTH,
    FLOW,
    HW_DIAM_EXP,
    HW_FACTOR,
    HW_FLOW_EXP,
    PRESSURE,
    NodeState,
    StateFrame,
    TimeSeries,
)
from .network import Network

log = logging.getLogger(__name__)

MEASURED = "measured"
INFERRED = "inferred"


@dataclass(frozen=True)
class AugmentationConfig:
    lambda_smooth: float = 0.1
    max_iters: int = 5000
    tol: float = 1e-10
    step_size: float = 1.0
    # per-channel (flow, depth, head) scales; None means raw units
    channel_scale: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.channel_scale is not None and min(self.channel_scale) <= 0:
            raise ValueError("channel scales must be positive")


@dataclass(frozen=True)
class AugmentedFrame:
    frame: StateFrame
    residual: float
    provenance: dict[str, str]
    converged: bool = True
    iterations: int = 0
    history: tuple[float, ...] = field(default=(), repr=False)


def channel_scales(series: TimeSeries | np.ndarray) -> tuple[float, float, float]:
    """Per-channel standard deviation over all nodes and steps."""
    data = series.data if isinstance(series, TimeSeries) else np.asarray(series)
    flat = data.reshape(-1, 3)
    std = np.nanstd(flat, axis=0)
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    return tuple(float(s) for s in std)


class PhysicsModel:
    """Residual vector and Jacobian of the augmentation objective.

    Residual blocks, in order: n mass balances, m head-loss mismatches and
    3m smoothness differences (omitted when lambda is 0).
    """

    def __init__(self, net: Network, lambda_smooth: float = 0.0, scale=(1.0, 1.0, 1.0)):
        self.net = net
        self.n = len(net.nodes)
        self.m = len(net.conduits)
        self.lam = float(lambda_smooth)
        self.scale = np.asarray(scale, dtype=float)
        shares = net.split_fractions
        self.src = np.array([net.index(c.from_node) for c in net.conduits], dtype=int)
        self.dst = np.array([net.index(c.to_node) for c in net.conduits], dtype=int)
        self.share = np.array([shares[c.id] for c in net.conduits])
        self.k_hw = np.array([
            HW_FACTOR * c.length / (c.hw_coefficient * c.diameter**HW_DIAM_EXP) ** HW_FLOW_EXP
            for c in net.conduits
        ])
        self._linear_jac = self._build_linear_jacobian()

    @property
    def n_residuals(self) -> int:
        return self.n + self.m + (3 * self.m if self.lam > 0 else 0)

    def mass_imbalance(self, x: np.ndarray, demands: np.ndarray) -> np.ndarray:
        q = x[:, FLOW]
        r = demands - q
        np.add.at(r, self.dst, self.share * q[self.src])
        return r

    def headloss_mismatch(self, x: np.ndarray) -> np.ndarray:
        flow = self.share * x[self.src, FLOW]
        predicted = self.k_hw * np.sign(flow) * np.abs(flow) ** HW_FLOW_EXP
        return (x[self.src, PRESSURE] - x[self.dst, PRESSURE]) - predicted

    def residuals(self, x: np.ndarray, demands: np.ndarray) -> np.ndarray:
        sq, _, sp = self.scale
        parts = [self.mass_imbalance(x, demands) / sq, self.headloss_mismatch(x) / sp]
        if self.lam > 0:
            diff = (x[self.dst] - x[self.src]) / self.scale
            parts.append(np.sqrt(self.lam) * diff.T.ravel())
        return np.concatenate(parts)

    def objective(self, x: np.ndarray, demands: np.ndarray) -> float:
        r = self.residuals(x, demands)
        return float(r @ r)

    def _col(self, node: int, ch: int) -> int:
        return 3 * node + ch

    def _build_linear_jacobian(self) -> np.ndarray:
        n, m = self.n, self.m
        sq, _, sp = self.scale
        J = np.zeros((self.n_residuals, 3 * n))
        for v in range(n):
            J[v, self._col(v, FLOW)] -= 1.0 / sq
        for k in range(m):
            u, w = self.src[k], self.dst[k]
            J[w, self._col(u, FLOW)] += self.share[k] / sq
            J[n + k, self._col(u, PRESSURE)] += 1.0 / sp
            J[n + k, self._col(w, PRESSURE)] -= 1.0 / sp
        if self.lam > 0:
            root = np.sqrt(self.lam)
            for ch in (FLOW, DEPTH, PRESSURE):
                for k in range(m):
                    row = n + m + ch * m + k
                    J[row, self._col(self.dst[k], ch)] += root / self.scale[ch]
                    J[row, self._col(self.src[k], ch)] -= root / self.scale[ch]
        return J

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = self._linear_jac.copy()
        flow = self.share * x[self.src, FLOW]
        slope = self.k_hw * HW_FLOW_EXP * np.abs(flow) ** (HW_FLOW_EXP - 1.0) * self.share
        rows = self.n + np.arange(self.m)
        cols = 3 * self.src + FLOW
        J[rows, cols] -= slope / self.scale[PRESSURE]
        return J

    def gradient(self, x: np.ndarray, demands: np.ndarray) -> np.ndarray:
        """Gradient of the objective with respect to all 3n state entries."""
        return 2.0 * self.jacobian(x).T @ self.residuals(x, demands)


def _as_values(frame) -> np.ndarray:
    if isinstance(frame, StateFrame):
        return np.asarray(frame.values, dtype=float)
    return np.asarray(frame, dtype=float)


def residual_components(net: Network, frame, demands: Mapping[str, float]):
    """Raw (mass imbalance per node, head-loss mismatch per conduit)."""
    model = PhysicsModel(net)
    d = _demand_array(net, demands)
    x = _as_values(frame)
    return model.mass_imbalance(x, d), model.headloss_mismatch(x)


def physics_residual(net: Network, frame, demands: Mapping[str, float]) -> float:
    """Sum of squared mass imbalances plus squared head-loss mismatches, raw units."""
    mass, energy = residual_components(net, frame, demands)
    return float(mass @ mass + energy @ energy)


def _demand_array(net: Network, demands) -> np.ndarray:
    if isinstance(demands, Mapping):
        d = np.zeros(len(net.nodes))
        for v, val in demands.items():
            d[net.index(v)] = val
        return d
    return np.asarray(demands, dtype=float)


def _readings_arrays(net: Network, readings: Mapping[str, NodeState]):
    values = np.full((len(net.nodes), 3), np.nan)
    for v, state in readings.items():
        values[net.index(v)] = tuple(state)
    fixed = np.isfinite(values)
    return values, fixed


def augment(
    net: Network,
    readings: Mapping[str, NodeState],
    demands: Mapping[str, float] | np.ndarray,
    cfg: AugmentationConfig = AugmentationConfig(),
    *,
    t: int = 0,
    init: np.ndarray | None = None,
    model: PhysicsModel | None = None,
) -> AugmentedFrame:
    """Estimate the full network state from sparse readings.

    Monitored entries are hard constraints. A NaN channel in a reading is
    treated as unmonitored. The solver is Gauss-Newton on the free entries
    with Armijo backtracking, falling back to steepest descent when the
    Gauss-Newton direction is not a descent direction, so the objective
    never increases between iterations.

    ``init`` overrides the default start (per-channel mean of the readings)
    for warm-started sequences; ``model`` lets callers reuse a prebuilt
    :class:`PhysicsModel`.
    """
    d = _demand_array(net, demands)
    values, fixed = _readings_arrays(net, readings)
    scale = cfg.channel_scale or (1.0, 1.0, 1.0)
    if model is None:
        model = PhysicsModel(net, cfg.lambda_smooth, scale)

    if init is not None:
        x = np.array(init, dtype=float)
    else:
        x = np.zeros((len(net.nodes), 3))
        for ch in range(3):
            col = values[:, ch]
            known = col[np.isfinite(col)]
            x[:, ch] = known.mean() if known.size else 0.0
    x[fixed] = values[fixed]

    provenance = {
        v: MEASURED if fixed[i].all() else INFERRED for i, v in enumerate(net.node_ids)
    }
    free = ~fixed.ravel()
    f = model.objective(x, d)
    history = [f]
    converged = not free.any()
    iterations = 0

    while not converged and iterations < cfg.max_iters:
        r = model.residuals(x, d)
        J = model.jacobian(x)[:, free]
        g = 2.0 * J.T @ r
        if f <= cfg.tol or np.max(np.abs(g)) <= cfg.tol:
            converged = True
            break
        direction, *_ = np.linalg.lstsq(J, -r, rcond=None)
        slope = float(g @ direction)
        if not slope < 0:
            direction = -g
            slope = float(g @ direction)

        step = cfg.step_size
        accepted = False
        while step > 1e-30:
            trial = x.copy()
            trial.ravel()[free] += step * direction
            f_trial = model.objective(trial, d)
            if f_trial <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        iterations += 1
        if not accepted:
            # no decrease representable in floating point: at a minimum
            converged = True
            break
        decrease = f - f_trial
        x, f = trial, f_trial
        history.append(f)
        if f <= cfg.tol or decrease <= cfg.tol * max(f, 1e-300):
            converged = True

    if not converged:
        log.warning("augmentation did not converge in %d iterations (J=%.3e)", cfg.max_iters, f)
    return AugmentedFrame(
        frame=StateFrame(t, net.node_ids, x),
        residual=f,
        provenance=provenance,
        converged=converged,
        iterations=iterations,
        history=tuple(history),
    )


def augment_series(
    net: Network,
    sparse: TimeSeries,
    sensors,
    demands: np.ndarray,
    cfg: AugmentationConfig = AugmentationConfig(),
) -> tuple[TimeSeries, list[AugmentedFrame]]:
    """Augment every frame of ``sparse`` using only the ``sensors`` rows.

    ``demands`` is (steps, n). Each frame is warm-started from the previous
    estimate.
    """
    idx = [net.index(v) for v in sensors]
    scale = cfg.channel_scale or (1.0, 1.0, 1.0)
    model = PhysicsModel(net, cfg.lambda_smooth, scale)
    out = np.empty_like(sparse.data)
    frames = []
    prev = None
    for t in range(len(sparse)):
        readings = {net.node_ids[i]: NodeState(*sparse.data[t, i]) for i in idx}
        result = augment(net, readings, demands[t], cfg, t=t, init=prev, model=model)
        out[t] = result.frame.values
        prev = result.frame.values
        frames.append(result)
    return TimeSeries(sparse.node_ids, out, sparse.dt), frames
