"""Online mixture-of-experts forecaster.

Experts map the observed history to a one-step-ahead network state. The
gate weights them by a softmax over exponentially smoothed per-expert
losses:

    w_m = exp(-lam * L_m) / sum_j exp(-lam * L_j)
    L_m <- (1 - beta) * L_m + beta * loss_m
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .network import Network

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 12


class ForecastError(RuntimeError):
    pass


# -- gating ----------------------------------------------------------------


def gate_weights(losses, lambda_gate: float) -> np.ndarray:
    """Softmax of ``-lambda_gate * losses``.

    The minimum loss is subtracted before scaling, so adding a constant to
    every loss leaves the weights bit-identical whenever the shifted losses
    are exactly representable.
    """
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("gate needs at least one expert")
    z = -lambda_gate * (losses - losses.min())
    w = np.exp(z)
    return w / w.sum()


@dataclass(frozen=True)
class GateState:
    smoothed_loss: tuple[float, ...]
    lambda_gate: float = 5.0
    ema_beta: float = 0.1

    def __post_init__(self):
        if not self.lambda_gate >= 0:
            raise ValueError("lambda_gate must be >= 0")
        if not 0 < self.ema_beta <= 1:
            raise ValueError("ema_beta must lie in (0, 1]")
        if any(loss < 0 for loss in self.smoothed_loss):
            raise ValueError("smoothed losses must be >= 0")

    @classmethod
    def cold(cls, n_experts: int, lambda_gate: float = 5.0, ema_beta: float = 0.1) -> "GateState":
        return cls((0.0,) * n_experts, lambda_gate, ema_beta)

    @property
    def weights(self) -> np.ndarray:
        return gate_weights(self.smoothed_loss, self.lambda_gate)


def update_gate(state: GateState, losses) -> GateState:
    losses = np.asarray(losses, dtype=float)
    if losses.shape != (len(state.smoothed_loss),):
        raise ValueError("need exactly one loss per expert")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and >= 0")
    b = state.ema_beta
    new = [(1 - b) * old + b * loss for old, loss in zip(state.smoothed_loss, losses)]
    return replace(state, smoothed_loss=tuple(new))


# -- experts ---------------------------------------------------------------


class Expert:
    """One-step forecaster over the full network state.

    ``history`` is an array (t, n, 3) of every frame observed so far; the
    forecast is for frame ``t``. Experts read only as far back as they
    need.
    """

    name = "expert"
    min_history = 1

    def fit(self, train: np.ndarray, net: Network) -> "Expert":
        return self

    def predict(self, history: np.ndarray, net: Network) -> np.ndarray:
        raise NotImplementedError


class Persistence(Expert):
    name = "persistence"

    def predict(self, history, net):
        return history[-1].copy()


class SeasonalNaive(Expert):
    """Repeat the frame one period back; persistence until a period is seen."""

    name = "seasonal_naive"

    def __init__(self, period: int = 144):
        self.period = period

    def predict(self, history, net):
        if len(history) >= self.period:
            return history[-self.period].copy()
        return history[-1].copy()


class LinearAR(Expert):
    """Per node and channel least-squares AR(p) with intercept."""

    name = "linear_ar3"

    def __init__(self, order: int = 3):
        self.order = order
        self.min_history = order
        self.coef: np.ndarray | None = None  # (n, 3, order + 1)

    def fit(self, train, net):
        p = self.order
        steps, n, _ = train.shape
        if steps <= p + 1:
            raise ForecastError("training split too short for AR fit")
        coef = np.zeros((n, 3, p + 1))
        for i in range(n):
            for ch in range(3):
                y = train[:, i, ch]
                lags = np.column_stack([y[p - j - 1 : steps - j - 1] for j in range(p)])
                design = np.column_stack([lags, np.ones(steps - p)])
                coef[i, ch], *_ = np.linalg.lstsq(design, y[p:], rcond=None)
        self.coef = coef
        return self

    def predict(self, history, net):
        if self.coef is None:
            raise ForecastError("LinearAR used before fit")
        lags = history[-1 : -self.order - 1 : -1]  # most recent first, (p, n, 3)
        lags = np.moveaxis(lags, 0, -1)
        return np.einsum("ncp,ncp->nc", self.coef[..., :-1], lags) + self.coef[..., -1]


class GraphSmoothedPersistence(Expert):
    """Last frame averaged with its graph neighbours, one pass."""

    name = "graph_persistence"

    def __init__(self):
        self._nbrs: list[list[int]] | None = None

    def _neighbours(self, net):
        if self._nbrs is None:
            self._nbrs = [
                [i] + [net.index(u) for u in (*net.parents(v), *net.children(v))]
                for i, v in enumerate(net.node_ids)
            ]
        return self._nbrs

    def predict(self, history, net):
        last = history[-1]
        return np.stack([last[idx].mean(axis=0) for idx in self._neighbours(net)])


class DiurnalProfile(Expert):
    """Mean training-split state at the same phase of the daily cycle.

    Phase is the index of the forecast step modulo ``period``, so the
    history passed in must start at a period boundary of the training data.
    """

    name = "diurnal_profile"

    def __init__(self, period: int = 144):
        self.period = period
        self.profile: np.ndarray | None = None

    def fit(self, train, net):
        if len(train) < self.period:
            raise ForecastError("training split shorter than one period")
        phases = np.arange(len(train)) % self.period
        self.profile = np.stack([train[phases == k].mean(axis=0) for k in range(self.period)])
        return self

    def predict(self, history, net):
        if self.profile is None:
            raise ForecastError("DiurnalProfile used before fit")
        return self.profile[len(history) % self.period].copy()


EXPERTS: dict[str, Callable[..., Expert]] = {
    Persistence.name: Persistence,
    SeasonalNaive.name: SeasonalNaive,
    LinearAR.name: LinearAR,
    GraphSmoothedPersistence.name: GraphSmoothedPersistence,
    DiurnalProfile.name: DiurnalProfile,
}


def make_expert(name: str, period: int = 144) -> Expert:
    try:
        factory = EXPERTS[name]
    except KeyError:
        raise ValueError(f"unknown expert {name!r}; known: {sorted(EXPERTS)}") from None
    if factory in (SeasonalNaive, DiurnalProfile):
        return factory(period)
    return factory()


# -- ensemble --------------------------------------------------------------


@dataclass
class ForecastFrame:
    t: int
    combined: np.ndarray  # (n, 3)
    expert_predictions: dict[str, np.ndarray]
    weights: dict[str, float]


@dataclass
class MixtureOfExperts:
    experts: list[Expert]
    gate: GateState
    window: int = DEFAULT_WINDOW
    channel_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def from_names(
        cls,
        names: Sequence[str],
        *,
        lambda_gate: float = 5.0,
        ema_beta: float = 0.1,
        period: int = 144,
        window: int = DEFAULT_WINDOW,
    ) -> "MixtureOfExperts":
        experts = [make_expert(n, period) for n in names]
        return cls(experts, GateState.cold(len(experts), lambda_gate, ema_beta), window)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.experts]

    def fit(self, train: np.ndarray, net: Network) -> "MixtureOfExperts":
        """Fit experts and the loss standardization on a leak-free split."""
        for e in self.experts:
            e.fit(train, net)
        std = train.reshape(-1, 3).std(axis=0)
        self.channel_scale = np.where(std > 0, std, 1.0)
        return self

    def predict(self, history: np.ndarray, net: Network) -> ForecastFrame:
        history = np.asarray(history)
        if len(history) < self.window:
            raise ForecastError(f"need at least {self.window} frames of history")
        preds: dict[str, np.ndarray] = {}
        for e in self.experts:
            try:
                out = np.asarray(e.predict(history, net), dtype=float)
                if out.shape != history.shape[1:] or not np.all(np.isfinite(out)):
                    raise ForecastError(f"bad prediction shape/values from {e.name}")
            except Exception as exc:  # noqa: BLE001 - one failing expert must not stop the ensemble
                log.warning("expert %s failed at t=%d: %s", e.name, len(history), exc)
                continue
            preds[e.name] = out
        if not preds:
            raise ForecastError("every expert failed")
        all_w = self.gate.weights
        live = [i for i, e in enumerate(self.experts) if e.name in preds]
        w = all_w[live] / all_w[live].sum()
        combined = sum(wi * preds[self.experts[i].name] for wi, i in zip(w, live))
        weights = {self.experts[i].name: float(wi) for wi, i in zip(w, live)}
        return ForecastFrame(len(history), combined, preds, weights)

    def step_losses(self, forecast: ForecastFrame, actual: np.ndarray) -> np.ndarray:
        """Standardized MAE per expert; failed experts get their current smoothed loss."""
        out = np.array(self.gate.smoothed_loss, dtype=float)
        for i, e in enumerate(self.experts):
            pred = forecast.expert_predictions.get(e.name)
            if pred is not None:
                out[i] = float(np.mean(np.abs(pred - actual) / self.channel_scale))
        return out

    def update(self, forecast: ForecastFrame, actual: np.ndarray) -> None:
        self.gate = update_gate(self.gate, self.step_losses(forecast, actual))

    def predict_horizon(self, history: np.ndarray, net: Network, horizon: int = 12) -> np.ndarray:
        """Recursive multi-step forecast (horizon, n, 3); gate is not updated."""
        hist = np.asarray(history)
        out = []
        for _ in range(horizon):
            nxt = self.predict(hist, net).combined
            out.append(nxt)
            hist = np.concatenate([hist, nxt[None]], axis=0)
        return np.stack(out)
