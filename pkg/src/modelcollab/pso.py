"""Classic particle swarm optimization over flat real vectors (maximization)."""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PSOHyper:
    inertia: float = 0.7
    cognitive: float = 1.5
    social: float = 1.5
    n_particles: int = 8


@dataclass
class PSOState:
    positions: list[np.ndarray]
    velocities: list[np.ndarray]
    pbest_positions: list[np.ndarray]
    pbest_utilities: list[float]
    gbest_position: np.ndarray | None
    gbest_utility: float
    hyper: PSOHyper
    rng: np.random.Generator
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, positions: Sequence, velocities: Sequence | None = None, hyper: PSOHyper | None = None,
             seed: int = 0) -> PSOState:
        pos = [np.array(p, dtype=np.float64) for p in positions]
        if velocities is None:
            vel = [np.zeros_like(p) for p in pos]
        else:
            vel = [np.array(v, dtype=np.float64) for v in velocities]
        return cls(pos, vel, [p.copy() for p in pos], [-math.inf] * len(pos), None, -math.inf,
                   hyper or PSOHyper(), np.random.default_rng(seed))


def _clean(u) -> float:
    u = float(u)
    return u if math.isfinite(u) else -math.inf


def update_bests(state: PSOState, utilities: Sequence[float]) -> PSOState:
    """Fold utilities of the current positions into personal and global bests."""
    if len(utilities) != len(state.positions):
        raise ValueError("one utility per particle required")
    for i, u in enumerate(utilities):
        u = _clean(u)
        if u > state.pbest_utilities[i]:
            state.pbest_utilities[i] = u
            state.pbest_positions[i] = state.positions[i].copy()
        if u > state.gbest_utility:
            state.gbest_utility = u
            state.gbest_position = state.positions[i].copy()
    state.history.append(state.gbest_utility)
    return state


def pso_step(state: PSOState, utilities: Sequence[float]) -> PSOState:
    """Update bests, then move every particle.

    v <- w*v + c1*r1*(pbest - x) + c2*r2*(gbest - x);  x <- x + v,
    with r1, r2 drawn elementwise from U[0, 1).
    """
    update_bests(state, utilities)
    h = state.hyper
    for i, x in enumerate(state.positions):
        r1 = state.rng.random(x.shape)
        r2 = state.rng.random(x.shape)
        v = h.inertia * state.velocities[i] + h.cognitive * r1 * (state.pbest_positions[i] - x)
        if state.gbest_position is not None:
            v = v + h.social * r2 * (state.gbest_position - x)
        state.velocities[i] = v
        state.positions[i] = x + v
    return state


def pso_maximize(objective: Callable[[np.ndarray], float], positions: Sequence, iterations: int,
                 hyper: PSOHyper | None = None, seed: int = 0, velocities: Sequence | None = None
                 ) -> PSOState:
    """Run ``iterations`` evaluate-then-move rounds, then score the final positions.

    A failing objective call scores -inf for that particle.
    """
    state = PSOState.init(positions, velocities, hyper, seed)

    def evaluate():
        out = []
        for x in state.positions:
            try:
                out.append(objective(x))
            except Exception:  # noqa: BLE001 - a failed particle is just infeasible
                out.append(-math.inf)
        return out

    for _ in range(iterations):
        pso_step(state, evaluate())
    update_bests(state, evaluate())
    return state
