"""Run a dynamics trajectory and record an energy trace along the way."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .dynamics import (
    DivergenceError,
    DynamicsParams,
    MessageParams,
    NodeState,
    diffusion_step,
    hamp1_step,
    hamp2_step,
    initial_velocity,
)
from .hypergraph import Hypergraph, propagation_operator
from .metrics import EnergyTrace, trace_record

MODES = ("hamp1", "hamp2", "diffusion")


@dataclass
class Trajectory:
    trace: EnergyTrace
    final: np.ndarray
    snapshots: list = field(default_factory=list)
    velocity: Optional[np.ndarray] = None


def simulate(h: Hypergraph, x0, mode: str, dp: DynamicsParams, steps: int,
             mp: Optional[MessageParams] = None, groups=None, seed: int = 0,
             snapshot_every: int = 0, v0=None, normalized_energy: bool = False) -> Trajectory:
    """Integrate ``steps`` explicit steps from ``x0`` and trace the diagnostics.

    The trace holds ``steps + 1`` records (the initial state included). For
    ``hamp2`` the initial velocity is ``v0`` when given, otherwise
    ``Linear(x0) - x0`` with a seeded random near-identity linear map.
    Noise, when ``dp.epsilon > 0``, is drawn from a generator seeded by ``seed``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 1])
    d = x0.shape[1]
    P = propagation_operator(h) if (mode == "diffusion" or normalized_energy) else None
    P_trace = P if normalized_energy else None
    if mode != "diffusion" and mp is None:
        mp = MessageParams.init(d, rng, gamma=dp.gamma)

    trace = EnergyTrace()
    snaps = []
    v_final = None
    with ad.no_grad():
        if mode == "diffusion":
            x = x0
        elif mode == "hamp1":
            state = NodeState.first_order(x0)
        else:
            if v0 is None:
                w = np.eye(d) + rng.normal(0.0, 0.1, (d, d))
                v0 = initial_velocity(x0, w).data
            state = NodeState.second_order(x0, v0)

        def current():
            return x if mode == "diffusion" else state.x.data

        def record(step):
            cur = current()
            trace.append(trace_record(step, cur, h, groups, P_trace))
            if snapshot_every and step % snapshot_every == 0:
                snaps.append((step, cur.copy()))

        record(0)
        for step in range(1, steps + 1):
            if mode == "diffusion":
                x = diffusion_step(x, P, dp.tau)
                if not np.isfinite(x).all():
                    raise DivergenceError(step)
            elif mode == "hamp1":
                state = hamp1_step(state, h, mp, dp, noise_rng)
            else:
                state = hamp2_step(state, h, mp, dp, noise_rng)
            record(step)
        if mode == "hamp2":
            v_final = state.v.data.copy()
    return Trajectory(trace, current().copy(), snaps, v_final)
