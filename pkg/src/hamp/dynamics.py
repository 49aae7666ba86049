"""Particle dynamics on hypergraphs: forces, the node->edge->node message
pipeline, and the first-order, second-order and pure-diffusion steppers.

All steppers operate on :class:`~hamp.autodiff.Tensor` values so the same
code path serves simulation (under ``no_grad``) and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .hypergraph import Hypergraph
from .io import atomic_write_csv


class DivergenceError(RuntimeError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(f"non-finite state at step {step}" + (f": {msg}" if msg else ""))
        self.step = step


@dataclass
class DynamicsParams:
    tau: float = 0.1
    total_time: float = 1.0
    delta: float = 0.0
    epsilon: float = 0.0
    beta: float = 0.0
    omega: float = 1.0
    gamma: float = 0.05
    activation: str = "identity"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.total_time < self.tau - 1e-12:
            raise ValueError(f"total_time ({self.total_time}) must be >= tau ({self.tau})")
        for name in ("delta", "epsilon", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ad.ACTIVATIONS)}")
        if not math.isfinite(self.num_steps):
            raise ValueError("number of steps is not finite")

    @property
    def num_steps(self) -> int:
        return max(1, math.ceil(self.total_time / self.tau - 1e-9))

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


@dataclass
class NodeState:
    """Features ``x`` (and velocities ``v`` in second-order mode) plus their initial snapshots."""

    x: Tensor
    x0: Tensor
    v: Optional[Tensor] = None
    v0: Optional[Tensor] = None
    step: int = 0

    @classmethod
    def first_order(cls, x) -> "NodeState":
        x = as_tensor(x)
        return cls(x, x)

    @classmethod
    def second_order(cls, x, v) -> "NodeState":
        x, v = as_tensor(x), as_tensor(v)
        if x.shape != v.shape:
            raise ValueError(f"x {x.shape} and v {v.shape} differ")
        return cls(x, x, v, v)

    @property
    def second_order_mode(self) -> bool:
        return self.v is not None


def _param(a, name: str) -> Tensor:
    return Tensor(a, requires_grad=True, name=name)


@dataclass
class MessageParams:
    """Weights of the message pipeline.

    ``phi1_w`` transforms node rows before they are averaged into hyperedges;
    the gate (``gate_*``) maps each (node, hyperedge) pair to a coefficient in
    ``[-gamma, 1]``; ``psi_*`` combine a node's own row with its aggregated
    incoming messages. ``fixed_gate`` replaces the learned gate with constant
    per-incidence coefficients.
    """

    phi1_w: Tensor
    gate_wx: Tensor
    gate_wz: Tensor
    gate_b1: Tensor
    gate_w2: Tensor
    gate_b2: Tensor
    psi_wm: Tensor
    psi_wx: Tensor
    psi_b: Tensor
    gamma: float = 0.05
    norm: str = "sym"
    fixed_gate: Optional[np.ndarray] = None

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, gamma: float = 0.05,
             gate_hidden: Optional[int] = None, norm: str = "sym") -> "MessageParams":
        g = gate_hidden or d
        s, sg = 1.0 / math.sqrt(d), 1.0 / math.sqrt(2 * d)
        return cls(
            phi1_w=_param(np.eye(d) + rng.normal(0, 0.1 * s, (d, d)), "phi1.w"),
            gate_wx=_param(rng.normal(0, sg, (d, g)), "gate.wx"),
            gate_wz=_param(rng.normal(0, sg, (d, g)), "gate.wz"),
            gate_b1=_param(np.zeros((1, g)), "gate.b1"),
            gate_w2=_param(rng.normal(0, 1.0 / math.sqrt(g), (g, 1)), "gate.w2"),
            gate_b2=_param(np.zeros((1, 1)), "gate.b2"),
            psi_wm=_param(np.eye(d) + rng.normal(0, 0.1 * s, (d, d)), "psi.wm"),
            psi_wx=_param(rng.normal(0, 0.1 * s, (d, d)), "psi.wx"),
            psi_b=_param(np.zeros((1, d)), "psi.b"),
            gamma=gamma,
            norm=norm,
        )

    @classmethod
    def identity(cls, d: int, gamma: float = 0.0, norm: str = "sym",
                 fixed_gate: Optional[np.ndarray] = None) -> "MessageParams":
        """Identity transforms; the learned gate saturates at +1 unless ``fixed_gate`` is given."""
        return cls(
            phi1_w=_param(np.eye(d), "phi1.w"),
            gate_wx=_param(np.zeros((d, 1)), "gate.wx"),
            gate_wz=_param(np.zeros((d, 1)), "gate.wz"),
            gate_b1=_param(np.zeros((1, 1)), "gate.b1"),
            gate_w2=_param(np.zeros((1, 1)), "gate.w2"),
            gate_b2=_param(np.full((1, 1), 50.0), "gate.b2"),
            psi_wm=_param(np.eye(d), "psi.wm"),
            psi_wx=_param(np.zeros((d, d)), "psi.wx"),
            psi_b=_param(np.zeros((1, d)), "psi.b"),
            gamma=gamma,
            norm=norm,
            fixed_gate=fixed_gate,
        )

    @classmethod
    def zeros(cls, d: int) -> "MessageParams":
        mp = cls.identity(d)
        for t in (mp.phi1_w, mp.psi_wm):
            t.data[:] = 0.0
        return mp

    @classmethod
    def normalized_attraction(cls, d: int, h: Hypergraph) -> "MessageParams":
        """Gate clamped to +1 on every incidence: the pipeline computes P·x."""
        return cls.identity(d, fixed_gate=np.ones(h.num_incidences))

    def tensors(self) -> dict:
        names = ("phi1_w", "psi_wm", "psi_wx", "psi_b")
        if self.fixed_gate is None:
            names += ("gate_wx", "gate_wz", "gate_b1", "gate_w2", "gate_b2")
        return {getattr(self, n).name: getattr(self, n) for n in names}


# -- forces -----------------------------------------------------------------------


def allen_cahn_force(p, delta):
    """Double-well restoring force delta * (1 - p^2) * p, elementwise.

    Works for numpy arrays and tensors; ``delta`` may be a float or a
    single-element tensor.
    """
    if isinstance(p, Tensor):
        return (p - p * p * p) * delta
    p = np.asarray(p, dtype=np.float64)
    return delta * (1.0 - p * p) * p


def brownian_increment(shape, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama increment of standard Brownian motion over a step tau."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return rng.normal(0.0, math.sqrt(tau), size=shape)


# -- message pipeline ---------------------------------------------------------------


def node_to_edge(x, h: Hypergraph, mp: MessageParams, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Average the transformed member rows of each hyperedge -> (|E|, d)."""
    x = as_tensor(x)
    if x.shape[0] != h.num_nodes:
        raise ad.ShapeError(f"{x.shape[0]} feature rows for {h.num_nodes} nodes")
    if dropout > 0:
        x = ad.dropout(x, dropout, rng)
    return ad.spmm(h.edge_mean_operator(mp.norm), x @ mp.phi1_w)


def gate_coefficients(x: Tensor, z_per_incidence: Tensor, h: Hypergraph, mp: MessageParams) -> Tensor:
    """Signed coefficient in [-gamma, 1] for every incidence, as an (nnz, 1) column."""
    if mp.fixed_gate is not None:
        c = np.asarray(mp.fixed_gate, dtype=np.float64).reshape(-1, 1)
        if c.shape[0] != h.num_incidences:
            raise ad.ShapeError(f"fixed gate has {c.shape[0]} entries for {h.num_incidences} incidences")
        return Tensor(c)
    xg = ad.spmm(h.gather_nodes, x)
    hidden = ad.relu(ad.add(xg @ mp.gate_wx + z_per_incidence @ mp.gate_wz, mp.gate_b1))
    s = ad.add(hidden @ mp.gate_w2, mp.gate_b2)
    return ad.sigmoid(s) * (1.0 + mp.gamma) - mp.gamma


def edge_to_node(x, z, h: Hypergraph, mp: MessageParams) -> Tensor:
    """Gate, sum and combine hyperedge messages back into node rows -> (N, d)."""
    x, z = as_tensor(x), as_tensor(z)
    zg = ad.spmm(h.gather_edges, z)
    c = gate_coefficients(x, zg, h, mp)
    c = c * Tensor(h.incidence_coefficients(mp.norm).reshape(-1, 1))
    agg = ad.spmm(h.scatter_nodes, ad.scale_rows(zg, c))
    return ad.add(agg @ mp.psi_wm + x @ mp.psi_wx, mp.psi_b)


def message_pipeline(p, h: Hypergraph, mp: MessageParams, dropout: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    return edge_to_node(p, node_to_edge(p, h, mp, dropout, rng), h, mp)


# -- steppers -----------------------------------------------------------------------


def _check_finite(t: Tensor, step: int) -> None:
    if not np.isfinite(t.data).all():
        raise DivergenceError(step)


def _velocity_field(p: Tensor, p0: Tensor, messages: Tensor, dp: DynamicsParams,
                    rng, delta, epsilon) -> Tensor:
    """sigma(messages - omega p + delta f_d(p) + epsilon B + beta p0)."""
    delta = dp.delta if delta is None else delta
    epsilon = dp.epsilon if epsilon is None else epsilon
    force = messages
    if dp.omega != 0:
        force = force - p * dp.omega
    if isinstance(delta, Tensor) or delta != 0:
        force = force + allen_cahn_force(p, delta)
    if isinstance(epsilon, Tensor) or epsilon != 0:
        if rng is None:
            raise ValueError("a noise source is required when epsilon != 0")
        noise = Tensor(brownian_increment(p.shape, dp.tau, rng))
        force = force + noise * epsilon
    if dp.beta != 0:
        force = force + p0 * dp.beta
    return ad.ACTIVATIONS[dp.activation](force)


def hamp1_step(state: NodeState, h: Hypergraph, mp: MessageParams, dp: DynamicsParams,
               noise_source: Optional[np.random.Generator] = None, *, messages=None,
               delta=None, epsilon=None, dropout: float = 0.0,
               dropout_rng: Optional[np.random.Generator] = None) -> NodeState:
    """One explicit step of the first-order system.

    ``messages`` substitutes a precomputed edge->node aggregate for the
    pipeline. ``delta``/``epsilon`` override the float coefficients in ``dp``
    (used for trainable coefficients).
    """
    if state.second_order_mode:
        raise ValueError("hamp1_step called on a second-order state")
    x = state.x
    m = message_pipeline(x, h, mp, dropout, dropout_rng) if messages is None else as_tensor(messages)
    x_new = x + _velocity_field(x, state.x0, m, dp, noise_source, delta, epsilon) * dp.tau
    _check_finite(x_new, state.step + 1)
    return NodeState(x_new, state.x0, None, None, state.step + 1)


def hamp2_step(state: NodeState, h: Hypergraph, mp: MessageParams, dp: DynamicsParams,
               noise_source: Optional[np.random.Generator] = None, *, messages=None,
               delta=None, epsilon=None, dropout: float = 0.0,
               dropout_rng: Optional[np.random.Generator] = None) -> NodeState:
    """One step of the second-order system: velocity update, then position update."""
    if not state.second_order_mode:
        raise ValueError("hamp2_step needs a state with velocities")
    v = state.v
    m = message_pipeline(v, h, mp, dropout, dropout_rng) if messages is None else as_tensor(messages)
    v_new = v + _velocity_field(v, state.v0, m, dp, noise_source, delta, epsilon) * dp.tau
    x_new = state.x + v_new * dp.tau
    _check_finite(v_new, state.step + 1)
    _check_finite(x_new, state.step + 1)
    return NodeState(x_new, state.x0, v_new, state.v0, state.step + 1)


def initial_velocity(x0, weight, bias=None) -> Tensor:
    """V(0) = Linear(X(0)) - X(0)."""
    x0 = as_tensor(x0)
    lin = x0 @ as_tensor(weight)
    if bias is not None:
        lin = ad.add(lin, as_tensor(bias))
    return lin - x0


def diffusion_step(x, P: sp.spmatrix, tau: float):
    """Forward Euler step of dx/dt = -(I - P) x; accepts an ndarray or a tensor."""
    if isinstance(x, Tensor):
        return x + (ad.spmm(P, x) - x) * tau
    x = np.asarray(x, dtype=np.float64)
    return x + tau * (np.asarray(P @ x) - x)


# -- export -------------------------------------------------------------------------


def export_snapshots(path, snapshots) -> None:
    """Write ``(step, X)`` pairs as rows ``step,node,f0,...``."""
    snapshots = list(snapshots)
    d = snapshots[0][1].shape[1] if snapshots else 0
    header = ["step", "node"] + [f"f{j}" for j in range(d)]

    def rows():
        for step, X in snapshots:
            for i, row in enumerate(np.asarray(X)):
                yield [step, i, *row.tolist()]

    atomic_write_csv(path, header, rows())
