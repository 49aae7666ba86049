"""Diagnostics constrained by the anti-over-smoothing theory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .hypergraph import Hypergraph, propagation_operator
from .io import atomic_write_csv


class UndefinedRatioError(ValueError):
    pass


def dirichlet_energy(x, h: Hypergraph) -> float:
    """Sum over hyperedges and ordered member pairs (i, j) of ||x_i - x_j||^2.

    Computed per hyperedge without forming pairs:
    sum_{i,j in e} ||x_i - x_j||^2 = 2 |e| sum_i ||x_i||^2 - 2 ||sum_i x_i||^2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    H = h.incidence
    sq = (x * x).sum(axis=1)
    sizes = h.edge_sizes.astype(np.float64)
    sum_sq = H.T @ sq
    sums = np.asarray(H.T @ x)
    per_edge = 2.0 * sizes * sum_sq - 2.0 * (sums * sums).sum(axis=1)
    # cancellation can leave tiny negatives
    return float(np.maximum(per_edge, 0.0).sum())


def normalized_dirichlet_energy(x, h: Hypergraph, P: Optional[sp.spmatrix] = None) -> float:
    """tr(xᵀ (I - P) x) for the normalized propagation operator P."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if P is None:
        P = propagation_operator(h)
    return float(max(np.sum(x * x) - np.sum(x * np.asarray(P @ x)), 0.0))


@dataclass
class Moments:
    """Second moments of a two-group (or one-group) feature matrix.

    ``*_sum`` entries are plain sums of squares; ``*_mean`` entries divide by
    the group size. ``mhat2_*`` use deviations from each group's own mean.
    """

    means: list
    m2_sum: list
    m2_mean: list
    mhat2_sum: float
    mhat2_mean: float

    @property
    def m2_sum_total(self) -> float:
        return float(sum(self.m2_sum))

    @property
    def m2_mean_total(self) -> float:
        return float(sum(self.m2_mean))


def _groups_of(groups, n: int) -> list:
    groups = np.asarray(groups)
    if groups.shape != (n,):
        raise ValueError(f"group assignment has shape {groups.shape}, expected ({n},)")
    return [np.flatnonzero(groups == g) for g in np.unique(groups)]


def second_moments(x, groups=None) -> Moments:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    idx_sets = [np.arange(x.shape[0])] if groups is None else _groups_of(groups, x.shape[0])
    if groups is not None and len(np.asarray(groups)) and len(idx_sets) < 1:
        raise ValueError("empty group")
    means, m2s, m2m, hs, hm = [], [], [], 0.0, 0.0
    for idx in idx_sets:
        if idx.size == 0:
            raise ValueError("empty group")
        xg = x[idx]
        mu = xg.mean(axis=0)
        dev = xg - mu
        means.append(mu)
        s = float((xg * xg).sum())
        m2s.append(s)
        m2m.append(s / idx.size)
        ds = float((dev * dev).sum())
        hs += ds
        hm += ds / idx.size
    return Moments(means, m2s, m2m, hs, hm)


def group_sizes_check(groups, n: int, expected: int = 2) -> list:
    sets = _groups_of(groups, n)
    if len(sets) != expected or any(s.size == 0 for s in sets):
        raise ValueError(f"expected {expected} nonempty groups, got sizes {[s.size for s in sets]}")
    return sets


def separation_ratio(x, groups, tol: float = 1e-12) -> float:
    """Within-group spread (mean-form M̂2) over the squared gap between group means."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    group_sizes_check(groups, x.shape[0])
    mom = second_moments(x, groups)
    gap = float(np.sum((mom.means[0] - mom.means[1]) ** 2))
    if gap <= tol:
        raise UndefinedRatioError(f"group means coincide (squared gap {gap:.3g})")
    return mom.mhat2_mean / gap


# -- traces -----------------------------------------------------------------------------

TRACE_HEADER = ["step", "E", "M2_sum", "M2_mean", "Mhat2", "lambda", "max_abs"]


@dataclass
class TraceRecord:
    step: int
    E: float
    M2_sum: float
    M2_mean: float
    Mhat2: float
    lam: float
    max_abs: float
    E_norm: float = float("nan")


@dataclass
class EnergyTrace:
    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records], dtype=np.int64)

    @property
    def energies(self) -> np.ndarray:
        return self.column("E")

    def to_csv(self, path) -> None:
        rows = ([r.step, r.E, r.M2_sum, r.M2_mean, r.Mhat2, r.lam, r.max_abs] for r in self.records)
        atomic_write_csv(path, TRACE_HEADER, rows)


def trace_record(step: int, x, h: Hypergraph, groups=None, P=None) -> TraceRecord:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mom = second_moments(x, groups)
    lam = float("nan")
    if groups is not None and len(mom.means) == 2:
        try:
            lam = separation_ratio(x, groups)
        except UndefinedRatioError:
            pass
    e_norm = normalized_dirichlet_energy(x, h, P) if P is not None else float("nan")
    return TraceRecord(
        step=step,
        E=dirichlet_energy(x, h),
        M2_sum=mom.m2_sum_total,
        M2_mean=mom.m2_mean_total,
        Mhat2=mom.mhat2_mean,
        lam=lam,
        max_abs=float(np.abs(x).max()) if x.size else 0.0,
        E_norm=e_norm,
    )


@dataclass
class DecayFit:
    rate: float
    r_squared: float
    intercept: float
    n_points: int
    truncated: bool = False

    def __iter__(self):
        yield self.rate
        yield self.r_squared

    @property
    def over_smoothing(self) -> bool:
        return self.rate < 0 and self.r_squared > 0.99


def decay_fit(trace, window: float = 0.8, column: str = "E") -> DecayFit:
    """Least-squares slope of log(energy) against step over the trailing ``window`` fraction.

    Accepts an :class:`EnergyTrace` or a plain sequence of energies (steps 0, 1, ...).
    A nonpositive energy inside the window truncates the fit to the points before it.
    """
    if isinstance(trace, EnergyTrace):
        steps, energy = trace.steps.astype(np.float64), trace.column(column)
    else:
        energy = np.asarray(trace, dtype=np.float64)
        steps = np.arange(energy.size, dtype=np.float64)
    n = energy.size
    start = min(int(math.floor(n * (1.0 - window))), max(n - 2, 0))
    steps, energy = steps[start:], energy[start:]
    truncated = False
    bad = np.flatnonzero(~(energy > 0))
    if bad.size:
        truncated = True
        steps, energy = steps[: bad[0]], energy[: bad[0]]
    if energy.size < 2:
        raise ValueError("fewer than two positive energies in the fit window")
    y = np.log(energy)
    slope, intercept = np.polyfit(steps, y, 1)
    resid = y - (slope * steps + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-30 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    return DecayFit(float(slope), float(r2), float(intercept), int(energy.size), truncated)


def accuracy(logits, labels, index_set=None) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    idx = np.arange(labels.size) if index_set is None else np.asarray(index_set, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def m2_bound(h: Hypergraph, delta: float, gamma: float, groups, x0=None,
             d_minus: Optional[float] = None) -> float:
    """Upper bound on the mean-form total second moment along a trajectory.

    max{(5 D⁻ k + 2δ) N'' / (δ N'), M2(0)} with k the maximum node degree,
    N'/N'' the smaller/larger group size and D⁻ the repulsive coefficient cap
    (defaults to gamma). Returns ``inf`` when delta <= 0. With a multi-channel
    ``x0`` the initial term is the largest per-channel value, matching the
    channel-wise statement of the bound.
    """
    if delta <= 0:
        return math.inf
    sets = group_sizes_check(groups, h.num_nodes)
    n_lo, n_hi = min(s.size for s in sets), max(s.size for s in sets)
    k = h.degrees().k
    dm = gamma if d_minus is None else d_minus
    formula = (5.0 * dm * k + 2.0 * delta) * n_hi / (delta * n_lo)
    m2_0 = 0.0
    if x0 is not None:
        m2_0 = max(per_channel_m2(x0, groups))
    return max(formula, m2_0)


def per_channel_m2(x, groups) -> list:
    """Mean-form total second moment of each feature channel separately."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return [second_moments(x[:, j], groups).m2_mean_total for j in range(x.shape[1])]
