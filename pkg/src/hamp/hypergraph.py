"""Sparse hypergraph representation, text-format loading and structural quantities."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class HypergraphError(ValueError):
    pass


class ParseError(HypergraphError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class ValidationError(HypergraphError):
    pass


class DegeneracyError(HypergraphError):
    pass


@dataclass(frozen=True, eq=False)
class Hypergraph:
    """Immutable hypergraph stored as per-edge member arrays.

    ``node_memberships`` is derived from ``edge_members`` at construction and
    the two are kept as exact transposes of each other.
    """

    num_nodes: int
    edge_members: tuple
    edge_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        members = tuple(np.asarray(m, dtype=np.int64).reshape(-1) for m in self.edge_members)
        object.__setattr__(self, "edge_members", members)
        if self.edge_weights is None:
            w = np.ones(len(members))
        else:
            w = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "edge_weights", w)
        self.validate()

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Sequence[Sequence[int]], weights=None) -> "Hypergraph":
        return cls(int(num_nodes), tuple(edges), weights)

    @property
    def num_edges(self) -> int:
        return len(self.edge_members)

    def validate(self) -> None:
        if self.num_nodes < 0:
            raise ValidationError("num_nodes must be nonnegative")
        if self.edge_weights.shape != (self.num_edges,):
            raise ValidationError(
                f"edge_weights has shape {self.edge_weights.shape}, expected ({self.num_edges},)"
            )
        if np.any(self.edge_weights < 0) or not np.all(np.isfinite(self.edge_weights)):
            raise ValidationError("edge weights must be finite and nonnegative")
        for e, m in enumerate(self.edge_members):
            if m.size == 0:
                raise ValidationError(f"hyperedge {e} is empty")
            if m.min() < 0 or m.max() >= self.num_nodes:
                bad = int(m[(m < 0) | (m >= self.num_nodes)][0])
                raise ValidationError(
                    f"hyperedge {e} references node {bad}, but there are only {self.num_nodes} nodes"
                )
            if np.unique(m).size != m.size:
                raise ValidationError(f"hyperedge {e} contains duplicate nodes")

    # -- incidence structure ------------------------------------------------

    @cached_property
    def incidence_nodes(self) -> np.ndarray:
        """Node index of every incidence, grouped by hyperedge."""
        if not self.edge_members:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.edge_members)

    @cached_property
    def incidence_edges(self) -> np.ndarray:
        sizes = np.array([m.size for m in self.edge_members], dtype=np.int64)
        return np.repeat(np.arange(self.num_edges), sizes)

    @property
    def num_incidences(self) -> int:
        return int(self.incidence_nodes.size)

    @cached_property
    def node_memberships(self) -> tuple:
        """Per node, the sorted indices of the hyperedges containing it."""
        order = np.lexsort((self.incidence_edges, self.incidence_nodes))
        nodes = self.incidence_nodes[order]
        edges = self.incidence_edges[order]
        bounds = np.searchsorted(nodes, np.arange(self.num_nodes + 1))
        return tuple(edges[bounds[i] : bounds[i + 1]] for i in range(self.num_nodes))

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Binary N x M incidence matrix H."""
        data = np.ones(self.num_incidences)
        return sp.csr_matrix(
            (data, (self.incidence_nodes, self.incidence_edges)),
            shape=(self.num_nodes, self.num_edges),
        )

    @cached_property
    def node_degrees(self) -> np.ndarray:
        return np.bincount(self.incidence_nodes, minlength=self.num_nodes).astype(np.int64)

    @cached_property
    def edge_sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.edge_members], dtype=np.int64)

    def degrees(self) -> "DegreeInfo":
        dv = self.node_degrees
        return DegreeInfo(dv, self.edge_sizes, int(dv.max()) if dv.size else 0)

    @property
    def isolated_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_degrees == 0)

    def with_isolated_self_loops(self) -> "Hypergraph":
        """Copy with a singleton hyperedge added for every isolated node."""
        iso = self.isolated_nodes
        if iso.size == 0:
            return self
        edges = list(self.edge_members) + [np.array([i]) for i in iso]
        weights = np.concatenate([self.edge_weights, np.ones(iso.size)])
        return Hypergraph(self.num_nodes, tuple(edges), weights)

    def permute_nodes(self, perm: np.ndarray) -> "Hypergraph":
        """Relabel node i as perm[i]."""
        perm = np.asarray(perm)
        return Hypergraph(self.num_nodes, tuple(perm[m] for m in self.edge_members), self.edge_weights)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return True
        n, _ = connected_components(self.clique_adjacency(), directed=False)
        return n == 1

    def clique_adjacency(self) -> sp.csr_matrix:
        """Unnormalized clique expansion A = H W Hᵀ with zero diagonal (pair multiplicities)."""
        H = self.incidence
        A = (H @ sp.diags(self.edge_weights) @ H.T).tocsr()
        A.setdiag(0)
        A.eliminate_zeros()
        return A

    # -- sparse operators used by the message pipeline -------------------------

    @cached_property
    def gather_nodes(self) -> sp.csr_matrix:
        """nnz x N selector: row k picks the node of incidence k."""
        k = self.num_incidences
        return sp.csr_matrix(
            (np.ones(k), (np.arange(k), self.incidence_nodes)), shape=(k, self.num_nodes)
        )

    @cached_property
    def gather_edges(self) -> sp.csr_matrix:
        k = self.num_incidences
        return sp.csr_matrix(
            (np.ones(k), (np.arange(k), self.incidence_edges)), shape=(k, self.num_edges)
        )

    @cached_property
    def scatter_nodes(self) -> sp.csr_matrix:
        """N x nnz summation over the incidences of each node."""
        return self.gather_nodes.T.tocsr()

    def edge_mean_operator(self, norm: str = "sym") -> sp.csr_matrix:
        """M x N operator averaging member rows of each hyperedge.

        With ``norm="sym"`` members are pre-scaled by D_v^{-1/2}, the HGNN convention.
        """
        return self._edge_ops[norm][0]

    def incidence_coefficients(self, norm: str = "sym") -> np.ndarray:
        """Per-incidence weight applied when edge messages return to a node."""
        return self._edge_ops[norm][1]

    @cached_property
    def _edge_ops(self) -> dict:
        dv = self.node_degrees.astype(np.float64)
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(dv > 0, 1.0 / np.sqrt(dv), 0.0)
            inv = np.where(dv > 0, 1.0 / dv, 0.0)
        inv_de = 1.0 / self.edge_sizes
        ops = {}
        for norm, node_scale, back_scale in (("sym", inv_sqrt, inv_sqrt), ("mean", np.ones_like(dv), inv)):
            vals = inv_de[self.incidence_edges] * node_scale[self.incidence_nodes]
            op = sp.csr_matrix(
                (vals, (self.incidence_edges, self.incidence_nodes)),
                shape=(self.num_edges, self.num_nodes),
            )
            coef = self.edge_weights[self.incidence_edges] * back_scale[self.incidence_nodes]
            ops[norm] = (op, coef)
        return ops


@dataclass(frozen=True)
class DegreeInfo:
    node_degrees: np.ndarray
    edge_sizes: np.ndarray
    k: int

    @property
    def total_incidences(self) -> int:
        return int(self.node_degrees.sum())


@dataclass
class LabeledDataset:
    hypergraph: Hypergraph
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    split: Optional[dict] = None

    def __post_init__(self):
        n = self.hypergraph.num_nodes
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValidationError(
                    f"features have shape {self.features.shape}, expected ({n}, d)"
                )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape != (n,):
                raise ValidationError(f"{self.labels.size} labels for {n} nodes")
            if self.labels.min() < 0:
                raise ValidationError("labels must be nonnegative class indices")
        if self.split is not None:
            self.split = {k: np.asarray(v, dtype=np.int64).reshape(-1) for k, v in self.split.items()}
            seen = np.zeros(n, dtype=bool)
            for name in ("train", "val", "test"):
                idx = self.split.get(name)
                if idx is None:
                    raise ValidationError(f"split is missing the {name!r} index set")
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise ValidationError(f"{name} split references a node outside [0, {n})")
                if np.unique(idx).size != idx.size or seen[idx].any():
                    raise ValidationError(f"{name} split overlaps another split or repeats nodes")
                seen[idx] = True

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and self.labels.size else 0


# -- file formats -------------------------------------------------------------


def parse_hypergraph(path) -> Hypergraph:
    """Parse the ``N M`` header followed by M lines of ``e: i1 i2 ...``."""
    path = Path(path)
    with open(path) as fh:
        lines = [(n, ln.strip()) for n, ln in enumerate(fh, start=1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError(path, 1, "empty file, expected header 'N M'")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 2:
        raise ParseError(path, lineno, f"expected header 'N M', got {header!r}")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(path, lineno, f"non-integer header {header!r}") from None
    body = lines[1:]
    if len(body) != m:
        where = body[m][0] if len(body) > m else (body[-1][0] + 1 if body else lineno + 1)
        raise ParseError(path, where, f"header declares {m} hyperedges, found {len(body)}")
    edges = []
    for lineno, ln in body:
        if not ln.startswith("e:"):
            raise ParseError(path, lineno, f"expected 'e: i1 i2 ...', got {ln!r}")
        try:
            members = [int(tok) for tok in ln[2:].split()]
        except ValueError:
            raise ParseError(path, lineno, "non-integer node index") from None
        if not members:
            raise ValidationError(f"{path}:{lineno}: empty hyperedge")
        edges.append(members)
    return Hypergraph.from_edges(n, edges)


def load_hypergraph(path, features=None, labels=None, splits=None) -> LabeledDataset:
    """Load a hypergraph file plus optional features CSV, labels file and split files.

    ``splits`` maps ``train``/``val``/``test`` to index files.
    """
    h = parse_hypergraph(path)
    x = y = split = None
    if features is not None:
        x = np.loadtxt(features, delimiter=",", ndmin=2, dtype=np.float64)
    if labels is not None:
        y = np.loadtxt(labels, dtype=np.int64, ndmin=1)
    if splits is not None:
        split = {k: np.loadtxt(v, dtype=np.int64, ndmin=1) for k, v in splits.items()}
    return LabeledDataset(h, x, y, split)


def format_hypergraph(h: Hypergraph) -> str:
    lines = [f"{h.num_nodes} {h.num_edges}"]
    lines += ["e: " + " ".join(str(int(i)) for i in m) for m in h.edge_members]
    return "\n".join(lines) + "\n"


# -- structural quantities ------------------------------------------------------


def propagation_operator(h: Hypergraph, self_loops: bool = False) -> sp.csr_matrix:
    """P = D_v^{-1/2} H W D_e^{-1} Hᵀ D_v^{-1/2} as a sparse symmetric matrix."""
    if h.isolated_nodes.size:
        if not self_loops:
            raise DegeneracyError(
                f"{h.isolated_nodes.size} isolated node(s), e.g. node {int(h.isolated_nodes[0])}; "
                "enable self loops to add singleton hyperedges"
            )
        h = h.with_isolated_self_loops()
    H = h.incidence
    dv = sp.diags(1.0 / np.sqrt(h.node_degrees))
    de = sp.diags(h.edge_weights / h.edge_sizes)
    P = (dv @ H @ de @ H.T @ dv).tocsr()
    # exact symmetry; the product can differ from its transpose in the last bit
    return ((P + P.T) * 0.5).tocsr()


def ce_homophily(d: LabeledDataset, dedup: bool = False) -> float:
    """Fraction of same-label pairs among co-hyperedge node pairs (clique expansion).

    Pairs are counted with multiplicity across hyperedges unless ``dedup``.
    Returns 1.0 when the hypergraph has no pairs at all.
    """
    h, y = d.hypergraph, d.labels
    if y is None:
        raise ValidationError("ce_homophily needs labels")
    if dedup:
        pairs = set()
        for m in h.edge_members:
            pairs.update(itertools.combinations(sorted(m.tolist()), 2))
        if not pairs:
            return 1.0
        a, b = np.array(sorted(pairs)).T
        return float(np.mean(y[a] == y[b]))
    c = int(y.max()) + 1
    counts = np.bincount(h.incidence_edges * c + y[h.incidence_nodes], minlength=h.num_edges * c)
    same = (counts * (counts - 1) // 2).sum()
    sizes = h.edge_sizes
    total = (sizes * (sizes - 1) // 2).sum()
    return 1.0 if total == 0 else float(same / total)
