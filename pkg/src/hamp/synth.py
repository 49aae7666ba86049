"""Synthetic two-group hypergraphs with attract/repulse hyperedge tags."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .hypergraph import Hypergraph, LabeledDataset, format_hypergraph
from .io import atomic_write_text

ATTRACT, REPULSE = "attract", "repulse"


class SpecError(ValueError):
    pass


class DisconnectedError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    """Two planted groups joined by label-pure (intra) and mixed (cross) hyperedges.

    ``intra_edges`` hyperedges of ``intra_size`` members are drawn inside each
    group; ``cross_edges`` hyperedges of ``cross_size`` members draw from both
    groups. Group features are Gaussian around ``+gap/2`` and ``-gap/2`` in each
    of the first ``informative`` coordinates (all coordinates when None) and
    around 0 elsewhere.
    """

    n1: int = 50
    n2: int = 50
    intra_edges: int = 60
    intra_size: int = 4
    cross_edges: int = 30
    cross_size: int = 4
    d: int = 4
    gap: float = 2.0
    noise: float = 1.0
    informative: Optional[int] = None
    seed: int = 0
    connected: bool = True
    max_attempts: int = 20
    split: tuple = (0.5, 0.25, 0.25)

    def validate(self) -> None:
        if self.n1 < 2 or self.n2 < 2:
            raise SpecError("each group needs at least 2 nodes")
        if self.intra_edges < 0 or self.cross_edges < 0:
            raise SpecError("edge counts must be >= 0")
        if self.intra_edges and self.intra_size < 2:
            raise SpecError("intra hyperedge size must be >= 2")
        if self.cross_edges and self.cross_size < 2:
            raise SpecError("cross hyperedge size must be >= 2")
        if self.intra_edges and self.intra_size > min(self.n1, self.n2):
            raise SpecError(f"intra hyperedge size {self.intra_size} exceeds a group size "
                            f"({self.n1}, {self.n2})")
        if self.cross_edges and self.cross_size > self.n1 + self.n2:
            raise SpecError(f"cross hyperedge size {self.cross_size} exceeds {self.n1 + self.n2} nodes")
        if self.intra_edges + self.cross_edges == 0:
            raise SpecError("spec produces no hyperedges")
        if self.d < 1 or self.noise < 0:
            raise SpecError("d must be >= 1 and noise >= 0")
        if self.informative is not None and not 0 <= self.informative <= self.d:
            raise SpecError("informative must lie in [0, d]")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise SpecError("split fractions must be three nonnegative numbers summing to 1")

    @property
    def num_nodes(self) -> int:
        return self.n1 + self.n2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split"] = list(self.split)
        return out


@dataclass
class SynthData:
    dataset: LabeledDataset
    groups: np.ndarray
    tags: list

    def __iter__(self):
        yield self.dataset
        yield self.groups
        yield self.tags

    @property
    def hypergraph(self) -> Hypergraph:
        return self.dataset.hypergraph


def _sample_edges(spec: SynthSpec, rng: np.random.Generator):
    g1 = np.arange(spec.n1)
    g2 = np.arange(spec.n1, spec.num_nodes)
    edges, tags = [], []
    for group in (g1, g2):
        for _ in range(spec.intra_edges):
            edges.append(np.sort(rng.choice(group, spec.intra_size, replace=False)))
            tags.append(ATTRACT)
    for _ in range(spec.cross_edges):
        # at least one member from each group so the edge is genuinely mixed
        lo = max(1, spec.cross_size - spec.n2)
        hi = min(spec.cross_size - 1, spec.n1)
        k1 = int(rng.integers(lo, hi + 1))
        members = np.concatenate([rng.choice(g1, k1, replace=False),
                                  rng.choice(g2, spec.cross_size - k1, replace=False)])
        edges.append(np.sort(members))
        tags.append(REPULSE)
    return edges, tags


def stratified_split(labels: np.ndarray, fractions, rng: np.random.Generator) -> dict:
    """Per-class shuffled split into train/val/test with the given fractions."""
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(fractions[0] * idx.size))
        n_va = int(round(fractions[1] * idx.size))
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr:n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va:])
    return {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in parts.items()}


def generate(spec: SynthSpec) -> SynthData:
    """Build the dataset, the 0/1 group assignment and one tag per hyperedge."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_nodes
    for _ in range(max(1, spec.max_attempts)):
        edges, tags = _sample_edges(spec, rng)
        h = Hypergraph.from_edges(n, edges)
        if not spec.connected or h.is_connected():
            break
    else:
        raise DisconnectedError(f"no connected instance after {spec.max_attempts} attempts")

    groups = np.repeat([0, 1], [spec.n1, spec.n2]).astype(np.int64)
    k = spec.d if spec.informative is None else spec.informative
    mu = np.zeros((2, spec.d))
    mu[0, :k] = spec.gap / 2.0
    mu[1, :k] = -spec.gap / 2.0
    features = mu[groups] + spec.noise * rng.standard_normal((n, spec.d))
    split = stratified_split(groups, spec.split, rng)
    data = LabeledDataset(h, features, groups.copy(), split)
    return SynthData(data, groups, tags)


def regular_hypergraph(n: int, edge_size: int, partitions: int, seed: int = 0,
                       max_attempts: int = 50) -> Hypergraph:
    """Union of ``partitions`` random partitions of the nodes into equal hyperedges.

    Every node then has degree exactly ``partitions``, so the degree-weighted
    kernel of the normalized Laplacian is the constant vector.
    """
    if edge_size < 1 or n % edge_size:
        raise SpecError(f"edge size {edge_size} must divide the node count {n}")
    if partitions < 1:
        raise SpecError("need at least one partition")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        edges = []
        for _ in range(partitions):
            edges.extend(np.sort(rng.permutation(n).reshape(-1, edge_size), axis=1))
        h = Hypergraph.from_edges(n, edges)
        if h.is_connected():
            return h
    raise DisconnectedError(f"no connected instance after {max_attempts} attempts")


def clamped_gate(h: Hypergraph, tags, gamma: float) -> np.ndarray:
    """Per-incidence coefficients: +1 on attract hyperedges, -gamma on repulse ones."""
    if len(tags) != h.num_edges:
        raise SpecError(f"{len(tags)} tags for {h.num_edges} hyperedges")
    bad = set(tags) - {ATTRACT, REPULSE}
    if bad:
        raise SpecError(f"unknown tags {sorted(bad)}")
    per_edge = np.array([1.0 if t == ATTRACT else -float(gamma) for t in tags])
    return per_edge[h.incidence_edges]


def write_synth(out_dir, synth: SynthData) -> dict:
    """Write the hypergraph text format, features, labels, splits and tag sidecar."""
    out = Path(out_dir)
    data = synth.dataset
    paths = {
        "hypergraph": out / "hypergraph.txt",
        "features": out / "features.csv",
        "labels": out / "labels.txt",
        "tags": out / "tags.txt",
        "train": out / "train.txt",
        "val": out / "val.txt",
        "test": out / "test.txt",
    }
    atomic_write_text(paths["hypergraph"], format_hypergraph(data.hypergraph))
    atomic_write_text(paths["features"], "".join(
        ",".join(repr(float(v)) for v in row) + "\n" for row in data.features))
    atomic_write_text(paths["labels"], "".join(f"{int(y)}\n" for y in data.labels))
    atomic_write_text(paths["tags"], "".join(t + "\n" for t in synth.tags))
    for part in ("train", "val", "test"):
        atomic_write_text(paths[part], "".join(f"{int(i)}\n" for i in data.split[part]))
    return paths


def read_tags(path) -> list:
    tags = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    bad = set(tags) - {ATTRACT, REPULSE}
    if bad:
        raise SpecError(f"{path}: unknown tags {sorted(bad)}")
    return tags
