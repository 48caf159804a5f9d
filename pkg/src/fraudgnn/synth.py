"""Labelled multi-relation fraud graphs with controllable density and camouflage.

Features are two unit-variance Gaussian clusters whose means sit
``separation`` apart; a ``camouflage`` fraction of frauds draw their features
from the benign cluster instead.  Each relation gets ``round(degree * n / 2)``
distinct undirected edges; an edge is forced to join two same-label nodes
with probability ``homophily[r]``, otherwise both endpoints are uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.stats import norm

from .graph import MultiRelationGraph, csr_from_edges


@dataclass(frozen=True)
class SynthConfig:
    num_nodes: int = 2000
    fraud_ratio: float = 0.145
    degrees: tuple = (2.0, 6.0, 10.0)
    homophily: tuple = (0.9, 0.3, 0.1)
    num_features: int = 32
    separation: float = 1.5
    camouflage: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(float(k) for k in self.degrees))
        hom = self.homophily
        if np.isscalar(hom):
            hom = (hom,) * len(self.degrees)
        object.__setattr__(self, "homophily", tuple(float(q) for q in hom))
        if self.num_nodes < 0:
            raise ValueError("num_nodes must be >= 0")
        if not self.degrees:
            raise ValueError("at least one relation is required")
        if len(self.homophily) != len(self.degrees):
            raise ValueError("one homophily value per relation")
        for name in ("fraud_ratio", "camouflage"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if any(not 0.0 <= q <= 1.0 for q in self.homophily):
            raise ValueError("homophily must be in [0, 1]")
        if any(k < 0 for k in self.degrees):
            raise ValueError("degrees must be >= 0")
        if self.num_features < 1:
            raise ValueError("num_features must be >= 1")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")

    @property
    def num_relations(self):
        return len(self.degrees)

    def bayes_accuracy(self) -> float:
        """Accuracy of the optimal equal-prior rule on uncamouflaged features."""
        return float(norm.cdf(self.separation / 2.0))


# relations 1-2 of "dense" are 19x "sparse"; relation 3 is the same in both
PRESETS = {
    "sparse": SynthConfig(
        fraud_ratio=0.145, degrees=(2.0, 6.0, 10.0), homophily=(0.9, 0.3, 0.1), num_features=32
    ),
    "dense": SynthConfig(
        fraud_ratio=0.095, degrees=(38.0, 114.0, 10.0), homophily=(0.3, 0.1, 0.7), num_features=25
    ),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def config_keys():
    return [f.name for f in fields(SynthConfig)]


def _sample_edges(rng, labels, m, q, by_class):
    n = labels.size
    max_pairs = n * (n - 1) // 2
    if m > max_pairs:
        raise ValueError(f"degree target needs {m} edges but only {max_pairs} pairs exist")
    same_pairs = sum(c.size * (c.size - 1) // 2 for c in by_class)
    if q == 1.0 and m > same_pairs:
        raise ValueError("degree target infeasible with only same-label edges")
    seen = set()
    out = []
    rounds = 0
    while len(out) < m:
        rounds += 1
        if rounds > 1000:
            raise ValueError("could not reach the degree target; lower it or the homophily")
        k = max(64, int(1.3 * (m - len(out))))
        u = rng.integers(0, n, k)
        v = rng.integers(0, n, k)
        forced = rng.random(k) < q
        for cls, members in enumerate(by_class):
            pick = forced & (labels[u] == cls)
            if pick.any() and members.size:
                v[pick] = members[rng.integers(0, members.size, int(pick.sum()))]
        for a, b in zip(u.tolist(), v.tolist()):
            if a == b:
                continue
            key = (a, b) if a < b else (b, a)
            if key in seen:
                continue
            seen.add(key)
            out.append(key)
            if len(out) == m:
                break
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def generate(cfg: SynthConfig) -> MultiRelationGraph:
    n = cfg.num_nodes
    rng = np.random.default_rng(cfg.seed)
    for k in cfg.degrees:
        if n and k > n - 1:
            raise ValueError(f"mean degree {k} infeasible for {n} nodes")

    n_fraud = int(round(cfg.fraud_ratio * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_fraud]] = 1

    direction = rng.standard_normal(cfg.num_features)
    direction /= np.linalg.norm(direction)
    x = rng.standard_normal((n, cfg.num_features))
    fraud = np.flatnonzero(labels == 1)
    overt = fraud[rng.random(fraud.size) >= cfg.camouflage]
    x[overt] += cfg.separation * direction

    by_class = [np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)]
    edges = []
    for k, q in zip(cfg.degrees, cfg.homophily):
        m = int(round(k * n / 2.0))
        edges.append(_sample_edges(rng, labels, m, q, by_class))
    return MultiRelationGraph(x, labels, [csr_from_edges(n, e) for e in edges])
