"""Multi-relation graph store: one CSR adjacency per relation over a shared node set.

Dataset directory layout (UTF-8, tab separated, LF endings, 0-based ids)::

    meta.tsv        num_nodes  num_features  num_relations   (header + one row)
    features.tsv    node_id  f_1 ... f_d
    labels.tsv      node_id  label            (0 benign, 1 fraud)
    edges_r1.tsv    u  v                      (one file per relation, 1-based)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

META_HEADER = ("num_nodes", "num_features", "num_relations")


class DatasetFormatError(ValueError):
    """Malformed dataset directory; the message carries ``file:line``."""

    def __init__(self, path, line, msg):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line else self.path
        super().__init__(f"{where}: {msg}")


@dataclass(frozen=True)
class RelationCSR:
    indptr: np.ndarray
    indices: np.ndarray

    def row(self, u):
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    @property
    def degrees(self):
        return np.diff(self.indptr)


def csr_from_edges(num_nodes, edges) -> RelationCSR:
    """Symmetrise, drop self-loops and duplicates, sort each row."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    u, v = edges[:, 0], edges[:, 1]
    keep = u != v
    u, v = u[keep], v[keep]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    if src.size:
        codes = np.unique(src * num_nodes + dst)
        src, dst = codes // num_nodes, codes % num_nodes
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return RelationCSR(indptr, dst.astype(np.int64))


class MultiRelationGraph:
    """R homogeneous undirected relations over one labelled, featured node set.

    Immutable after construction.
    """

    def __init__(self, features, labels, relations):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows for {labels.shape[0]} labels")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.features = features
        self.labels = labels
        self.relations = tuple(relations)
        self._cache = {}
        for r in self.relations:
            self._check_csr(r)
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @classmethod
    def from_edge_lists(cls, features, labels, edge_lists):
        n = np.asarray(labels).reshape(-1).shape[0]
        for k, edges in enumerate(edge_lists):
            e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
            if e.size and (e.min() < 0 or e.max() >= n):
                raise ValueError(f"relation {k}: node id out of range")
        return cls(features, labels, [csr_from_edges(n, e) for e in edge_lists])

    def _check_csr(self, r: RelationCSR):
        n = self.num_nodes
        if r.indptr.shape != (n + 1,) or r.indptr[0] != 0 or r.indptr[-1] != r.indices.size:
            raise ValueError("bad CSR offsets")
        if (np.diff(r.indptr) < 0).any():
            raise ValueError("CSR offsets must be non-decreasing")
        if r.indices.size and (r.indices.min() < 0 or r.indices.max() >= n):
            raise ValueError("CSR column index out of range")
        src = np.repeat(np.arange(n), np.diff(r.indptr))
        if (src == r.indices).any():
            raise ValueError("self-loops are not allowed")
        within = src[1:] == src[:-1]
        if (within & (r.indices[1:] <= r.indices[:-1])).any():
            raise ValueError("neighbour lists must be sorted and duplicate-free")
        # sorted rows make the transpose's (row, col) order comparable directly
        fwd = src * n + r.indices
        if not np.array_equal(np.sort(r.indices * n + src), fwd):
            raise ValueError("adjacency must be symmetric")

    @property
    def num_nodes(self) -> int:
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def _check_ids(self, u, r):
        if not 0 <= u < self.num_nodes:
            raise IndexError(f"node {u} out of range [0, {self.num_nodes})")
        if not 0 <= r < self.num_relations:
            raise IndexError(f"relation {r} out of range [0, {self.num_relations})")

    def neighbors(self, u: int, r: int) -> np.ndarray:
        self._check_ids(u, r)
        return self.relations[r].row(u)

    def two_hop_candidates(self, u: int, r: int) -> np.ndarray:
        """Same-relation neighbours and neighbours-of-neighbours, minus ``u``."""
        self._check_ids(u, r)
        csr = self.relations[r]
        first = csr.row(u)
        parts = [first] + [csr.row(v) for v in first]
        out = np.unique(np.concatenate(parts)) if first.size else first
        return out[out != u]

    def candidate_csr(self, r: int, hops: int = 1) -> RelationCSR:
        """Candidate sets for every node under relation ``r`` as one CSR."""
        if hops == 1:
            return self.relations[r]
        if hops != 2:
            raise ValueError("only 1- and 2-hop candidate sets are supported")
        key = ("two_hop", r)
        if key not in self._cache:
            self._cache[key] = _two_hop_csr(self.relations[r], self.num_nodes)
        return self._cache[key]

    def candidate_owners(self, r: int, hops: int = 1) -> np.ndarray:
        """Centre id of every entry of ``candidate_csr(r, hops).indices``."""
        key = ("owners", r, hops)
        if key not in self._cache:
            csr = self.candidate_csr(r, hops)
            self._cache[key] = np.repeat(np.arange(self.num_nodes), csr.degrees)
        return self._cache[key]

    def union_candidates(self, hops: int = 1) -> RelationCSR:
        """Candidates pooled over all relations (a node may appear once per centre)."""
        key = ("union", hops)
        if key not in self._cache:
            n = self.num_nodes
            total = sp.csr_matrix((n, n))
            for r in range(self.num_relations):
                csr = self.candidate_csr(r, hops)
                total = total + sp.csr_matrix((np.ones(csr.indices.size), csr.indices, csr.indptr), shape=(n, n))
            total.sort_indices()
            self._cache[key] = RelationCSR(total.indptr.astype(np.int64), total.indices.astype(np.int64))
        return self._cache[key]

    def adjacency(self, r: int) -> sp.csr_matrix:
        csr = self.relations[r]
        data = np.ones(csr.indices.size)
        return sp.csr_matrix((data, csr.indices, csr.indptr), shape=(self.num_nodes,) * 2)

    def __eq__(self, other):
        if not isinstance(other, MultiRelationGraph):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.num_relations == other.num_relations
            and all(
                np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
                for a, b in zip(self.relations, other.relations)
            )
        )

    def __repr__(self):
        return (
            f"MultiRelationGraph(nodes={self.num_nodes}, d={self.num_features}, "
            f"relations={self.num_relations}, frauds={int(self.labels.sum())})"
        )


def _two_hop_csr(csr: RelationCSR, n: int) -> RelationCSR:
    a = sp.csr_matrix((np.ones(csr.indices.size), csr.indices, csr.indptr), shape=(n, n))
    reach = a + a @ a
    reach.setdiag(0)
    reach.eliminate_zeros()
    reach.sort_indices()
    return RelationCSR(reach.indptr.astype(np.int64), reach.indices.astype(np.int64))


@dataclass(frozen=True)
class DegreeStats:
    mean_degree: tuple
    max_degree: tuple
    edge_count: tuple
    num_nodes: int

    @property
    def density(self) -> float:
        """Undirected edges over all relations divided by the possible pairs."""
        pairs = self.num_nodes * (self.num_nodes - 1) / 2
        return sum(self.edge_count) / pairs if pairs else 0.0

    def rows(self):
        for r, (mean, mx, e) in enumerate(zip(self.mean_degree, self.max_degree, self.edge_count)):
            yield {"relation": r + 1, "edges": e, "mean_degree": mean, "max_degree": mx}


def degree_stats(g: MultiRelationGraph) -> DegreeStats:
    means, maxes, edges = [], [], []
    for csr in g.relations:
        deg = csr.degrees
        e = int(csr.indices.size // 2)
        edges.append(e)
        means.append(2.0 * e / g.num_nodes if g.num_nodes else 0.0)
        maxes.append(int(deg.max()) if deg.size else 0)
    return DegreeStats(tuple(means), tuple(maxes), tuple(edges), g.num_nodes)


# ---------------------------------------------------------------------------
# on-disk format


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(g: MultiRelationGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "meta.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(META_HEADER) + "\n")
        f.write(f"{g.num_nodes}\t{g.num_features}\t{g.num_relations}\n")
    with open(path / "features.tsv", "w", encoding="utf-8", newline="\n") as f:
        for i, row in enumerate(g.features):
            f.write(str(i) + "\t" + "\t".join(map(_fmt, row)) + "\n")
    with open(path / "labels.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{i}\t{y}\n" for i, y in enumerate(g.labels))
    for k, csr in enumerate(g.relations, start=1):
        src = np.repeat(np.arange(g.num_nodes), csr.degrees)
        keep = src < csr.indices
        with open(path / f"edges_r{k}.tsv", "w", encoding="utf-8", newline="\n") as f:
            f.writelines(f"{u}\t{v}\n" for u, v in zip(src[keep], csr.indices[keep]))
    return path


def _lines(path):
    if not path.exists():
        raise DatasetFormatError(path, None, "missing file")
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line.split("\t")


def _parse_int(path, lineno, tok, what="integer"):
    try:
        return int(tok)
    except ValueError:
        raise DatasetFormatError(path, lineno, f"expected {what}, got {tok!r}") from None


def _node_id(path, lineno, tok, n):
    u = _parse_int(path, lineno, tok, "node id")
    if not 0 <= u < n:
        raise DatasetFormatError(path, lineno, f"node id {u} out of range [0, {n})")
    return u


def _read_meta(path):
    rows = list(_lines(path))
    if rows and rows[0][1][0] == META_HEADER[0]:
        rows = rows[1:]
    if len(rows) != 1 or len(rows[0][1]) != 3:
        raise DatasetFormatError(path, rows[0][0] if rows else None, "expected num_nodes, d, R")
    lineno, toks = rows[0]
    n, d, r = (_parse_int(path, lineno, t) for t in toks)
    if n < 0 or d < 1 or r < 1:
        raise DatasetFormatError(path, lineno, "num_nodes must be >= 0, d and R >= 1")
    return n, d, r


def _read_features(path, n, d):
    x = np.zeros((n, d))
    seen = np.zeros(n, dtype=bool)
    for lineno, toks in _lines(path):
        u = _node_id(path, lineno, toks[0], n)
        if len(toks) - 1 != d:
            raise DatasetFormatError(path, lineno, f"expected {d} features, got {len(toks) - 1}")
        try:
            x[u] = [float(t) for t in toks[1:]]
        except ValueError:
            bad = next(t for t in toks[1:] if not _is_float(t))
            raise DatasetFormatError(path, lineno, f"non-numeric feature {bad!r}") from None
        if not np.isfinite(x[u]).all():
            raise DatasetFormatError(path, lineno, "non-finite feature")
        seen[u] = True
    if not seen.all():
        raise DatasetFormatError(path, None, f"no features for node {int(np.argmin(seen))}")
    return x


def _is_float(t):
    try:
        float(t)
        return True
    except ValueError:
        return False


def _read_labels(path, n):
    y = np.full(n, -1, dtype=np.int64)
    for lineno, toks in _lines(path):
        if len(toks) != 2:
            raise DatasetFormatError(path, lineno, "expected node_id and label")
        u = _node_id(path, lineno, toks[0], n)
        lab = _parse_int(path, lineno, toks[1], "label")
        if lab not in (0, 1):
            raise DatasetFormatError(path, lineno, f"label must be 0 or 1, got {lab}")
        y[u] = lab
    if (y < 0).any():
        raise DatasetFormatError(path, None, f"no label for node {int(np.argmax(y < 0))}")
    return y


def _read_edges(path, n):
    if not path.exists():
        raise DatasetFormatError(path, None, "missing file")
    if path.stat().st_size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    try:
        e = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
        if e.shape[1] == 2 and (e.size == 0 or (e.min() >= 0 and e.max() < n)):
            return e
    except ValueError:
        pass
    # slow path only to locate the offending line
    out = []
    for lineno, toks in _lines(path):
        if len(toks) != 2:
            raise DatasetFormatError(path, lineno, "expected two node ids")
        out.append((_node_id(path, lineno, toks[0], n), _node_id(path, lineno, toks[1], n)))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def load_graph(path) -> MultiRelationGraph:
    path = Path(path)
    if not path.is_dir():
        raise DatasetFormatError(path, None, "not a directory")
    n, d, r = _read_meta(path / "meta.tsv")
    x = _read_features(path / "features.tsv", n, d)
    y = _read_labels(path / "labels.tsv", n)
    rels = [csr_from_edges(n, _read_edges(path / f"edges_r{k}.tsv", n)) for k in range(1, r + 1)]
    return MultiRelationGraph(x, y, rels)
