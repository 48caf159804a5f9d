"""Neighbour similarity: per-layer embedding MLP, distances, top-p filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

L1 = "l1"
COSINE = "cosine"
MODES = (L1, COSINE)

DEFAULT_MARGIN = 0.5


class SimilarityModule:
    """Layer-specific map from node embeddings to a comparison space.

    ``cosine`` mode: ``tanh(h @ W + b)`` with ``embed_dim`` outputs, compared
    by cosine distance.  ``l1`` mode: a 2-class softmax score, compared by the
    mean absolute difference.
    """

    def __init__(self, in_dim, mode=COSINE, embed_dim=8, layer=0, rng=None):
        if mode not in MODES:
            raise ValueError(f"unknown similarity mode {mode!r}")
        if mode == L1:
            embed_dim = 2
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        bound = math.sqrt(6.0 / (in_dim + embed_dim))
        self.mode = mode
        self.layer = layer
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.weight = ad.parameter(rng.uniform(-bound, bound, (in_dim, embed_dim)), f"sim{layer}.W")
        self.bias = ad.parameter(np.zeros((1, embed_dim)), f"sim{layer}.b")

    def parameters(self):
        return [self.weight, self.bias]

    def embed(self, h):
        h = ad._as_tensor(h)
        if h.cols != self.in_dim:
            raise ValueError(f"similarity input has {h.cols} columns, expected {self.in_dim}")
        z = h @ self.weight + self.bias
        return ad.tanh(z) if self.mode == COSINE else ad.softmax(z)

    def compare(self, za, zb):
        """Distances between already-embedded rows, as an (m, 1) tensor."""
        if self.mode == COSINE:
            d, _ = ad.cosine_distance_rows(za, zb)
            return d
        return ad.scale(ad.sum_cols(ad.absolute(za - zb)), 1.0 / self.embed_dim)

    def distance(self, h_u, h_v):
        return self.compare(self.embed(h_u), self.embed(h_v))

    def pair_distances(self, z: np.ndarray, src, dst) -> np.ndarray:
        """Untracked distances for many (src, dst) pairs of embedded rows."""
        return pair_distances(self.mode, z, src, dst)


def pair_distances(mode, z, src, dst) -> np.ndarray:
    if mode == L1:
        return np.abs(z[src] - z[dst]).mean(axis=1)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    dead = norms == 0.0
    unit = z / np.where(dead, 1.0, norms)[:, None]
    out = 1.0 - np.clip(np.einsum("ij,ij->i", unit[src], unit[dst]), -1.0, 1.0)
    out[dead[src] | dead[dst]] = 1.0
    return out


def cosine_distance(m: SimilarityModule, h_u, h_v) -> float:
    if m.mode != COSINE:
        raise ValueError("module is not in cosine mode")
    return m.distance(h_u, h_v).item()


def l1_distance(m: SimilarityModule, h_u, h_v) -> float:
    if m.mode != L1:
        raise ValueError("module is not in l1 mode")
    return m.distance(h_u, h_v).item()


# ---------------------------------------------------------------------------
# selection


def keep_count(n: int, p: float) -> int:
    """Number of candidates kept out of ``n`` at preservation ratio ``p``."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {p}")
    if n == 0:
        return 0
    # the 1e-9 guard keeps float noise (0.7 * 10 = 7.000000000000001) from rounding up
    return max(1, min(n, math.ceil(p * n - 1e-9)))


def select_segments(indptr, candidates, distances, p: float) -> np.ndarray:
    """Boolean keep-mask over CSR-ordered candidates.

    Each segment keeps its ``keep_count`` smallest distances; ties go to the
    lower node id.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {p}")
    indptr = np.asarray(indptr)
    counts = np.diff(indptr)
    nnz = int(indptr[-1])
    keep = np.zeros(nnz, dtype=bool)
    if nnz == 0:
        return keep
    if p >= 1.0:
        keep[:] = True
        return keep
    k = np.maximum(1, np.minimum(counts, np.ceil(p * counts - 1e-9))).astype(np.int64)
    seg = np.repeat(np.arange(counts.size), counts)
    order = _segment_order(seg, candidates, distances)
    rank = np.arange(nnz) - indptr[seg]
    keep[order] = rank < k[seg]
    return keep


def _segment_order(seg, candidates, distances):
    """Permutation sorting by (segment, distance, candidate id)."""
    # distances lie in [0, 2], so seg * 4 + d orders segments first; rounding can
    # only merge distances closer than ~1e-12, which the check below catches
    order = np.argsort(seg * 4.0 + distances, kind="stable")
    d, c = distances[order], candidates[order]
    same = seg[1:] == seg[:-1]
    bad = same & ((d[1:] < d[:-1]) | ((d[1:] == d[:-1]) & (c[1:] < c[:-1])))
    if bad.any():
        # exact: stable by distance, then stable by (narrow, radix-sortable) segment
        narrow = np.uint16 if seg.size and seg[-1] < 2**16 else np.int64
        ids_sorted = not (same & (candidates[1:] < candidates[:-1])).any()
        if ids_sorted:
            by_dist = np.argsort(distances, kind="stable")
        else:
            by_dist = np.lexsort((candidates, distances))
        order = by_dist[np.argsort(seg.astype(narrow)[by_dist], kind="stable")]
    return order


@dataclass
class NeighborSelection:
    center: int
    relation: int
    candidates: np.ndarray
    distances: np.ndarray
    keep_mask: np.ndarray
    threshold: float

    @property
    def kept(self) -> np.ndarray:
        """Kept node ids, ascending."""
        return np.sort(self.candidates[self.keep_mask])

    @property
    def kept_distances(self) -> np.ndarray:
        return self.distances[self.keep_mask]


def select_neighbors(m: SimilarityModule, center_feat, candidate_feats, candidates, p_r, center=-1, relation=0):
    """Keep the ``ceil(p_r * n)`` candidates nearest to the centre (at least one)."""
    if not 0.0 < p_r <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {p_r}")
    candidates = np.asarray(candidates, dtype=np.int64)
    n = candidates.size
    if n == 0:
        return NeighborSelection(center, relation, candidates, np.zeros(0), np.zeros(0, dtype=bool), p_r)
    cf = np.asarray(candidate_feats, dtype=np.float64).reshape(n, -1)
    z = m.embed(np.vstack([np.asarray(center_feat, dtype=np.float64).reshape(1, -1), cf])).data
    dist = pair_distances(m.mode, z, np.zeros(n, dtype=np.int64), np.arange(1, n + 1))
    mask = select_segments(np.array([0, n]), candidates, dist, p_r)
    return NeighborSelection(center, relation, candidates, dist, mask, p_r)


# ---------------------------------------------------------------------------
# auxiliary training signal


def similarity_loss(m: SimilarityModule, h, centers, neighbors, same_label, margin=DEFAULT_MARGIN):
    """Contrastive loss: pull same-label pairs together, push others past ``margin``.

    ``h`` holds embeddings for all nodes; pairs index into its rows.
    """
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        return ad.constant(0.0)
    h = ad._as_tensor(h)
    z = m.embed(h)
    return pair_loss(m, z, centers, neighbors, same_label, margin)


def pair_loss(m, z, centers, neighbors, same_label, margin=DEFAULT_MARGIN):
    """:func:`similarity_loss` on pre-embedded rows ``z``."""
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        return ad.constant(0.0)
    same = np.asarray(same_label, dtype=np.float64).reshape(-1, 1)
    d = m.compare(ad.gather_rows(z, centers), ad.gather_rows(z, neighbors))
    hinge = ad.relu(ad.scale(d, -1.0) + margin)
    per_pair = d * same + hinge * (1.0 - same)
    return ad.mean_all(per_pair)


def contrastive_value(distances, same_label, margin=DEFAULT_MARGIN) -> float:
    d = np.asarray(distances, dtype=np.float64)
    s = np.asarray(same_label, dtype=np.float64)
    if d.size == 0:
        return 0.0
    return float(np.mean(s * d + (1.0 - s) * np.maximum(0.0, margin - d)))


def sample_label_pairs(indptr, candidates, centers, labels, labeled, rng, per_kind=5):
    """Up to ``per_kind`` same-label and different-label labelled candidates per centre.

    Returns ``(center_ids, neighbor_ids, same_flags)``.
    """
    centers = np.asarray(centers, dtype=np.int64)
    starts, ends = indptr[centers], indptr[centers + 1]
    counts = ends - starts
    if counts.sum() == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    owner = np.repeat(centers, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    nb = candidates[np.repeat(starts, counts) + offs]
    ok = labeled[nb]
    owner, nb = owner[ok], nb[ok]
    same = (labels[owner] == labels[nb]).astype(np.int64)
    key = rng.random(owner.size)
    group = owner * 2 + same
    order = np.lexsort((key, group))
    g = group[order]
    first = np.r_[0, np.flatnonzero(g[1:] != g[:-1]) + 1]
    rank = np.arange(g.size) - np.repeat(first, np.diff(np.r_[first, g.size]))
    pick = order[rank < per_kind]
    pick.sort()
    return owner[pick], nb[pick], same[pick]
