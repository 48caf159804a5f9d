"""Layered residual GNN with similarity-filtered, threshold-weighted aggregation.

Each layer, for every centre ``u``:

1. candidates per relation: 1-hop neighbours, or same-relation 2-hop sets
   from ``iis_start_layer`` on;
2. keep the ``ceil(p_r * n)`` candidates closest to ``u`` under the layer's
   similarity module;
3. ``msg_u = sum_r p_r * mean(h_v for kept v under r)``;
4. ``upd_u = relu(W [h_u || msg_u] + b)``, optionally normalized;
5. ``h_u <- h_u + upd_u`` (a centre with nothing kept keeps ``h_u``);
6. per-layer classifier logits on the new ``h_u``.

All node embeddings are recomputed per layer over the full graph, so 2-hop
candidates always have current previous-layer embeddings.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import MultiRelationGraph
from .normalization import MODES as NORM_MODES
from .normalization import NormConfig
from .similarity import MODES as SIM_MODES
from .similarity import SimilarityModule, pair_loss, sample_label_pairs, select_segments

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
UPDATE_GAIN = 0.1


@dataclass
class ModelConfig:
    num_layers: int = 6
    hidden: int = 64
    iis_start_layer: int = 4
    norm: str = "none"
    similarity: str = "cosine"
    sim_dim: int = 8
    lambda_sim: float = 1.0
    margin: float = 0.5
    pairs_per_kind: int = 5
    norm_eps: float = 1e-5
    norm_momentum: float = 0.9
    initial_threshold: float = 0.5

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.iis_start_layer < 1:
            raise ValueError("iis_start_layer must be >= 1 (above num_layers disables it)")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}")
        if self.similarity not in SIM_MODES:
            raise ValueError(f"similarity must be one of {SIM_MODES}")
        if self.hidden < 1 or self.sim_dim < 1:
            raise ValueError("hidden and sim_dim must be >= 1")


class Linear:
    def __init__(self, in_dim, out_dim, rng, name, gain=1.0):
        bound = gain * math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = ad.parameter(rng.uniform(-bound, bound, (in_dim, out_dim)), f"{name}.W")
        self.bias = ad.parameter(np.zeros((1, out_dim)), f"{name}.b")

    def __call__(self, x):
        return ad._as_tensor(x) @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class LayerParams:
    similarity: SimilarityModule
    update: Linear
    classifier: Linear
    thresholds: np.ndarray
    norm: NormConfig

    def parameters(self):
        return self.similarity.parameters() + self.update.parameters() + self.classifier.parameters()


@dataclass
class RelationSelection:
    """Candidates of every centre under one relation, with distances and keep flags."""

    indptr: np.ndarray
    candidates: np.ndarray
    distances: np.ndarray
    keep: np.ndarray
    threshold: float

    def kept(self, u):
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.candidates[lo:hi][self.keep[lo:hi]]

    def kept_distances(self, u):
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.distances[lo:hi][self.keep[lo:hi]]

    def kept_counts(self):
        seg = np.repeat(np.arange(self.indptr.size - 1), np.diff(self.indptr))
        return np.bincount(seg[self.keep], minlength=self.indptr.size - 1)

    def mean_kept_distance(self, centers=None):
        """Average distance over kept pairs whose centre is in ``centers``."""
        keep = self.keep
        if centers is not None:
            seg = np.repeat(np.arange(self.indptr.size - 1), np.diff(self.indptr))
            mask = np.zeros(self.indptr.size - 1, dtype=bool)
            mask[centers] = True
            keep = keep & mask[seg]
        return float(self.distances[keep].mean()) if keep.any() else float("nan")


@dataclass
class LayerOutput:
    layer: int
    hops: int
    h: ad.Tensor
    sim_embed: ad.Tensor
    selections: list
    n_selected: np.ndarray


@dataclass
class ForwardResult:
    h0: ad.Tensor
    layers: list = field(default_factory=list)

    @property
    def final(self):
        return self.layers[-1].h if self.layers else self.h0


class LayeredFraudGNN:
    def __init__(self, cfg: ModelConfig, in_dim: int, num_relations: int, seed=0):
        self.cfg = cfg
        self.in_dim = in_dim
        self.num_relations = num_relations
        rng = np.random.default_rng(seed)
        h = cfg.hidden
        self.input = Linear(in_dim, h, rng, "input")
        self.layers = []
        for l in range(1, cfg.num_layers + 1):
            self.layers.append(
                LayerParams(
                    similarity=SimilarityModule(h, cfg.similarity, cfg.sim_dim, layer=l, rng=rng),
                    update=Linear(2 * h, h, rng, f"layer{l}.update", gain=UPDATE_GAIN),
                    classifier=Linear(h, 2, rng, f"layer{l}.classifier", gain=0.0),
                    thresholds=np.full(num_relations, cfg.initial_threshold),
                    norm=NormConfig(cfg.norm, cfg.norm_eps, cfg.norm_momentum),
                )
            )

    def parameters(self):
        out = self.input.parameters()
        for lp in self.layers:
            out += lp.parameters()
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def set_thresholds(self, thresholds):
        thresholds = np.asarray(thresholds, dtype=np.float64)
        if thresholds.shape != (len(self.layers), self.num_relations):
            raise ValueError(f"thresholds shape {thresholds.shape} does not match the model")
        if (thresholds <= 0).any() or (thresholds > 1).any():
            raise ValueError("thresholds must lie in (0, 1]")
        for lp, row in zip(self.layers, thresholds):
            lp.thresholds = row.copy()

    def thresholds(self):
        return np.vstack([lp.thresholds for lp in self.layers])

    def hops_for(self, layer: int) -> int:
        """Candidate radius at 1-based ``layer``."""
        return 2 if layer >= self.cfg.iis_start_layer else 1

    # ------------------------------------------------------------------

    def input_projection(self, x):
        x = ad._as_tensor(x)
        if x.cols != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.cols}")
        return ad.relu(self.input(x))

    def layer_forward(self, layer: int, h_prev, graph: MultiRelationGraph, training=False, stat_rows=None) -> LayerOutput:
        """Update every node's embedding at 1-based ``layer``."""
        lp = self.layers[layer - 1]
        n = graph.num_nodes
        hops = self.hops_for(layer)
        z = lp.similarity.embed(h_prev)
        zd = z.data

        selections = []
        n_sel = np.zeros(n, dtype=np.int64)
        kept = []
        for r in range(graph.num_relations):
            csr = graph.candidate_csr(r, hops)
            src = graph.candidate_owners(r, hops)
            p = float(lp.thresholds[r])
            dist = lp.similarity.pair_distances(zd, src, csr.indices)
            keep = select_segments(csr.indptr, csr.indices, dist, p)
            selections.append(RelationSelection(csr.indptr, csr.indices, dist, keep, p))
            ks, kd = src[keep], csr.indices[keep]
            cnt = np.bincount(ks, minlength=n)
            n_sel += cnt
            kept.append((ks, kd, cnt, p))
        agg_mean = _aggregation_matrix(n, [(ks, kd, cnt, p / np.maximum(cnt, 1)[ks]) for ks, kd, cnt, p in kept])
        message = ad.spmm(agg_mean, h_prev)

        upd = ad.relu(lp.update(ad.concat_rows(h_prev, message)))
        if lp.norm.mode != "none":
            agg_sum = _aggregation_matrix(n, [(ks, kd, cnt, np.full(ks.size, p)) for ks, kd, cnt, p in kept])
            upd = lp.norm.normalize(upd, ad.spmm(agg_sum, h_prev), None, n_sel, training, stat_rows)
        live = n_sel > 0
        if not live.all():
            log.debug("layer %d: %d centres with no selected neighbour", layer, int((~live).sum()))
            upd = upd * live.astype(np.float64)[:, None]
        return LayerOutput(layer, hops, ad.add(h_prev, upd), z, selections, n_sel)

    def forward(self, graph: MultiRelationGraph, training=False, batch=None) -> ForwardResult:
        if graph.num_features != self.in_dim or graph.num_relations != self.num_relations:
            raise ValueError("graph dimensions do not match the model")
        res = ForwardResult(self.input_projection(graph.features))
        h = res.h0
        for l in range(1, len(self.layers) + 1):
            out = self.layer_forward(l, h, graph, training, stat_rows=batch)
            res.layers.append(out)
            h = out.h
        return res

    def logits(self, layer: int, h, rows=None):
        h = ad._as_tensor(h)
        if rows is not None:
            h = ad.gather_rows(h, rows)
        return self.layers[layer - 1].classifier(h)

    def predict(self, graph: MultiRelationGraph, nodes=None) -> np.ndarray:
        """Fraud probability from the last layer's classifier."""
        if nodes is not None:
            nodes = np.asarray(nodes, dtype=np.int64)
            if nodes.size and (nodes.min() < 0 or nodes.max() >= graph.num_nodes):
                raise IndexError("unknown node id")
        res = self.forward(graph, training=False)
        logits = self.logits(len(self.layers), res.final, nodes)
        return ad.softmax(logits).data[:, 1]

    # ------------------------------------------------------------------

    def training_losses(self, graph, res: ForwardResult, batch, class_weights, labeled_mask, rng):
        """Per-layer cross-entropy and similarity losses on ``batch``."""
        labels = graph.labels
        ce, sim = [], []
        for out in res.layers:
            lp = self.layers[out.layer - 1]
            logits = self.logits(out.layer, out.h, batch)
            ce.append(ad.softmax_cross_entropy(logits, labels[batch], class_weights))
            union = graph.union_candidates(out.hops)
            c, v, same = sample_label_pairs(
                union.indptr, union.indices, batch, labels, labeled_mask, rng, self.cfg.pairs_per_kind
            )
            sim.append(pair_loss(lp.similarity, out.sim_embed, c, v, same, self.cfg.margin))
        return ce, sim

    # ------------------------------------------------------------------

    def save(self, path, extra=None):
        arrays = {f"param/{k}": p.data for k, p in self.named_parameters().items()}
        for l, lp in enumerate(self.layers, start=1):
            arrays[f"thresholds/{l}"] = lp.thresholds
            if lp.norm.running_mean is not None:
                arrays[f"running_mean/{l}"] = lp.norm.running_mean
                arrays[f"running_var/{l}"] = lp.norm.running_var
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "in_dim": self.in_dim,
            "num_relations": self.num_relations,
            "extra": extra or {},
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(ModelConfig(**meta["config"]), meta["in_dim"], meta["num_relations"])
            for name, p in model.named_parameters().items():
                p.data = z[f"param/{name}"].copy()
            for l, lp in enumerate(model.layers, start=1):
                lp.thresholds = z[f"thresholds/{l}"].copy()
                if f"running_mean/{l}" in z:
                    lp.norm.running_mean = z[f"running_mean/{l}"].copy()
                    lp.norm.running_var = z[f"running_var/{l}"].copy()
        model.meta_extra = meta["extra"]
        return model


def _aggregation_matrix(n, parts):
    """CSR matrix from per-relation (row, col, row_counts, value) entries.

    Each part's rows are ascending; entries of the same row from different
    parts are laid side by side (duplicates add up in products).
    """
    counts = sum(cnt for _, _, cnt, _ in parts)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    indices = np.empty(nnz, dtype=np.int64)
    data = np.empty(nnz)
    base = indptr[:-1].copy()
    for rows, cols, cnt, vals in parts:
        first = np.cumsum(cnt) - cnt
        pos = base[rows] + np.arange(rows.size) - first[rows]
        indices[pos] = cols
        data[pos] = vals
        base += cnt
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def total_loss(ce_losses, sim_losses, lambda_sim=1.0):
    """``sum_l ce_l + lambda_sim * sim_l``."""
    if len(ce_losses) != len(sim_losses):
        raise ValueError("one similarity loss per layer is required")
    total = None
    for ce, sl in zip(ce_losses, sim_losses):
        term = ce if lambda_sim == 0 else ce + ad.scale(sl, lambda_sim)
        total = term if total is None else total + term
    return total
