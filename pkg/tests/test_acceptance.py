"""Acceptance suite: one PASS/FAIL line per criterion, printed and collected for the terminal summary.

Criteria 4-6 and the trained-model properties share cached training runs on
the synthetic presets (2000 nodes, 5 seeds, 50 epochs).  Criterion 8 runs
only when real graphs are supplied through ``FRAUDGNN_YELP_DIR`` and
``FRAUDGNN_AMAZON_DIR``.
"""

import math
import os
import time
from functools import lru_cache

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, random_graph
from fraudgnn import autodiff as ad
from fraudgnn import cli, synth, training
from fraudgnn.graph import MultiRelationGraph, load_graph
from fraudgnn.metrics import auc, recall
from fraudgnn.model import LayeredFraudGNN, ModelConfig
from fraudgnn.normalization import batch_wise_normalize, node_wise_normalize
from fraudgnn.similarity import SimilarityModule, pair_loss, select_neighbors
from gradcheck import STEP, check, projected

SEEDS = (0, 1, 2, 3, 4)
EPOCHS = 50
NODES = 2000
INSTANCES = 200
GRAD_INSTANCES = 100
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12
LADDER_BUDGET_S = 15 * 60
DATA_ENV = {"yelp": "FRAUDGNN_YELP_DIR", "amazon": "FRAUDGNN_AMAZON_DIR"}
# cosine minus l1, in points, from the reference experiments (recall, auc)
REAL_DELTAS = {"yelp": (1.02, 0.90), "amazon": (0.79, 0.42)}
REAL_EPOCHS = 200


def verdict(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs


@lru_cache(maxsize=None)
def preset_graph(name):
    return synth.generate(synth.preset(name, num_nodes=NODES, seed=0))


RUN_SECONDS = {}


@lru_cache(maxsize=None)
def trained(preset, similarity, norm, iis, seed):
    """One 50-epoch run; ``iis`` False puts the IIS start past the last layer."""
    model = ModelConfig(similarity=similarity, norm=norm, iis_start_layer=4 if iis else 7)
    batch = cli.DENSE_BATCH if preset == "dense" else 512
    cfg = training.RunConfig(epochs=EPOCHS, seed=seed, batch_size=batch, eval_every=EPOCHS, model=model)
    t0 = time.perf_counter()
    res = training.train(preset_graph(preset), cfg)
    RUN_SECONDS[(preset, similarity, norm, iis, seed)] = time.perf_counter() - t0
    return res


LADDER = (
    ("l1", ("l1", "none", False)),
    ("+cos", ("cosine", "none", False)),
    ("+batch", ("cosine", "batch", False)),
    ("+iis", ("cosine", "batch", True)),
)


def medians(preset, stage, key):
    return float(np.median([getattr(trained(preset, *stage, s).final_report, key) for s in SEEDS]))


# ---------------------------------------------------------------------------
# 1. gradient suite


def _grad_cases(rng):
    """op name -> (scalar fn over tensors, list of input arrays)."""

    def proj(shape):
        return rng.standard_normal(shape)

    m, k, n = (int(v) for v in rng.integers(1, 5, 3))
    cases = {}
    P = proj((m, n))
    cases["matmul"] = (projected(ad.matmul, P), [rng.standard_normal((m, k)), rng.standard_normal((k, n))])
    P = proj((m, k))
    cases["tanh"] = (projected(ad.tanh, P), [rng.standard_normal((m, k)) * 2])
    x = rng.standard_normal((m, k))
    x[np.abs(x) < 1e-3] = 0.5
    cases["relu"] = (projected(ad.relu, P), [x])
    dim = int(rng.integers(2, 6))
    P = proj((m, 1))
    cases["cosine distance"] = (
        projected(lambda a, b: ad.cosine_distance_rows(a, b)[0], P),
        [rng.standard_normal((m, dim)), rng.standard_normal((m, dim))],
    )

    rows, d, R = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    w = rng.uniform(0.1, 1.0, R)
    n_sel = rng.integers(1, 6, rows)
    P = proj((rows, d))
    cases["node-wise norm"] = (
        projected(lambda h, *s: node_wise_normalize(h, list(s), w, n_sel), P),
        [rng.standard_normal((rows, d))] + [rng.standard_normal((rows, d)) for _ in range(R)],
    )
    brows = rows + 1
    bn = rng.integers(1, 6, brows)
    P = proj((brows, d))
    cases["batch-wise norm"] = (
        projected(lambda h, *s: batch_wise_normalize(h, list(s), w, bn, training=True), P),
        [rng.standard_normal((brows, d))] + [rng.standard_normal((brows, d)) for _ in range(R)],
    )

    labels = rng.integers(0, 2, m + 1)
    cw = np.array([1.0, float(rng.uniform(1, 5))])
    cases["cross-entropy"] = (lambda z: ad.softmax_cross_entropy(z, labels, cw), [rng.standard_normal((m + 1, 2)) * 2])

    mode = ("cosine", "l1")[int(rng.integers(0, 2))]
    sm = SimilarityModule(4, mode, 3, rng=rng)
    npairs = int(rng.integers(1, 6))
    c, v = rng.integers(0, 6, npairs), rng.integers(0, 6, npairs)
    v = np.where(v == c, (v + 1) % 6, v)
    same = rng.integers(0, 2, npairs)
    margin = float(rng.uniform(0.3, 1.5))

    def sim_loss(h, W, b):
        z = ad.tanh(h @ W + b) if mode == "cosine" else ad.softmax(h @ W + b)
        return pair_loss(sm, z, c, v, same, margin=margin)

    cases["similarity loss"] = (sim_loss, [rng.standard_normal((6, 4)), sm.weight.data.copy(), rng.standard_normal((1, sm.embed_dim)) * 0.1])
    return cases


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    counts = {}
    for _ in range(GRAD_INSTANCES):
        for name, (fn, arrays) in _grad_cases(rng).items():
            err = check(fn, arrays, step=STEP)
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    ok = not bad and min(counts.values()) >= GRAD_INSTANCES and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict("criterion 1", ok, f"{len(worst)} ops x {GRAD_INSTANCES} instances, worst rel err [{detail}], {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. oracle equivalence


def _oracle_layer(rng, case):
    n = int(rng.integers(2, 14))
    R = int(rng.integers(1, 4))
    g, edges = random_graph(rng, n=n, d=3, relations=R, mean_degree=float(rng.uniform(0.5, 4)))
    cfg = ModelConfig(
        num_layers=6,
        hidden=4,
        sim_dim=3,
        iis_start_layer=int(rng.integers(1, 8)),
        norm=("none", "node", "batch")[case % 3],
        similarity=("cosine", "l1")[(case // 3) % 2],
    )
    model = LayeredFraudGNN(cfg, 3, R, seed=case)
    for lp in model.layers:
        lp.update.bias.data = rng.standard_normal(lp.update.bias.shape) * 0.1
    model.set_thresholds(rng.choice([0.02, 0.3, 0.5, 0.74, 1.0], (6, R)))
    l = int(rng.integers(1, 7))
    lp = model.layers[l - 1]
    params = {
        "sim_mode": lp.similarity.mode,
        "sim_W": lp.similarity.weight.data,
        "sim_b": lp.similarity.bias.data,
        "upd_W": lp.update.weight.data,
        "upd_b": lp.update.bias.data,
    }
    h = rng.standard_normal((n, 4))
    out = model.layer_forward(l, h, g, training=True)
    adj = oracles.dense_adjacency(n, [e.tolist() for e in edges])
    expected, kept = oracles.layer(h, adj, params, lp.thresholds, model.hops_for(l), cfg.norm)
    same_sel = all(sorted(out.selections[r].kept(u).tolist()) == kept[u][r] for u in range(n) for r in range(R))
    return same_sel and np.allclose(out.h.data, expected, rtol=ORACLE_TOL, atol=ORACLE_TOL)


def _neigh_case(rng, rows, d, R, allow_empty):
    neigh = [[[rng.standard_normal(d) for _ in range(int(rng.integers(0, 4)))] for _ in range(R)] for _ in range(rows)]
    if not allow_empty:
        for row in neigh:
            if not any(row):
                row[0].append(rng.standard_normal(d))
    w = rng.uniform(0.02, 1.0, R)
    sums = [np.array([np.sum(row[r], axis=0) if row[r] else np.zeros(d) for row in neigh]) for r in range(R)]
    n_sel = np.array([sum(len(vs) for vs in row) for row in neigh])
    return neigh, w, sums, n_sel


def _oracle_node_wise(rng):
    rows, d, R = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
    h = rng.standard_normal((rows, d))
    neigh, w, sums, n_sel = _neigh_case(rng, rows, d, R, allow_empty=True)
    got = node_wise_normalize(h, sums, w, n_sel).data
    exp = np.array([oracles.node_wise(h[j], neigh[j], w, 1e-5) for j in range(rows)])
    return np.allclose(got, exp, rtol=ORACLE_TOL, atol=ORACLE_TOL)


def _oracle_batch_wise(rng, allow_empty=True):
    rows, d, R = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
    h = rng.standard_normal((rows, d))
    neigh, w, sums, n_sel = _neigh_case(rng, rows, d, R, allow_empty)
    got = batch_wise_normalize(h, sums, w, n_sel, training=True).data
    exp = np.array(oracles.batch_wise(h.tolist(), neigh, w, 1e-5))
    return np.allclose(got, exp, rtol=ORACLE_TOL, atol=ORACLE_TOL)


def _oracle_select(rng, trial):
    mode = ("l1", "cosine")[trial % 2]
    m = SimilarityModule(4, mode, 3, rng=np.random.default_rng(trial))
    n = int(rng.integers(1, 12))
    cands = np.sort(rng.choice(100, n, replace=False))
    feats = rng.standard_normal((n, 4))
    center = rng.standard_normal(4)
    p = float(rng.choice([0.02, 0.25, 0.4, 0.5, 0.74, 1.0]))
    sel = select_neighbors(m, center, feats, cands, p)
    z = oracles.embed_rows(mode, m.weight.data, m.bias.data, np.vstack([center, feats]))
    d = [oracles.distance(mode, z[0], z[i + 1]) for i in range(n)]
    return sel.kept.tolist() == oracles.select(cands.tolist(), d, p)


def _oracle_two_hop(rng):
    n = int(rng.integers(1, 15))
    R = int(rng.integers(1, 3))
    g, edges = random_graph(rng, n=n, d=2, relations=R, mean_degree=float(rng.uniform(0, 4)))
    adj = oracles.dense_adjacency(n, [e.tolist() for e in edges])
    return all(g.two_hop_candidates(u, r).tolist() == oracles.bfs_within(adj[r], u, 2) for u in range(n) for r in range(R))


def _oracle_auc(rng):
    n = int(rng.integers(2, 80))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
    return abs(auc(y, s) - oracles.auc_pairs(y.tolist(), s.tolist())) <= ORACLE_TOL


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(77)
    checks = {
        "layer_forward": lambda i: _oracle_layer(rng, i),
        "node_wise_normalize": lambda i: _oracle_node_wise(rng),
        "batch_wise_normalize": lambda i: _oracle_batch_wise(rng),
        "select_neighbors": lambda i: _oracle_select(rng, i),
        "two_hop_candidates": lambda i: _oracle_two_hop(rng),
        "auc": lambda i: _oracle_auc(rng),
    }
    failures = {name: sum(not fn(i) for i in range(INSTANCES)) for name, fn in checks.items()}
    ok = not any(failures.values())
    detail = ", ".join(f"{k} {INSTANCES - v}/{INSTANCES}" for k, v in failures.items())
    verdict("criterion 2", ok, f"matching instances: {detail} (tol {ORACLE_TOL:g})")


# ---------------------------------------------------------------------------
# 3. batch-wise formula fidelity


def test_criterion_3_batch_wise_literal_loops():
    rng = np.random.default_rng(3)
    results = [_oracle_batch_wise(rng, allow_empty=False) for _ in range(INSTANCES)]
    results += [_oracle_batch_wise(rng, allow_empty=True) for _ in range(INSTANCES)]
    ok = all(results)
    verdict("criterion 3", ok, f"{sum(results)}/{len(results)} random batches match the loop transcription to {ORACLE_TOL:g}")


# ---------------------------------------------------------------------------
# 4. convergence acceleration


@pytest.mark.slow
def test_criterion_4_batch_norm_accelerates():
    reached = []
    for s in SEEDS:
        target = trained("sparse", "cosine", "none", False, s).total_losses()[-1]
        losses = trained("sparse", "cosine", "batch", False, s).total_losses()
        hit = np.flatnonzero(losses <= target)
        reached.append(int(hit[0]) + 1 if hit.size else math.inf)
    med = float(np.median(reached))
    verdict("criterion 4", med <= 25, f"epochs for batch-wise to reach the no-norm epoch-{EPOCHS} loss per seed {reached}, median {med} (need <= 25)")


# ---------------------------------------------------------------------------
# 5. ablation ladder


@pytest.mark.slow
def test_criterion_5_ablation_ladder():
    rec = [medians("sparse", stage, "recall") for _, stage in LADDER]
    au = [medians("sparse", stage, "auc") for _, stage in LADDER]
    seconds = sum(RUN_SECONDS[("sparse", *stage, s)] for _, stage in LADDER for s in SEEDS)
    steps_ok = all(b >= a for a, b in zip(rec, rec[1:])) and all(b >= a for a, b in zip(au, au[1:]))
    gain = 100.0 * (rec[-1] - rec[0])
    ok = steps_ok and gain >= 2.0 and seconds <= LADDER_BUDGET_S
    stages = ", ".join(f"{name} recall {r:.4f} auc {a:.4f}" for (name, _), r, a in zip(LADDER, rec, au))
    verdict("criterion 5", ok, f"medians [{stages}]; full minus l1 recall {gain:+.2f} pts (need >= 2); ladder {seconds:.0f}s (budget {LADDER_BUDGET_S}s)")


# ---------------------------------------------------------------------------
# 6. density effect


@pytest.mark.slow
def test_criterion_6_density_effect():
    f1 = {(p, norm): medians(p, ("cosine", norm, False), "macro_f1") for p in ("dense", "sparse") for norm in ("node", "batch")}
    dense_ok = f1["dense", "node"] >= f1["dense", "batch"]
    sparse_ok = f1["sparse", "batch"] >= f1["sparse", "node"]
    detail = ", ".join(f"{p}/{n} {v:.4f}" for (p, n), v in f1.items())
    verdict("criterion 6", dense_ok and sparse_ok, f"median macro-F1 [{detail}]; dense node>=batch {dense_ok}, sparse batch>=node {sparse_ok}")


# ---------------------------------------------------------------------------
# 7. IIS mechanics


def test_criterion_7_iis_path_graph():
    n = 9
    g = MultiRelationGraph.from_edge_lists(np.zeros((n, 4)), np.zeros(n, dtype=int), [[(i, i + 1) for i in range(n - 1)]])
    model = LayeredFraudGNN(ModelConfig(num_layers=6, hidden=4, sim_dim=4, iis_start_layer=4), 4, 1)
    for lp in model.layers:
        lp.similarity.weight.data = np.eye(4)
    model.set_thresholds(np.full((6, 1), 0.25))
    # node 2 at distance 2 from centre 4 points the same way; 1-hop nodes 3 and 5 do not
    h = np.random.default_rng(0).standard_normal((n, 4))
    h[4] = h[2] = [1.0, 0.0, 0.0, 0.0]
    h[3], h[5], h[6] = [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]
    subset_ok, two_hop_seen = True, False
    for l in range(1, 7):
        out = model.layer_forward(l, h, g)
        for u in range(n):
            dist = {abs(int(v) - u) for v in out.selections[0].kept(u)}
            if l < 4:
                subset_ok &= dist <= {1}
            else:
                subset_ok &= dist <= {1, 2}
        kept4 = out.selections[0].kept(4).tolist()
        if l >= 4:
            two_hop_seen = two_hop_seen or kept4 == [2]
            subset_ok &= kept4 == [2]
    ok = subset_ok and two_hop_seen
    verdict("criterion 7", ok, f"layers 1-3 within 1-hop, layers 4-6 pick the distance-2 node for the centre: {ok}")


# ---------------------------------------------------------------------------
# 8. real datasets


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(DATA_ENV))
def test_criterion_8_real_data(name):
    path = os.environ.get(DATA_ENV[name])
    if not path:
        pytest.skip(f"{DATA_ENV[name]} not set")
    g = load_graph(path)
    best = {}
    for sim in ("l1", "cosine"):
        cfg = training.RunConfig(
            epochs=REAL_EPOCHS, seed=0, model=ModelConfig(similarity=sim, norm="none", iis_start_layer=7)
        )
        hist = training.train(g, cfg).history
        best[sim] = (max(r.report.recall for r in hist), max(r.report.auc for r in hist))
    deltas = [100.0 * (best["cosine"][k] - best["l1"][k]) for k in (0, 1)]
    ok = all(d > 0 and abs(d - ref) <= 1.0 for d, ref in zip(deltas, REAL_DELTAS[name]))
    verdict(
        f"criterion 8 ({name})",
        ok,
        f"cosine minus l1: recall {deltas[0]:+.2f} pts (ref {REAL_DELTAS[name][0]:+.2f}), auc {deltas[1]:+.2f} pts (ref {REAL_DELTAS[name][1]:+.2f})",
    )


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["generate", "--preset", "sparse", "--nodes", "400", "--seed", "2", "--out", str(data)]) == 0
    digests = []
    for run in ("a", "b"):
        argv = ["train", "--data", str(data), "--out", str(tmp_path / run), "--epochs", "5", "--norm", "batch", "-q"]
        assert cli.main(argv) == 0
        digests.append([(tmp_path / run / f).read_bytes() for f in ("loss_per_layer.csv", "thresholds.csv", "eval.csv")])
    ok = digests[0] == digests[1]
    verdict("criterion 9", ok, f"two identical train runs give identical loss, threshold and eval CSV bytes: {ok}")


# ---------------------------------------------------------------------------
# properties of trained models on the same runs


def label_agreement(model, g):
    res = model.forward(g)
    per_layer = []
    for out in res.layers:
        same = total = 0
        for sel in out.selections:
            owner = np.repeat(np.arange(g.num_nodes), np.diff(sel.indptr))[sel.keep]
            kept = sel.candidates[sel.keep]
            same += int((g.labels[owner] == g.labels[kept]).sum())
            total += kept.size
        per_layer.append(same / total)
    return per_layer


@pytest.mark.slow
def test_property_self_correction_agreement():
    g = preset_graph("sparse")
    agree = np.array([label_agreement(trained("sparse", "cosine", "batch", True, s).model, g) for s in SEEDS])
    med = np.median(agree, axis=0)
    ok = bool(np.all(np.diff(med) >= 0))
    # diagnostic only: the same runs without IIS show whether a drop comes from the 2-hop candidates
    plain = np.median([label_agreement(trained("sparse", "cosine", "batch", False, s).model, g) for s in SEEDS], axis=0)
    verdict(
        "property self-correction",
        ok,
        f"median kept-neighbour label agreement by layer {np.round(med, 4).tolist()} (without IIS {np.round(plain, 4).tolist()})",
    )


@pytest.mark.slow
def test_property_train_recall_at_least_held_out():
    g = preset_graph("sparse")
    train_r, test_r = [], []
    for s in SEEDS:
        res = trained("sparse", "cosine", "batch", True, s)
        prob = res.model.predict(g)
        train_r.append(recall(g.labels[res.train_idx], prob[res.train_idx] > 0.5))
        test_r.append(recall(g.labels[res.test_idx], prob[res.test_idx] > 0.5))
    ok = np.median(train_r) >= np.median(test_r)
    verdict("property train>=held-out recall", ok, f"median train {np.median(train_r):.4f}, held-out {np.median(test_r):.4f}")


def test_property_ladder_configs_match_runs():
    base = training.RunConfig(model=ModelConfig())
    built = [(c.model.similarity, c.model.norm, c.model.iis_start_layer <= 6) for _, c in training.ladder_configs(base)]
    assert built == [stage for _, stage in LADDER]
