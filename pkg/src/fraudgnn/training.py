"""Training loop, run configuration and CSV artefacts."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import MultiRelationGraph
from .metrics import REPORT_KEYS, EvalReport, evaluate
from .model import LayeredFraudGNN, ModelConfig, total_loss
from .optim import Adam
from .thresholds import ThresholdController

log = logging.getLogger(__name__)

CSV_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs"
    train_frac: float = 0.40
    batch_size: int = 512
    epochs: int = 200
    seed: int = 0
    lr: float = 0.01
    threshold_step: float = 0.02
    threshold_window: int = 10
    threshold_freeze_at: int = 8
    eval_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def flat(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "model"}
        out.update(asdict(self.model))
        return out


RUN_KEYS = tuple(f.name for f in fields(RunConfig) if f.name != "model")
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


def build_run_config(values: dict) -> RunConfig:
    """Build from flat ``key -> value`` pairs; unknown keys are rejected."""
    unknown = sorted(set(values) - set(RUN_KEYS) - set(MODEL_KEYS))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    run_types = {f.name: f.type for f in fields(RunConfig)}
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    run_kw = {k: _coerce(v, run_types[k]) for k, v in values.items() if k in RUN_KEYS}
    model_kw = {k: _coerce(v, model_types[k]) for k, v in values.items() if k in MODEL_KEYS}
    return RunConfig(model=ModelConfig(**model_kw), **run_kw)


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    t = str(type_name)
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def stratified_split(labels, train_frac, seed):
    """Per-class shuffled split; returns sorted ``(train, test)`` node ids."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        train.append(members[: int(round(train_frac * members.size))])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, dtype=np.int64)
    mask = np.zeros(labels.size, dtype=bool)
    mask[train] = True
    return train, np.flatnonzero(~mask)


def class_weights(labels):
    """``[1, benign/fraud]`` on the given labels."""
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    return np.array([1.0, neg / pos if pos else 1.0])


@dataclass
class EpochRecord:
    epoch: int
    ce: np.ndarray
    sim: np.ndarray
    total: float
    thresholds: np.ndarray
    frozen: np.ndarray
    distances: np.ndarray
    report: EvalReport | None = None


@dataclass
class TrainResult:
    model: LayeredFraudGNN
    train_idx: np.ndarray
    test_idx: np.ndarray
    history: list

    @property
    def final_report(self):
        for rec in reversed(self.history):
            if rec.report is not None:
                return rec.report
        return None

    def total_losses(self):
        return np.array([rec.total for rec in self.history])


def train(graph: MultiRelationGraph, cfg: RunConfig, on_epoch=None) -> TrainResult:
    mcfg = cfg.model
    train_idx, test_idx = stratified_split(graph.labels, cfg.train_frac, cfg.seed)
    labeled = np.zeros(graph.num_nodes, dtype=bool)
    labeled[train_idx] = True
    weights = class_weights(graph.labels[train_idx])

    model = LayeredFraudGNN(mcfg, graph.num_features, graph.num_relations, seed=cfg.seed)
    ctrl = ThresholdController(
        mcfg.num_layers,
        graph.num_relations,
        mcfg.initial_threshold,
        cfg.threshold_step,
        cfg.threshold_window,
        cfg.threshold_freeze_at,
    )
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    L, R = mcfg.num_layers, graph.num_relations
    last_dist = np.zeros((L, R))
    history = []

    for epoch in range(1, cfg.epochs + 1):
        model.set_thresholds(ctrl.thresholds())
        order = train_idx[rng.permutation(train_idx.size)]
        ce_sum = np.zeros(L)
        sim_sum = np.zeros(L)
        total_sum = 0.0
        d_sum = np.zeros((L, R))
        d_cnt = np.zeros((L, R))
        n_batches = 0
        for lo in range(0, order.size, cfg.batch_size):
            batch = np.sort(order[lo : lo + cfg.batch_size])
            try:
                with ad.Tape() as tape:
                    res = model.forward(graph, training=True, batch=batch)
                    ce, sim = model.training_losses(graph, res, batch, weights, labeled, rng)
                    loss = total_loss(ce, sim, mcfg.lambda_sim)
            except ad.NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from e
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()

            ce_sum += [c.item() for c in ce]
            sim_sum += [s.item() for s in sim]
            total_sum += loss.item()
            n_batches += 1
            for l, out in enumerate(res.layers):
                for r, sel in enumerate(out.selections):
                    s, c = _kept_distance_sum(sel, batch)
                    d_sum[l, r] += s
                    d_cnt[l, r] += c

        avg = np.where(d_cnt > 0, d_sum / np.maximum(d_cnt, 1), last_dist)
        last_dist = avg
        ctrl.observe_epoch(avg)
        model.set_thresholds(ctrl.thresholds())

        report = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            prob = model.predict(graph)
            report = evaluate(graph.labels[test_idx], prob[test_idx])
        nb = max(n_batches, 1)
        rec = EpochRecord(
            epoch,
            ce_sum / nb,
            sim_sum / nb,
            total_sum / nb,
            ctrl.thresholds(),
            ctrl.frozen(),
            avg,
            report,
        )
        history.append(rec)
        log.info("epoch %d total=%.4f", epoch, rec.total)
        if on_epoch is not None:
            on_epoch(rec)

    return TrainResult(model, train_idx, test_idx, history)


def _kept_distance_sum(sel, centers):
    mask = np.zeros(sel.indptr.size - 1, dtype=bool)
    mask[centers] = True
    seg = np.repeat(np.arange(sel.indptr.size - 1), np.diff(sel.indptr))
    keep = sel.keep & mask[seg]
    return float(sel.distances[keep].sum()), int(keep.sum())


LADDER = ("l1", "cosine", "cosine+norm", "cosine+norm+iis")


def ladder_configs(base: RunConfig, norm="batch"):
    """The four ablation stages built on ``base``; IIS turns on only in the last."""
    m = base.model
    off = m.num_layers + 1
    iis = m.iis_start_layer if m.iis_start_layer <= m.num_layers else min(4, m.num_layers)
    stages = [
        dict(similarity="l1", norm="none", iis_start_layer=off),
        dict(similarity="cosine", norm="none", iis_start_layer=off),
        dict(similarity="cosine", norm=norm, iis_start_layer=off),
        dict(similarity="cosine", norm=norm, iis_start_layer=iis),
    ]
    return [(name, replace(base, model=replace(m, **kw))) for name, kw in zip(LADDER, stages)]


def run_ablation(graph, base: RunConfig, seeds, norm="batch", on_run=None):
    """Train every ladder stage for every seed; one row dict per (stage, seed)."""
    if base.epochs < 1:
        raise ValueError("ablation needs at least one epoch")
    rows = []
    for name, cfg in ladder_configs(base, norm):
        for seed in seeds:
            res = train(graph, replace(cfg, seed=int(seed)))
            row = {"stage": name, "seed": int(seed), **res.final_report.as_dict(), "final_loss": res.history[-1].total}
            rows.append(row)
            if on_run is not None:
                on_run(row)
    return rows


def write_ablation_csv(path, rows):
    path = Path(path)
    cols = ["stage", "seed", *REPORT_KEYS, "final_loss"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        _header(f, "ablation")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], (int, str)) else f"{row[c]:.6f}" for c in cols])
    return path


def write_config(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(f"{k} = {v}\n" for k, v in cfg.flat().items())
    return Path(path)


def split_nodes(graph, cfg: RunConfig, split: str):
    train_idx, test_idx = stratified_split(graph.labels, cfg.train_frac, cfg.seed)
    if split == "train":
        return train_idx
    if split == "test":
        return test_idx
    if split == "all":
        return np.arange(graph.num_nodes)
    raise ValueError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# CSV artefacts


def _header(f, name):
    f.write(f"# fraudgnn {name} v{CSV_VERSION}\n")


def write_loss_csv(path, history):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        _header(f, "loss_per_layer")
        w = csv.writer(f, lineterminator="\n")
        L = len(history[0].ce) if history else 0
        w.writerow(["epoch"] + [f"layer{l}" for l in range(1, L + 1)] + ["total"])
        for rec in history:
            w.writerow([rec.epoch] + [repr(float(c)) for c in rec.ce] + [repr(float(rec.total))])
    return path


def write_thresholds_csv(path, history):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        _header(f, "thresholds")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "layer", "relation", "threshold", "avg_distance", "frozen"])
        for rec in history:
            L, R = rec.thresholds.shape
            for l in range(L):
                for r in range(R):
                    w.writerow(
                        [
                            rec.epoch,
                            l + 1,
                            r + 1,
                            repr(float(rec.thresholds[l, r])),
                            repr(float(rec.distances[l, r])),
                            int(rec.frozen[l, r]),
                        ]
                    )
    return path


def write_eval_csv(path, history):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        _header(f, "eval")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", *REPORT_KEYS])
        for rec in history:
            if rec.report is not None:
                w.writerow([rec.epoch, *rec.report.csv_row()])
    return path


def read_csv(path):
    """Rows of a versioned CSV as dicts (the comment line is skipped)."""
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))
