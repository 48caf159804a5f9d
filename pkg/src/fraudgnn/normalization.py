"""Partial neighbourhood normalization.

Statistics come only from the similarity-selected neighbours of each centre,
weighted by the per-relation thresholds.  With ``S_u = sum_r p_r * sum_{v in
sel_r(u)} h_v`` and ``n_u`` the number of selected neighbours over all
relations:

node-wise (one scalar mean/variance per centre)::

    mu_u    = sum_i S_u,i / (d * n_u)
    var_u   = sum_i (S_u,i - mu_u)^2 / (d * n_u)
    out_u   = (h_u - mu_u) / sqrt(var_u + eps)

batch-wise (one mean/variance per feature over the batch)::

    mu_i    = mean_j S_j,i / n_j
    var_i   = mean_j (S_j,i - mu_i)^2 / n_j
    out_j,i = (h_j,i - mu_i) / sqrt(var_i + eps)

There is no learnable scale or shift.  Centres with no selected neighbour
pass through unchanged and never enter batch statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NONE = "none"
NODE_WISE = "node"
BATCH_WISE = "batch"
MODES = (NONE, NODE_WISE, BATCH_WISE)


@dataclass
class NormConfig:
    mode: str = NONE
    eps: float = 1e-5
    momentum: float = 0.9
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    passthrough_rows: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def ensure_running(self, d):
        if self.running_mean is None:
            self.running_mean = np.zeros(d)
            self.running_var = np.ones(d)

    def normalize(self, h, messages, weights, n_sel, training=False, stat_rows=None):
        """Dispatch on ``mode``."""
        if self.mode == NONE:
            return ad._as_tensor(h)
        if self.mode == NODE_WISE:
            return node_wise_normalize(h, messages, weights, n_sel, self.eps, cfg=self)
        return batch_wise_normalize(h, messages, weights, n_sel, training, self, stat_rows)


def weighted_message(messages, weights):
    """``sum_r p_r * messages[r]``; a lone tensor is taken as already weighted."""
    if isinstance(messages, (ad.Tensor, np.ndarray)):
        return ad._as_tensor(messages)
    if len(messages) != len(weights):
        raise ValueError(f"{len(messages)} relation messages but {len(weights)} weights")
    total = None
    for msg, p in zip(messages, weights):
        term = ad.scale(msg, p)
        total = term if total is None else total + term
    return total


def _blend(out, h, live):
    """Take ``out`` on live rows and ``h`` elsewhere."""
    if live.all():
        return out
    mask = live.astype(np.float64)[:, None]
    return out * mask + h * (1.0 - mask)


def node_wise_normalize(h, messages, weights, n_sel, eps=1e-5, cfg=None):
    h = ad._as_tensor(h)
    s = weighted_message(messages, weights)
    n_sel = np.asarray(n_sel, dtype=np.float64).reshape(-1)
    if s.shape != h.shape or n_sel.size != h.rows:
        raise ValueError("h, messages and n_sel must describe the same rows")
    live = n_sel > 0
    if cfg is not None:
        cfg.passthrough_rows += int((~live).sum())
    if not live.any():
        return h
    d = h.cols
    inv = (1.0 / (d * np.where(live, n_sel, 1.0)))[:, None]
    mu = ad.sum_cols(s) * inv
    var = ad.sum_cols(ad.square(s - mu)) * inv
    out = (h - mu) / ad.sqrt(var + eps)
    return _blend(out, h, live)


def batch_wise_normalize(h, messages, weights, n_sel, training=True, cfg=None, stat_rows=None):
    """Feature-wise normalization with statistics from the batch rows.

    ``stat_rows`` (indices) restricts which rows feed the statistics; every
    live row is normalized with them.  Outside training the running
    statistics in ``cfg`` are used instead.
    """
    cfg = NormConfig(mode=BATCH_WISE) if cfg is None else cfg
    h = ad._as_tensor(h)
    if h.rows == 0:
        raise ValueError("batch-wise normalization of an empty batch")
    s = weighted_message(messages, weights)
    n_sel = np.asarray(n_sel, dtype=np.float64).reshape(-1)
    if s.shape != h.shape or n_sel.size != h.rows:
        raise ValueError("h, messages and n_sel must describe the same rows")
    live = n_sel > 0
    cfg.ensure_running(h.cols)
    if not live.any():
        return h

    if training:
        use = live.copy()
        if stat_rows is not None:
            chosen = np.zeros(h.rows, dtype=bool)
            chosen[np.asarray(stat_rows, dtype=np.int64)] = True
            use &= chosen
        idx = np.flatnonzero(use)
        if idx.size == 0:
            return h
        m = idx.size
        inv_n = (1.0 / n_sel[idx])[:, None]
        s_b = ad.gather_rows(s, idx)
        mu = ad.scale(ad.sum_rows(s_b * inv_n), 1.0 / m)
        var = ad.scale(ad.sum_rows(ad.square(s_b - mu) * inv_n), 1.0 / m)
        k = cfg.momentum
        cfg.running_mean = k * cfg.running_mean + (1.0 - k) * mu.data[0]
        cfg.running_var = k * cfg.running_var + (1.0 - k) * var.data[0]
        out = (h - mu) / ad.sqrt(var + cfg.eps)
    else:
        mu = cfg.running_mean[None, :]
        sd = np.sqrt(cfg.running_var + cfg.eps)[None, :]
        out = (h - mu) / sd
    return _blend(out, h, live)
