"""Sparse mixture-of-experts layer with shared or per-modality top-k routing.

For modality slot ``i`` with post-attention embedding ``h_i``::

    probs_i = softmax(gate_i(h_i))          # gate_i is one shared gate under "shared"
    w_i     = top_k_mask(probs_i, k)         # no renormalisation by default
    o_i     = sum_j w_i[j] * expert_j(h_i)   # only selected experts run
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .components import FeedForward, _init_bias, _init_weight
from .config import RoutingConfig
from .errors import ConfigurationError, ContractError, DimensionError


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis; ties go to the lower index."""
    probs = np.asarray(probs, dtype=np.float64)
    e = probs.shape[-1]
    if not 1 <= k <= e:
        raise ContractError(f"top-k needs 1 <= k <= {e}, got k={k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def top_k_mask(v, k: int) -> np.ndarray:
    """Keep the k largest entries of ``v`` (last axis), zero the rest."""
    v = np.asarray(v, dtype=np.float64)
    keep = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(keep, top_k_indices(v, k), True, axis=-1)
    return np.where(keep, v, 0.0)


@dataclass
class RoutingTrace:
    """Routing decisions for one forward pass.

    ``probs`` and ``weights`` are ``(B, N, E)``; ``selected`` is ``(B, N, k)``.
    """

    probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    availability: np.ndarray
    strategy: str

    @property
    def experts(self):
        return self.probs.shape[-1]

    @property
    def top_k(self):
        return self.selected.shape[-1]

    def selection_mask(self, argmax_only=False) -> np.ndarray:
        mask = np.zeros(self.probs.shape, dtype=bool)
        sel = self.selected[..., :1] if argmax_only else self.selected
        np.put_along_axis(mask, sel, True, axis=-1)
        return mask

    @staticmethod
    def concat(traces):
        traces = list(traces)
        return RoutingTrace(
            np.concatenate([t.probs for t in traces]),
            np.concatenate([t.selected for t in traces]),
            np.concatenate([t.weights for t in traces]),
            np.concatenate([t.availability for t in traces]),
            traces[0].strategy,
        )


TRACE_COLUMNS = ("sample_id", "modality_label", "availability_bitmask", "expert_index", "gate_weight", "selected")


def write_trace_csv(trace: RoutingTrace, sample_ids, labels, path) -> None:
    """One row per (sample, modality, expert) for the top-k experts plus the full-distribution argmax."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for b, sid in enumerate(sample_ids):
            for i, label in enumerate(labels):
                chosen = [int(j) for j in trace.selected[b, i]]
                top = int(np.argmax(trace.probs[b, i]))
                rows = chosen + ([top] if top not in chosen else [])
                for j in rows:
                    writer.writerow(
                        [sid, label, int(trace.availability[b]), j, repr(float(trace.weights[b, i, j])), int(j in chosen)]
                    )


class SparseMoE:
    def __init__(self, cfg: RoutingConfig, n_modalities: int, dim: int, router_rng, expert_rng):
        cfg.validate(n_modalities)
        self.cfg = cfg
        self.n = n_modalities
        self.dim = dim
        n_routers = n_modalities if cfg.strategy == "per-modality" else 1
        self.routers = [(_init_weight(router_rng, dim, cfg.experts), _init_bias(cfg.experts)) for _ in range(n_routers)]
        self.experts = [FeedForward(expert_rng, dim, cfg.expert_hidden, dim, ad.gelu) for _ in range(cfg.experts)]

    def named_parameters(self):
        out = {}
        for r, (w, b) in enumerate(self.routers):
            out[f"router.{r}.w"] = w
            out[f"router.{r}.b"] = b
        for j, ex in enumerate(self.experts):
            out.update({f"expert.{j}.{k}": v for k, v in ex.named_parameters().items()})
        return out

    def gate_logits(self, h: Tensor) -> Tensor:
        if self.cfg.strategy == "shared":
            w, b = self.routers[0]
            return ad.linear(h, w, b)
        return ad.stack([ad.linear(h[:, i, :], w, b) for i, (w, b) in enumerate(self.routers)], axis=1)

    def __call__(self, h: Tensor, availability=None):
        """Route ``h`` of shape ``(B, N, d)``; returns ``(outputs, probs, trace)``."""
        if h.ndim != 3 or h.shape[1] != self.n or h.shape[2] != self.dim:
            raise DimensionError(f"SMoE expects (B, {self.n}, {self.dim}) embeddings, got {h.shape}")
        bsz = h.shape[0]
        rows = bsz * self.n
        e, k = self.cfg.experts, self.cfg.top_k

        probs = ad.softmax(self.gate_logits(h))
        flat_probs = ad.reshape(probs, (rows, e))
        selected = top_k_indices(flat_probs.data, k)
        mask = np.zeros((rows, e))
        np.put_along_axis(mask, selected, 1.0, axis=-1)
        weights = ad.mul(flat_probs, Tensor(mask))
        if self.cfg.renormalize:
            weights = ad.scale_rows(weights, ad.div(1.0, ad.sum(weights, axis=1)))

        flat_h = ad.reshape(h, (rows, self.dim))
        out = None
        for j, expert in enumerate(self.experts):
            routed = np.flatnonzero(mask[:, j])
            if routed.size == 0:
                continue
            y = expert(ad.take_rows(flat_h, routed))
            y = ad.scale_rows(y, ad.index(weights, (routed, j)))
            contrib = ad.scatter_rows(y, routed, rows)
            out = contrib if out is None else ad.add(out, contrib)

        trace = RoutingTrace(
            probs=probs.data.copy(),
            selected=selected.reshape(bsz, self.n, k),
            weights=weights.data.reshape(bsz, self.n, e).copy(),
            availability=np.zeros(bsz, dtype=np.int64) if availability is None else np.asarray(availability),
            strategy=self.cfg.strategy,
        )
        return ad.reshape(out, (bsz, self.n, self.dim)), probs, trace


# ---------------------------------------------------------------- auxiliary losses


def _as_probs(x):
    if isinstance(x, RoutingTrace):
        return Tensor(x.probs), x.strategy
    return x, None


def cv_squared(importance: Tensor) -> Tensor:
    """Squared coefficient of variation (population std / mean)**2."""
    m = ad.mean(importance)
    dev = ad.sub(importance, m)
    return ad.div(ad.mean(ad.mul(dev, dev)), ad.mul(m, m))


def balancing_loss(probs, strategy=None) -> Tensor:
    """Importance loss on full gate distributions ``(B, N, E)``.

    Per-modality routing sums one CV**2 per router; a shared router gets a single
    CV**2 over every routing event in the batch.
    """
    probs, trace_strategy = _as_probs(probs)
    strategy = strategy or trace_strategy or "shared"
    if probs.shape[0] == 0:
        raise ContractError("balancing loss needs a nonempty batch")
    b, n, e = probs.shape
    if strategy == "shared":
        return cv_squared(ad.sum(ad.reshape(probs, (b * n, e)), axis=0))
    total = None
    for i in range(n):
        term = cv_squared(ad.sum(probs[:, i, :], axis=0))
        total = term if total is None else ad.add(total, term)
    return total


def specialization_targets(availability) -> np.ndarray:
    """Target expert per subject: bitmask - 1. Expert ``2**N - 1`` (the buffer) is never a target."""
    return np.asarray(availability, dtype=np.intp) - 1


def specialization_loss(probs, availability, include_imputed=True) -> Tensor:
    """Cross-entropy of each slot's gate distribution against its availability-combination expert."""
    probs, _ = _as_probs(probs)
    b, n, e = probs.shape
    if e < 2**n:
        raise ConfigurationError(f"specialization needs at least {2**n} experts for {n} modalities, got {e}")
    avail = np.asarray(availability, dtype=np.int64)
    targets = np.repeat(specialization_targets(avail), n)
    flat = ad.reshape(probs, (b * n, e))
    if include_imputed:
        return ad.cross_entropy(flat, targets)
    observed = ((avail[:, None] >> np.arange(n)) & 1).reshape(-1).astype(bool)
    rows = np.flatnonzero(observed)
    return ad.cross_entropy(ad.take_rows(flat, rows), targets[rows])
