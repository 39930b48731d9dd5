"""Error tables by availability combination / target bucket, and expert-activation statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .components import all_combinations, combo_label
from .errors import ContractError

log = logging.getLogger(__name__)

BUCKETS = ("<0", "=0", "(0,1]", ">1")


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise ContractError(f"rmse needs equal nonzero lengths, got {p.size} and {t.size}")
    return math.sqrt(float(np.mean((p - t) ** 2)))


def bucket_of(delta: float) -> str:
    if delta < 0:
        return "<0"
    if delta == 0:
        return "=0"
    if delta <= 1:
        return "(0,1]"
    return ">1"


@dataclass
class Cell:
    n: int
    per_seed: list
    mean: float
    std: float

    @classmethod
    def from_residuals(cls, residual_sets):
        per_seed = [math.sqrt(float(np.mean(r**2))) for r in residual_sets]
        arr = np.asarray(per_seed)
        return cls(len(residual_sets[0]), per_seed, float(arr.mean()), float(arr.std()))


@dataclass
class MetricsReport:
    labels: tuple
    overall: Cell
    by_combination: dict = field(default_factory=dict)
    by_bucket: dict = field(default_factory=dict)
    by_combination_bucket: dict = field(default_factory=dict)

    def rows(self):
        """Flat cells as dicts, one per (section, key)."""
        yield {"section": "overall", "combination": "", "bucket": "", **self.overall.__dict__}
        for bits, cell in self.by_combination.items():
            yield {"section": "combination", "combination": combo_label(bits, self.labels), "bucket": "", **cell.__dict__}
        for b, cell in self.by_bucket.items():
            yield {"section": "bucket", "combination": "", "bucket": b, **cell.__dict__}
        for (bits, b), cell in self.by_combination_bucket.items():
            yield {
                "section": "combination_bucket",
                "combination": combo_label(bits, self.labels),
                "bucket": b,
                **cell.__dict__,
            }

    def to_json(self) -> str:
        return json.dumps({"modalities": list(self.labels), "cells": list(self.rows())}, indent=1)

    def write(self, json_path, csv_path):
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["section", "combination", "bucket", "n", "mean_rmse", "std_rmse", "per_seed_rmse"])
            for r in self.rows():
                w.writerow(
                    [r["section"], r["combination"], r["bucket"], r["n"], repr(r["mean"]), repr(r["std"]),
                     ";".join(repr(x) for x in r["per_seed"])]
                )


def tabulate(availability, targets, predictions, labels=("M", "F", "A", "T")) -> MetricsReport:
    """RMSE overall, per availability combination, per target bucket and per (combination, bucket).

    ``predictions`` is one array or a sequence of arrays (one per seed); cells
    report the across-seed mean and population std of per-seed RMSE.
    """
    avail = np.asarray(availability, dtype=np.int64)
    y = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 1:
        preds = preds[None, :]
    if preds.shape[1] != y.size or avail.size != y.size or y.size == 0:
        raise ContractError(f"misaligned inputs: {preds.shape[1]} predictions, {y.size} targets, {avail.size} subjects")
    resid = preds - y[None, :]
    buckets = np.array([bucket_of(v) for v in y])
    report = MetricsReport(tuple(labels), Cell.from_residuals(list(resid)))
    for bits in all_combinations(len(labels)):
        sel = avail == bits
        if sel.any():
            report.by_combination[bits] = Cell.from_residuals(list(resid[:, sel]))
            for b in BUCKETS:
                sub = sel & (buckets == b)
                if sub.any():
                    report.by_combination_bucket[(bits, b)] = Cell.from_residuals(list(resid[:, sub]))
    for b in BUCKETS:
        sel = buckets == b
        if sel.any():
            report.by_bucket[b] = Cell.from_residuals(list(resid[:, sel]))
    return report


# ---------------------------------------------------------------- expert activation


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class ActivationReport:
    labels: tuple
    frequency: np.ndarray  # (E,) selections per routing event; sums to k
    counts: np.ndarray  # (E, C) raw selections by source combination
    adjusted: np.ndarray  # (E, C) prevalence-adjusted shares; rows sum to 1 (or 0)
    router_entropy: list
    aggregate_entropy: float
    n_events: int

    def write_csv(self, path):
        combos = all_combinations(len(self.labels))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["expert_index", "activation_frequency"] + [f"combo_{b}" for b in combos])
            for e in range(len(self.frequency)):
                w.writerow([e, repr(float(self.frequency[e]))] + [repr(float(x)) for x in self.adjusted[e]])

    def summary(self) -> dict:
        return {
            "n_events": self.n_events,
            "router_entropy": self.router_entropy,
            "aggregate_entropy": self.aggregate_entropy,
            "max_entropy": math.log(len(self.frequency)),
        }


def activation_stats(trace, labels=("M", "F", "A", "T"), argmax_only=False) -> ActivationReport:
    """Expert activation frequencies, prevalence-adjusted source mix and router entropies.

    An expert counts as activated by a (sample, modality) routing event when it is
    among that event's top-k (or is its argmax when ``argmax_only``).
    """
    sel = trace.selection_mask(argmax_only)  # (B, N, E)
    b, n, e = sel.shape
    avail = np.asarray(trace.availability, dtype=np.int64)
    combos = all_combinations(n)
    counts = np.zeros((e, len(combos)))
    prevalence = np.zeros(len(combos))
    for c_idx, bits in enumerate(combos):
        rows = avail == bits
        prevalence[c_idx] = rows.sum() * n
        if rows.any():
            counts[:, c_idx] = sel[rows].sum(axis=(0, 1))
    weighted = np.zeros_like(counts)
    present = prevalence > 0
    for c_idx in np.flatnonzero(~present):
        log.info("combination %s absent from evaluation set; skipped", combo_label(combos[c_idx], labels))
    weighted[:, present] = counts[:, present] / prevalence[present]
    totals = weighted.sum(axis=1, keepdims=True)
    adjusted = np.divide(weighted, totals, out=np.zeros_like(weighted), where=totals > 0)

    n_events = b * n
    per_expert = sel.sum(axis=(0, 1)).astype(np.float64)
    frequency = per_expert / n_events
    if trace.strategy == "per-modality":
        router_entropy = []
        for i in range(n):
            c = sel[:, i, :].sum(axis=0).astype(np.float64)
            router_entropy.append(entropy(c / c.sum()))
    else:
        router_entropy = [entropy(per_expert / per_expert.sum())]
    return ActivationReport(
        tuple(labels), frequency, counts, adjusted, router_entropy, entropy(per_expert / per_expert.sum()), n_events
    )
