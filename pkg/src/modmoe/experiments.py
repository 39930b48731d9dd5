"""Shared-vs-per-modality routing comparison on a synthetic cohort."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analytics import ActivationReport, MetricsReport, activation_stats, tabulate
from .config import RunConfig
from .data import augment_withholding, generate, split_grouped
from .routing import RoutingTrace
from .training import SeedSummary, run_seeds

log = logging.getLogger(__name__)

STRATEGIES = ("shared", "per-modality")


@dataclass
class StrategyResult:
    strategy: str
    seeds: SeedSummary
    metrics: MetricsReport
    activation: ActivationReport
    seconds: float

    def singleton_rmse(self, n_modalities=4) -> list[float]:
        return [self.metrics.by_combination[1 << i].mean for i in range(n_modalities)]


def compare_strategies(cfg: RunConfig | None = None, strategies=STRATEGIES, out_dir=None) -> dict:
    """Train every seed under each routing strategy on one split and evaluate on the withheld-augmented test set.

    Returns ``{strategy: StrategyResult}``. Activation statistics pool the traces of all seeds.
    """
    cfg = (cfg or RunConfig()).validate()
    ds = generate(cfg.generator)
    train_set, val_set, test_set = split_grouped(ds, cfg.split, seed=cfg.split_seed)
    test = augment_withholding(test_set).to_batch()
    tr, va = train_set.to_batch(), val_set.to_batch()
    log.info("subjects: train %d, val %d, test %d (augmented)", len(tr), len(va), len(test))
    labels = tuple(cfg.model.modalities)
    results = {}
    for strategy in strategies:
        routing = dataclasses.replace(cfg.routing, strategy=strategy)
        start = time.perf_counter()
        hist_dir = None
        if out_dir is not None:
            hist_dir = Path(out_dir) / strategy
            hist_dir.mkdir(parents=True, exist_ok=True)
        summary = run_seeds(cfg.model, routing, cfg.train, tr, va, test, history_dir=hist_dir)
        ok = [o for o in summary.outcomes if o.error is None]
        if not ok:
            raise RuntimeError(f"every seed failed under {strategy} routing")
        metrics = tabulate(test.availability, test.target, [o.predictions for o in ok], labels)
        traces = [o.result.model.predict(test, return_trace=True)[1] for o in ok]
        activation = activation_stats(RoutingTrace.concat(traces), labels)
        results[strategy] = StrategyResult(strategy, summary, metrics, activation, time.perf_counter() - start)
        log.info("%s: test RMSE %.4f +- %.4f, entropy %.4f", strategy, summary.mean, summary.std,
                 activation.aggregate_entropy)
        if hist_dir is not None:
            metrics.write(hist_dir / "metrics.json", hist_dir / "metrics.csv")
            activation.write_csv(hist_dir / "activation.csv")
    return results


def singleton_wins(results: dict, n_modalities=4) -> int:
    """Singleton rows where per-modality mean RMSE is at most the shared mean."""
    per_mod = np.array(results["per-modality"].singleton_rmse(n_modalities))
    shared = np.array(results["shared"].singleton_rmse(n_modalities))
    return int(np.sum(per_mod <= shared))
