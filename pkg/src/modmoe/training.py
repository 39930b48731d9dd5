"""Adam training loop with early stopping, and multi-seed runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analytics import rmse
from .components import Batch
from .config import ModelConfig, RoutingConfig, TrainConfig
from .errors import ContractError, TrainingError
from .model import FusionModel
from .seeding import named_rng

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam. Parameters whose ``grad`` is None this step are left untouched."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clip(self, max_norm):
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if max_norm is not None and norm > max_norm:
            factor = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_mse: float
    bal_loss: float
    spec_loss: float
    val_rmse: float

    def to_json(self):
        return json.dumps(self.__dict__)


@dataclass
class TrainResult:
    model: FusionModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = math.inf


def _check_finite(value, name, epoch, batch_no):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} loss ({value}) at epoch {epoch}, batch {batch_no}")


def evaluate_rmse(model: FusionModel, batch: Batch) -> float:
    return rmse(model.predict(batch), batch.target)


def train(model: FusionModel, train_set: Batch, val_set: Batch, cfg: TrainConfig, seed=0, history_path=None, on_epoch=None):
    """Fit ``model`` in place and restore the best-validation snapshot.

    ``on_epoch(epoch, model)`` is called once before training (epoch 0) and after
    each epoch, for instrumentation.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation sets must be nonempty")
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    shuffle_rng = named_rng(seed, "train.shuffle")
    result = TrainResult(model)
    best_state = model.state_dict()
    result.best_val_rmse = evaluate_rmse(model, val_set)
    stale = 0
    if on_epoch:
        on_epoch(0, model)
    sink = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = shuffle_rng.permutation(len(train_set))
            sums = np.zeros(4)
            seen = 0
            for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
                rows = order[start : start + cfg.batch_size]
                batch = train_set.subset(rows)
                terms, _ = model.loss(batch, cfg.lambda_bal, cfg.lambda_spec)
                for name, val in (("mse", terms.mse), ("balancing", terms.balancing), ("specialization", terms.specialization)):
                    _check_finite(val, name, epoch, batch_no)
                _check_finite(terms.total.item(), "total", epoch, batch_no)
                opt.zero_grad()
                terms.total.backward()
                opt.clip(cfg.clip_norm)
                opt.step()
                sums += len(rows) * np.array([terms.total.item(), terms.mse, terms.balancing, terms.specialization])
                seen += len(rows)
            val = evaluate_rmse(model, val_set)
            rec = EpochRecord(epoch, *(sums / seen), val)
            result.history.append(rec)
            if sink:
                sink.write(rec.to_json() + "\n")
            log.debug("epoch %d loss %.4f val_rmse %.4f", epoch, rec.train_loss, val)
            if on_epoch:
                on_epoch(epoch, model)
            if val < result.best_val_rmse:
                result.best_val_rmse = val
                result.best_epoch = epoch
                best_state = model.state_dict()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if sink:
            sink.close()
    model.load_state_dict(best_state)
    return result


@dataclass
class SeedOutcome:
    seed: int
    result: TrainResult | None
    predictions: np.ndarray | None
    test_rmse: float
    error: str | None = None


@dataclass
class SeedSummary:
    outcomes: list
    mean: float
    std: float
    failures: list


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_seeds(
    model_cfg: ModelConfig,
    routing_cfg: RoutingConfig,
    train_cfg: TrainConfig,
    train_set: Batch,
    val_set: Batch,
    test_set: Batch,
    history_dir=None,
) -> SeedSummary:
    """Train and test one model per seed; a failing seed is recorded and skipped."""
    outcomes, failures = [], []
    for seed in train_cfg.seeds:
        try:
            model = FusionModel(model_cfg, routing_cfg, seed=seed)
            hist = None if history_dir is None else f"{history_dir}/history_seed{seed}.jsonl"
            res = train(model, train_set, val_set, train_cfg, seed=seed, history_path=hist)
            preds = model.predict(test_set)
            outcomes.append(SeedOutcome(seed, res, preds, rmse(preds, test_set.target)))
        except (TrainingError, FloatingPointError) as exc:
            log.error("seed %s failed: %s", seed, exc)
            failures.append(seed)
            outcomes.append(SeedOutcome(seed, None, None, math.nan, str(exc)))
    ok = [o.test_rmse for o in outcomes if o.error is None]
    mean, std = summarize(ok) if ok else (math.nan, math.nan)
    return SeedSummary(outcomes, mean, std, failures)
