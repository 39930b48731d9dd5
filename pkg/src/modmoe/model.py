"""End-to-end fusion model: front end -> sparse MoE -> prediction head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .components import Batch, FeedForward, ModalityFrontEnd
from .config import ModelConfig, RoutingConfig
from .errors import ContractError
from .routing import RoutingTrace, SparseMoE, balancing_loss, specialization_loss
from .seeding import named_rng

CHECKPOINT_FORMAT_VERSION = 1
# Baseline scores live on [0, 18]; the head sees them rescaled to [0, 1].
BASELINE_SCALE = 18.0


@dataclass
class LossTerms:
    total: Tensor
    mse: float
    balancing: float
    specialization: float


class FusionModel:
    def __init__(self, model_cfg: ModelConfig | None = None, routing_cfg: RoutingConfig | None = None, seed: int = 0):
        self.model_cfg = model_cfg or ModelConfig()
        self.routing_cfg = routing_cfg or RoutingConfig()
        self.seed = seed
        n = len(self.model_cfg.modalities)
        d = self.model_cfg.model_dim
        self.front = ModalityFrontEnd(self.model_cfg, named_rng(seed, "init.frontend"))
        self.moe = SparseMoE(self.routing_cfg, n, d, named_rng(seed, "init.routers"), named_rng(seed, "init.experts"))
        self.head = FeedForward(named_rng(seed, "init.head"), n * d + 1, self.model_cfg.head_hidden, 1, ad.relu)

    @property
    def n_modalities(self):
        return len(self.model_cfg.modalities)

    def named_parameters(self) -> dict:
        out = {}
        for prefix, mod in (("front", self.front), ("moe", self.moe), ("head", self.head)):
            out.update({f"{prefix}.{k}": v for k, v in mod.named_parameters().items()})
        return out

    # -------------------------------------------------------------- forward

    def forward(self, batch: Batch):
        """Returns ``(predictions (B,), gate probabilities (B, N, E), trace)``."""
        h = self.front(batch)
        o, probs, trace = self.moe(h, batch.availability)
        bsz = len(batch)
        baseline = np.asarray(batch.baseline, dtype=np.float64).reshape(bsz, 1) / BASELINE_SCALE
        feats = ad.concat([ad.reshape(o, (bsz, self.n_modalities * self.model_cfg.model_dim)), Tensor(baseline)], axis=-1)
        pred = ad.reshape(self.head(feats), (bsz,))
        return pred, probs, trace

    def loss(self, batch: Batch, lambda_bal=0.01, lambda_spec=0.1) -> tuple[LossTerms, RoutingTrace]:
        if batch.target is None:
            raise ContractError("batch has no targets")
        pred, probs, trace = self.forward(batch)
        mse = ad.mse(pred, Tensor(np.asarray(batch.target, dtype=np.float64)))
        total = mse
        bal_val = spec_val = 0.0
        if lambda_bal:
            bal = balancing_loss(probs, self.routing_cfg.strategy)
            bal_val = bal.item()
            total = ad.add(total, ad.scale(bal, lambda_bal))
        if lambda_spec and self.routing_cfg.specialization:
            spec = specialization_loss(probs, batch.availability, self.routing_cfg.specialize_imputed)
            spec_val = spec.item()
            total = ad.add(total, ad.scale(spec, lambda_spec))
        return LossTerms(total, mse.item(), bal_val, spec_val), trace

    def predict(self, batch: Batch, batch_size=512, return_trace=False):
        preds, traces = [], []
        with ad.no_grad():
            for start in range(0, len(batch), batch_size):
                part = batch.subset(np.arange(start, min(start + batch_size, len(batch))))
                pred, _, trace = self.forward(part)
                preds.append(pred.data)
                traces.append(trace)
        out = np.concatenate(preds)
        if return_trace:
            return out, RoutingTrace.concat(traces)
        return out

    # -------------------------------------------------------------- state

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(f"{k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint: named arrays plus a JSON ``__meta__`` record."""
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "seed": self.seed,
            "model": _plain(dataclasses.asdict(self.model_cfg)),
            "routing": _plain(dataclasses.asdict(self.routing_cfg)),
            "shapes": {k: list(v.shape) for k, v in self.named_parameters().items()},
        }
        arrays = {k: v for k, v in self.state_dict().items()}
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "FusionModel":
        with np.load(Path(path), allow_pickle=False) as npz:
            meta = json.loads(str(npz["__meta__"]))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ContractError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
            state = {k: npz[k] for k in npz.files if k != "__meta__"}
        model_cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["model"].items()})
        routing_cfg = RoutingConfig(**meta["routing"])
        model = cls(model_cfg, routing_cfg, meta["seed"])
        model.load_state_dict(state)
        return model


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
