"""Modality encoders, the missing-modality bank and the self-attention fusion layer."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigurationError, ContractError, DimensionError

# ---------------------------------------------------------------- availability sets


def combo_index(bits: int) -> int:
    """Row/expert index of a nonempty availability bitmask."""
    return int(bits) - 1


def bits_of(indices) -> int:
    return sum(1 << int(i) for i in indices)


def members(bits: int, n: int) -> list[int]:
    return [i for i in range(n) if bits >> i & 1]


def combo_label(bits: int, labels) -> str:
    return "".join(labels[i] for i in members(bits, len(labels)))


def all_combinations(n: int) -> list[int]:
    """Nonempty bitmasks in index order (1 .. 2**n - 1)."""
    return list(range(1, 2**n))


def bank_keys(n: int) -> list[tuple[int, int]]:
    """All (missing modality, available set) pairs with nonempty available set."""
    keys = []
    for m in range(n):
        others = [i for i in range(n) if i != m]
        for r in range(1, len(others) + 1):
            for subset in itertools.combinations(others, r):
                keys.append((m, bits_of(subset)))
    return sorted(keys)


@dataclass
class Batch:
    """Array view of a group of subjects.

    ``features[i]`` is ``(n, D_i)``; rows of subjects missing modality ``i`` are
    ignored. ``availability`` holds bitmasks, ``baseline`` the raw baseline score.
    """

    features: list
    availability: np.ndarray
    baseline: np.ndarray
    target: np.ndarray | None = None

    def __len__(self):
        return len(self.availability)

    def subset(self, rows) -> "Batch":
        rows = np.asarray(rows, dtype=np.intp)
        return Batch(
            [f[rows] for f in self.features],
            self.availability[rows],
            self.baseline[rows],
            None if self.target is None else self.target[rows],
        )


# ---------------------------------------------------------------- layers


def _init_weight(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)


def _init_bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


class FeedForward:
    """Two linear maps with a nonlinearity in between."""

    def __init__(self, rng, d_in, d_hidden, d_out, activation=ad.relu):
        self.w1 = _init_weight(rng, d_in, d_hidden)
        self.b1 = _init_bias(d_hidden)
        self.w2 = _init_weight(rng, d_hidden, d_out)
        self.b2 = _init_bias(d_out)
        self.activation = activation

    def __call__(self, x):
        return ad.linear(self.activation(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class ModalityBank:
    """Learned stand-ins for missing modalities, keyed on (missing modality, available set)."""

    def __init__(self, rng, n_modalities, dim, std=0.02):
        self.n = n_modalities
        self.dim = dim
        self.entries = {
            key: Tensor(rng.normal(0.0, std, size=dim), requires_grad=True) for key in bank_keys(n_modalities)
        }

    def __len__(self):
        return len(self.entries)

    def lookup(self, missing: int, available: int) -> Tensor:
        if available >> missing & 1:
            raise ContractError(f"modality {missing} is present in available set {available:#b}")
        return self.entries[(missing, available)]

    def named_parameters(self):
        return {f"{m}:{p}": t for (m, p), t in self.entries.items()}


class EncoderStack:
    def __init__(self, rng, feature_dims, hidden, dim):
        self.feature_dims = tuple(feature_dims)
        self.encoders = [FeedForward(rng, d_in, hidden, dim, ad.relu) for d_in in self.feature_dims]

    def named_parameters(self):
        out = {}
        for i, enc in enumerate(self.encoders):
            out.update({f"{i}.{k}": v for k, v in enc.named_parameters().items()})
        return out


class AttentionLayer:
    """One multi-head self-attention block, post-norm residual, no positional encoding."""

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.wq, self.wk, self.wv, self.wo = (_init_weight(rng, dim, dim) for _ in range(4))
        self.bq, self.bk, self.bv, self.bo = (_init_bias(dim) for _ in range(4))
        self.ln_gain = Tensor(np.ones(dim), requires_grad=True)
        self.ln_bias = _init_bias(dim)
        self.last_weights = None

    def named_parameters(self):
        names = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "ln_gain", "ln_bias")
        return {n: getattr(self, n) for n in names}

    def _split(self, x, b, n):
        dh = self.dim // self.heads
        x = ad.reshape(x, (b, n, self.heads, dh))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * self.heads, n, dh))

    def __call__(self, tokens: Tensor) -> Tensor:
        """``tokens`` is ``(B, N, d)`` (or ``(N, d)``); returns the same shape."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = ad.reshape(tokens, (1,) + tokens.shape)
        b, n, d = tokens.shape
        if n < 1:
            raise ContractError("attention needs at least one token")
        if d != self.dim:
            raise DimensionError(f"attention expects model dim {self.dim}, got {d}")
        dh = d // self.heads
        q = self._split(ad.linear(tokens, self.wq, self.bq), b, n)
        k = self._split(ad.linear(tokens, self.wk, self.bk), b, n)
        v = self._split(ad.linear(tokens, self.wv, self.bv), b, n)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        weights = ad.softmax(scores)
        self.last_weights = weights.data.reshape(b, self.heads, n, n)
        mixed = ad.matmul(weights, v)
        mixed = ad.reshape(ad.transpose(ad.reshape(mixed, (b, self.heads, n, dh)), (0, 2, 1, 3)), (b, n, d))
        out = ad.layer_norm(ad.add(tokens, ad.linear(mixed, self.wo, self.bo)), self.ln_gain, self.ln_bias)
        if squeeze:
            out = ad.reshape(out, (n, d))
        return out


class ModalityFrontEnd:
    """Encoders + bank + attention: subjects in, per-modality embeddings ``(B, N, d)`` out."""

    def __init__(self, cfg: ModelConfig, rng):
        cfg.validate()
        self.cfg = cfg
        self.n = len(cfg.modalities)
        self.encoders = EncoderStack(rng, cfg.feature_dims, cfg.encoder_hidden, cfg.model_dim)
        self.bank = ModalityBank(rng, self.n, cfg.model_dim, cfg.bank_init_std)
        self.attention = AttentionLayer(rng, cfg.model_dim, cfg.heads)

    def named_parameters(self):
        out = {}
        for prefix, mod in (("encoder", self.encoders), ("bank", self.bank), ("attention", self.attention)):
            out.update({f"{prefix}.{k}": v for k, v in mod.named_parameters().items()})
        return out

    def encode(self, batch: Batch) -> Tensor:
        """Fill every modality slot: encoder output if observed, bank entry otherwise."""
        avail = np.asarray(batch.availability, dtype=np.int64)
        n_rows = len(avail)
        if n_rows == 0:
            raise ContractError("empty batch")
        if np.any(avail <= 0) or np.any(avail >= 2**self.n):
            raise ContractError("every subject needs a nonempty availability set")
        if len(batch.features) != self.n:
            raise DimensionError(f"expected {self.n} feature blocks, got {len(batch.features)}")
        slots = []
        for i in range(self.n):
            feats = np.asarray(batch.features[i], dtype=np.float64)
            if feats.ndim != 2 or feats.shape != (n_rows, self.cfg.feature_dims[i]):
                raise DimensionError(
                    f"modality {self.cfg.modalities[i]}: features {feats.shape}, "
                    f"expected ({n_rows}, {self.cfg.feature_dims[i]})"
                )
            observed = (avail >> i) & 1 == 1
            rows_for = np.empty(n_rows, dtype=np.intp)
            parts = []
            offset = 0
            obs_rows = np.flatnonzero(observed)
            if obs_rows.size:
                parts.append(self.encoders.encoders[i](Tensor(feats[obs_rows])))
                rows_for[obs_rows] = np.arange(obs_rows.size)
                offset = obs_rows.size
            for p in np.unique(avail[~observed]):
                vec = self.bank.lookup(i, int(p))
                parts.append(ad.reshape(vec, (1, self.cfg.model_dim)))
                rows_for[avail == p] = offset
                offset += 1
            table = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
            slots.append(ad.take_rows(table, rows_for))
        return ad.stack(slots, axis=1)

    def __call__(self, batch: Batch) -> Tensor:
        return self.attention(self.encode(batch))
