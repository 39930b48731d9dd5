"""Synthetic multimodal cohorts, participant-grouped splits, modality withholding and file I/O."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .components import Batch, bits_of, combo_label, members
from .config import GeneratorConfig
from .errors import ContractError, ParseError
from .seeding import named_rng

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BINARY_MAGIC = b"MMDS\x01\n"
SCORE_MIN, SCORE_MAX = 0.0, 18.0


@dataclass
class SubjectRecord:
    subject_id: str
    participant_id: str
    features: dict
    availability: int
    baseline_score: float
    target_delta: float

    def validate(self, modalities, feature_dims):
        expected = bits_of(modalities.index(m) for m in self.features)
        if expected != self.availability:
            raise ContractError(
                f"{self.subject_id}: availability {self.availability:#b} does not match features {sorted(self.features)}"
            )
        if self.availability == 0:
            raise ContractError(f"{self.subject_id}: no observed modality")
        for m, vec in self.features.items():
            d = feature_dims[modalities.index(m)]
            if len(vec) != d:
                raise ContractError(f"{self.subject_id}: modality {m} has {len(vec)} features, expected {d}")
        if not SCORE_MIN <= self.baseline_score <= SCORE_MAX:
            raise ContractError(f"{self.subject_id}: baseline score {self.baseline_score} outside [0, 18]")


@dataclass
class Dataset:
    modalities: tuple
    feature_dims: tuple
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def with_records(self, records) -> "Dataset":
        return Dataset(self.modalities, self.feature_dims, list(records))

    @property
    def availability(self) -> np.ndarray:
        return np.array([r.availability for r in self.records], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([r.target_delta for r in self.records], dtype=np.float64)

    def to_batch(self) -> Batch:
        n = len(self.records)
        feats = [np.zeros((n, d)) for d in self.feature_dims]
        for row, rec in enumerate(self.records):
            for m, vec in rec.features.items():
                feats[self.modalities.index(m)][row] = vec
        return Batch(
            feats,
            self.availability,
            np.array([r.baseline_score for r in self.records], dtype=np.float64),
            self.targets,
        )


# ---------------------------------------------------------------- generation


class SyntheticGenerator:
    """Latent-factor cohort simulator.

    ``shared-latent``: every modality is a noisy linear view of one latent vector
    and the target is a linear function of it.

    ``modality-specialized``: each modality sees the shared latent plus its own
    private block, and the target adds a modality-specific nonlinear term per
    private block. What can be predicted, and how, then depends on which
    modalities are present.
    """

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        self.cfg = cfg
        self.n = len(cfg.modalities)
        rng = named_rng(cfg.seed, "generator.params")
        L, P = cfg.latent_dim, cfg.private_dim
        specialized = cfg.mode == "modality-specialized"
        in_dim = L + P if specialized else L
        self.loadings = [rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(d, in_dim)) for d in cfg.feature_dims]
        self.shared_map = rng.normal(0.0, 1.5 / np.sqrt(L), size=(L, L))
        self.shared_coef = rng.normal(0.0, 1.0, size=L) / np.sqrt(L)
        self.private_maps = [rng.normal(0.0, 1.5 / np.sqrt(P), size=(P, P)) for _ in range(self.n)]
        self.private_coef = [rng.normal(0.0, 1.0, size=P) / np.sqrt(P) for _ in range(self.n)]
        self.private_shift = [rng.normal(0.0, 0.5, size=P) for _ in range(self.n)]

    def latent_size(self):
        return self.cfg.latent_dim + (self.n * self.cfg.private_dim if self.cfg.mode == "modality-specialized" else 0)

    def modality_latent(self, z, i):
        L, P = self.cfg.latent_dim, self.cfg.private_dim
        if self.cfg.mode == "shared-latent":
            return z[..., :L]
        return np.concatenate([z[..., :L], z[..., L + i * P : L + (i + 1) * P]], axis=-1)

    def features(self, z, i):
        return self.modality_latent(z, i) @ self.loadings[i].T

    def signal(self, z, baseline):
        """Noise-free target before quantisation."""
        L, P = self.cfg.latent_dim, self.cfg.private_dim
        shared = z[..., :L]
        if self.cfg.mode == "shared-latent":
            y = self.cfg.shared_scale * (shared @ self.shared_coef)
        else:
            y = self.cfg.shared_scale * (np.tanh(shared @ self.shared_map.T) @ self.shared_coef)
            for i in range(self.n):
                p = z[..., L + i * P : L + (i + 1) * P]
                y = y + self.cfg.private_scale * (np.tanh(p @ self.private_maps[i].T + self.private_shift[i]) @ self.private_coef[i])
        return 1.0 + y + 0.15 * (baseline - 4.0)

    def quantize(self, y):
        q = self.cfg.quantum
        return np.round(y / q) * q if q else y

    def generate(self) -> Dataset:
        cfg = self.cfg
        rng = named_rng(cfg.seed, "generator.draws")
        weights = np.asarray(cfg.pattern_weights, dtype=np.float64)
        weights = weights / weights.sum()
        spp = np.asarray(cfg.subjects_per_participant, dtype=np.float64)
        records = []
        dim = self.latent_size()
        for p in range(cfg.participants):
            z_part = rng.normal(size=dim)
            base_part = 1.0 + 17.0 * rng.beta(1.5, 6.0)
            for j in range(int(rng.choice(len(spp), p=spp / spp.sum())) + 1):
                z = z_part + cfg.drift * rng.normal(size=dim)
                baseline = float(np.clip(np.round((base_part + rng.normal(0.0, 0.5)) * 2) / 2, 1.5, SCORE_MAX))
                avail = int(rng.choice(len(weights), p=weights)) + 1
                noise = [rng.normal(size=d) for d in cfg.feature_dims]
                eta = rng.normal()
                feats = {}
                for i in members(avail, self.n):
                    feats[cfg.modalities[i]] = self.features(z, i) + cfg.noise_scale * noise[i]
                target = float(self.quantize(self.signal(z, baseline) + cfg.noise_scale * eta))
                records.append(
                    SubjectRecord(f"s{len(records):05d}", f"p{p:04d}", feats, avail, baseline, target)
                )
        return Dataset(tuple(cfg.modalities), tuple(cfg.feature_dims), records)

    def recover_latent(self, record: SubjectRecord) -> np.ndarray:
        """Least-squares latent from a fully observed noiseless record."""
        L, P = self.cfg.latent_dim, self.cfg.private_dim
        z = np.zeros(self.latent_size())
        for i, m in enumerate(self.cfg.modalities):
            part = np.linalg.lstsq(self.loadings[i], np.asarray(record.features[m]), rcond=None)[0]
            z[:L] = part[:L]
            if self.cfg.mode == "modality-specialized":
                z[L + i * P : L + (i + 1) * P] = part[L:]
        return z


def generate(cfg: GeneratorConfig | None = None) -> Dataset:
    return SyntheticGenerator(cfg or GeneratorConfig()).generate()


# ---------------------------------------------------------------- splitting & augmentation


def split_grouped(dataset: Dataset, fractions=(0.70, 0.15, 0.15), seed=0, tolerance=0.05):
    """Partition by participant so no participant spans two splits.

    Participants are visited in a seeded random order and each is assigned to the
    split with the largest remaining shortfall against its target subject count.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ContractError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    groups: dict[str, list] = {}
    for rec in dataset.records:
        groups.setdefault(rec.participant_id, []).append(rec)
    if len(groups) < 3:
        raise ContractError(f"need at least 3 participants to split, got {len(groups)}")
    order = list(groups)
    named_rng(seed, "split").shuffle(order)
    targets = fractions * len(dataset)
    counts = np.zeros(3)
    parts = [[], [], []]
    for pid in order:
        s = int(np.argmax(targets - counts))
        parts[s].append(pid)
        counts[s] += len(groups[pid])
    realized = counts / max(len(dataset), 1)
    if np.any(np.abs(realized - fractions) > tolerance):
        log.warning("split fractions %s deviate from targets %s by more than %.2f", realized.round(3), fractions, tolerance)
    out = []
    for pids in parts:
        keep = set(pids)
        out.append(dataset.with_records(r for r in dataset.records if r.participant_id in keep))
    return tuple(out)


WITHHOLD_SEP = "~w"


def derived_parent(subject_id: str) -> str | None:
    """Parent id of a withholding-derived subject, or None for an original one."""
    return subject_id.split(WITHHOLD_SEP)[0] if WITHHOLD_SEP in subject_id else None


def augment_withholding(test: Dataset) -> Dataset:
    """Append one single-modality copy per observed modality of every multi-modality subject.

    Derived ids are ``<parent>~w<withheld labels>``; score and target are inherited.
    """
    n = len(test.modalities)
    derived = []
    for rec in test.records:
        present = members(rec.availability, n)
        if len(present) < 2:
            continue
        for i in present:
            withheld = rec.availability & ~(1 << i)
            label = test.modalities[i]
            derived.append(
                SubjectRecord(
                    f"{rec.subject_id}{WITHHOLD_SEP}{combo_label(withheld, test.modalities)}",
                    rec.participant_id,
                    {label: np.array(rec.features[label], dtype=np.float64, copy=True)},
                    1 << i,
                    rec.baseline_score,
                    rec.target_delta,
                )
            )
    return test.with_records(list(test.records) + derived)


# ---------------------------------------------------------------- file formats


def _header(ds: Dataset) -> dict:
    return {"format_version": FORMAT_VERSION, "modalities": list(ds.modalities), "feature_dims": list(ds.feature_dims)}


def _record_to_json(rec: SubjectRecord) -> dict:
    return {
        "subject_id": rec.subject_id,
        "participant_id": rec.participant_id,
        "features": {m: [float(x) for x in v] for m, v in rec.features.items()},
        "availability": int(rec.availability),
        "baseline_score": float(rec.baseline_score),
        "target_delta": float(rec.target_delta),
    }


def write_jsonl(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header(ds)) + "\n")
        for rec in ds.records:
            fh.write(json.dumps(_record_to_json(rec)) + "\n")


def _check_header(header, path, line):
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise ParseError(path, line, "missing or unsupported format header")
    try:
        return tuple(header["modalities"]), tuple(int(d) for d in header["feature_dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, line, f"bad header: {exc}") from exc


_FIELDS = ("subject_id", "participant_id", "features", "availability", "baseline_score", "target_delta")


def _record_from_json(obj, modalities, dims, path, line) -> SubjectRecord:
    if not isinstance(obj, dict) or set(obj) != set(_FIELDS):
        raise ParseError(path, line, f"record must have exactly the fields {list(_FIELDS)}")
    try:
        feats = {m: np.asarray(v, dtype=np.float64) for m, v in obj["features"].items()}
        rec = SubjectRecord(
            str(obj["subject_id"]),
            str(obj["participant_id"]),
            feats,
            int(obj["availability"]),
            float(obj["baseline_score"]),
            float(obj["target_delta"]),
        )
        unknown = set(feats) - set(modalities)
        if unknown:
            raise ContractError(f"unknown modalities {sorted(unknown)}")
        rec.validate(modalities, dims)
    except (ContractError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(path, line, str(exc)) from exc
    return rec


def read_jsonl(path) -> Dataset:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty file")
    try:
        modalities, dims = _check_header(json.loads(lines[0]), path, 1)
    except json.JSONDecodeError as exc:
        raise ParseError(path, 1, f"invalid JSON: {exc.msg}") from exc
    records = []
    for no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(path, no, f"invalid JSON: {exc.msg}") from exc
        records.append(_record_from_json(obj, modalities, dims, path, no))
    return Dataset(modalities, dims, records)


def write_binary(ds: Dataset, path) -> None:
    """Length-prefixed binary: magic, header, then per record ``u32 meta_len, meta JSON, float64 features``."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        head = json.dumps(_header(ds)).encode("utf-8")
        fh.write(struct.pack("<I", len(head)) + head)
        for rec in ds.records:
            meta = _record_to_json(rec)
            meta["features"] = [m for m in ds.modalities if m in rec.features]
            blob = json.dumps(meta).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)) + blob)
            for m in meta["features"]:
                fh.write(np.asarray(rec.features[m], dtype="<f8").tobytes())


def read_binary(path) -> Dataset:
    path = str(path)
    raw = Path(path).read_bytes()
    if not raw.startswith(BINARY_MAGIC):
        raise ParseError(path, 0, "not a binary dataset file")
    pos = len(BINARY_MAGIC)

    def take(n, rec_no):
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(path, rec_no, "truncated file")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4, 0))
    modalities, dims = _check_header(json.loads(take(hlen, 0)), path, 0)
    records = []
    rec_no = 0
    while pos < len(raw):
        rec_no += 1
        (mlen,) = struct.unpack("<I", take(4, rec_no))
        meta = json.loads(take(mlen, rec_no))
        feats = {}
        for m in meta["features"]:
            d = dims[modalities.index(m)]
            feats[m] = np.frombuffer(take(8 * d, rec_no), dtype="<f8").astype(np.float64)
        meta["features"] = {m: v for m, v in feats.items()}
        records.append(_record_from_json(meta, modalities, dims, path, rec_no))
    return Dataset(modalities, dims, records)


def save_dataset(ds: Dataset, path, binary=False) -> None:
    (write_binary if binary else write_jsonl)(ds, path)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
    return read_binary(path) if magic == BINARY_MAGIC else read_jsonl(path)
