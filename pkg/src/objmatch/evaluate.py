"""Descriptor evaluation: best-match search, correct-object accuracy, normalized
error distance, and cross-domain 1-NN purity."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from objmatch.correspond import (
    Dataset,
    ImageRecord,
    NoSharedModelError,
    PairingType,
    PairSpec,
    SamplingConfig,
    sample_queries,
)
from objmatch.rng import derive_seed, seeded_rng
from objmatch.types import DescriptorMap, pixel_center

log = logging.getLogger(__name__)


def _values(desc) -> np.ndarray:
    return desc.values if isinstance(desc, DescriptorMap) else np.asarray(desc)


def distance_map(query: np.ndarray, target) -> np.ndarray:
    """Squared L2 distance from ``query`` to every pixel of ``target``, shape ``(H, W)``."""
    values = _values(target)
    query = np.asarray(query, values.dtype)
    if query.shape != (values.shape[2],):
        raise ValueError(f"query has shape {query.shape}, target dim is {values.shape[2]}")
    return np.sum((values - query) ** 2, axis=2, dtype=np.float64)


def best_match(query: np.ndarray, target) -> tuple[int, int]:
    """Pixel ``(col, row)`` of the nearest descriptor; ties go to the row-major first."""
    dist = distance_map(query, target)
    flat = int(np.argmin(dist))
    row, col = divmod(flat, dist.shape[1])
    return col, row


def best_matches(queries: np.ndarray, target, chunk: int = 256) -> np.ndarray:
    """Vectorized :func:`best_match` for ``(N, D)`` queries; returns ``(N, 2)`` ints."""
    values = _values(target).astype(np.float64)
    h, w, d = values.shape
    flat = values.reshape(-1, d)
    queries = np.asarray(queries, np.float64).reshape(-1, d)
    out = np.empty((len(queries), 2), np.int64)
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        dist = np.sum((flat[None, :, :] - q[:, None, :]) ** 2, axis=2)
        idx = np.argmin(dist, axis=1)
        out[start:start + chunk, 0] = idx % w
        out[start:start + chunk, 1] = idx // w
    return out


def normalized_error(predicted, truth, width: int, height: int) -> np.ndarray:
    diff = np.asarray(predicted, np.float64) - np.asarray(truth, np.float64)
    return np.linalg.norm(np.atleast_2d(diff), axis=1) / np.hypot(width, height)


# -- pair evaluation ----------------------------------------------------------------


@dataclass
class PairingStats:
    pairs: int = 0
    skipped: int = 0
    queries: int = 0
    correct: int = 0
    error_sum: float = 0.0
    correct_error_sum: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.correct / self.queries if self.queries else float("nan")

    @property
    def mean_error(self) -> float:
        return self.error_sum / self.queries if self.queries else float("nan")

    @property
    def mean_error_correct(self) -> float:
        return self.correct_error_sum / self.correct if self.correct else float("nan")

    def merge(self, other: "PairingStats") -> None:
        self.pairs += other.pairs
        self.skipped += other.skipped
        self.queries += other.queries
        self.correct += other.correct
        self.error_sum += other.error_sum
        self.correct_error_sum += other.correct_error_sum

    def to_json(self) -> dict:
        return {
            "object_match_accuracy": _finite(self.accuracy),
            "mean_normalized_error": _finite(self.mean_error),
            "mean_normalized_error_correct_only": _finite(self.mean_error_correct),
            "query_count": self.queries,
            "pair_count": self.pairs,
            "skipped_pairs": self.skipped,
        }


def _finite(x: float):
    return round(float(x), 10) if np.isfinite(x) else None


@dataclass
class EvalReport:
    rows: dict[str, PairingStats] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def row(self, pairing: PairingType | str) -> PairingStats:
        label = pairing.label if isinstance(pairing, PairingType) else pairing
        return self.rows.setdefault(label, PairingStats())

    def overall(self) -> PairingStats:
        total = PairingStats()
        for stats in self.rows.values():
            total.merge(stats)
        return total

    def to_json(self) -> dict:
        labels = [p.label for p in PairingType]
        ordered = sorted(self.rows, key=lambda k: labels.index(k) if k in labels else len(labels))
        return {
            "config": self.config,
            "pairing_types": {k: self.rows[k].to_json() for k in ordered},
            "overall": self.overall().to_json(),
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path


def evaluate_pair(desc_a, desc_b, rec_a: ImageRecord, rec_b: ImageRecord, n_queries: int,
                  rng: np.random.Generator, sampling: SamplingConfig = SamplingConfig()) -> PairingStats:
    stats = PairingStats(pairs=1)
    queries = sample_queries(rec_a, rec_b, n_queries, rng, sampling)
    if len(queries) == 0:
        return PairingStats(skipped=1)
    va, vb = _values(desc_a), _values(desc_b)
    idx = np.floor(queries.pixels_a).astype(np.int64)
    predicted = best_matches(va[idx[:, 1], idx[:, 0]], vb)
    model_of = rec_b.annotation.model_of()
    mask_b = rec_b.image.mask
    hit_ids = mask_b[predicted[:, 1], predicted[:, 0]]
    correct = np.array([hit >= 0 and model_of[int(hit)] == m for hit, m in zip(hit_ids, queries.models)])
    # distance to the nearest true location among the matched instances
    centers = pixel_center(predicted)
    dist = np.linalg.norm(queries.truth_b - centers[:, None, :], axis=2)
    err = np.nanmin(dist, axis=1) / np.hypot(rec_b.camera.width, rec_b.camera.height)
    stats.queries = len(queries)
    stats.correct = int(correct.sum())
    stats.error_sum = float(err.sum())
    stats.correct_error_sum = float(err[correct].sum())
    return stats


def evaluate_pairs(net, dataset: Dataset, pairs: Iterable[PairSpec], n_queries: int = 1000,
                   seed: int = 0, sampling: SamplingConfig = SamplingConfig(),
                   config_echo: dict | None = None) -> EvalReport:
    """Evaluate ``net`` on each pair; queries for pair ``k`` depend only on ``(seed, k)``."""
    report = EvalReport(config=dict(config_echo or {}))
    cache: dict[tuple[str, str], np.ndarray] = {}

    def describe(rec: ImageRecord) -> np.ndarray:
        key = (rec.scene.scene_id, rec.annotation.image_id)
        if key not in cache:
            cache[key] = net.describe(rec.image).values
        return cache[key]

    for k, spec in enumerate(pairs):
        rec_a, rec_b = dataset.records(spec)
        if not rec_a.model_ids & rec_b.model_ids:
            report.row(spec.pairing_type).skipped += 1
            continue
        rng = seeded_rng(derive_seed(seed, "queries", k))
        report.row(spec.pairing_type).merge(
            evaluate_pair(describe(rec_a), describe(rec_b), rec_a, rec_b, n_queries, rng, sampling))
    return report


def held_out_pairs(dataset: Dataset, n_pairs: int, pairing: PairingType, seed: int,
                   same_scene_prob: float = 0.3) -> list[PairSpec]:
    """Deterministic evaluation pairs of one pairing type that share at least one model."""
    from objmatch.correspond import sample_pair_spec

    out = []
    for k in range(n_pairs):
        rng = seeded_rng(derive_seed(seed, "eval-pair", k))
        for _ in range(20):
            spec = sample_pair_spec(dataset, rng, (pairing,), same_scene_prob)
            rec_a, rec_b = dataset.records(spec)
            if rec_a.model_ids & rec_b.model_ids:
                out.append(spec)
                break
        else:
            raise NoSharedModelError(f"no evaluation pair with a shared model at index {k}")
    return out


# -- cross-domain consistency -------------------------------------------------------


@dataclass
class ConsistencyResult:
    purity: float
    per_model: dict[str, float]
    excluded: list[str]
    degenerate: bool
    samples: int


def sample_object_descriptors(desc, rec: ImageRecord, n: int, rng: np.random.Generator):
    """Up to ``n`` object-pixel descriptors with their model labels."""
    values = _values(desc)
    mask = rec.image.mask
    rows, cols = np.nonzero(mask >= 0)
    if len(rows) == 0:
        return np.zeros((0, values.shape[2])), []
    pick = rng.choice(len(rows), size=min(n, len(rows)), replace=False)
    pick.sort()
    model_of = rec.annotation.model_of()
    labels = [model_of[int(mask[rows[i], cols[i]])] for i in pick]
    return values[rows[pick], cols[pick]].astype(np.float64), labels


def nearest_labels(bank: np.ndarray, bank_labels: Sequence, queries: np.ndarray, chunk: int = 512) -> list:
    out = []
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        dist = np.sum((q[:, None, :] - bank[None, :, :]) ** 2, axis=2)
        out += [bank_labels[i] for i in np.argmin(dist, axis=1)]
    return out


def consistency_from_banks(sim_desc: np.ndarray, sim_labels: Sequence, real_desc: np.ndarray,
                            real_labels: Sequence) -> ConsistencyResult:
    sim_models, real_models = set(sim_labels), set(real_labels)
    shared = sim_models & real_models
    excluded = sorted(sim_models ^ real_models)
    if excluded:
        log.warning("models absent from one domain are excluded: %s", ", ".join(excluded))
    keep_sim = np.array([lab in shared for lab in sim_labels], bool)
    keep_real = np.array([lab in shared for lab in real_labels], bool)
    if not keep_sim.any() or not keep_real.any():
        raise ValueError("no model appears in both domains")
    bank = np.asarray(sim_desc)[keep_sim]
    bank_labels = [lab for lab, k in zip(sim_labels, keep_sim) if k]
    queries = np.asarray(real_desc)[keep_real]
    truth = [lab for lab, k in zip(real_labels, keep_real) if k]
    predicted = nearest_labels(bank, bank_labels, queries)
    hits = np.array([p == t for p, t in zip(predicted, truth)])
    per_model = {m: float(hits[[t == m for t in truth]].mean()) for m in sorted(shared)}
    degenerate = len(shared) < 2
    if degenerate:
        log.warning("only one model in both domains; purity is trivially 1")
    return ConsistencyResult(float(hits.mean()), per_model, excluded, degenerate, len(truth))


def cross_domain_consistency(net, sim_records: Sequence[ImageRecord], real_records: Sequence[ImageRecord],
                             samples_per_image: int = 200, seed: int = 0) -> ConsistencyResult:
    """1-NN model-id purity of pseudo-real descriptors against a sim descriptor bank."""
    banks = []
    for domain, records in (("sim", sim_records), ("real", real_records)):
        descs, labels = [], []
        for k, rec in enumerate(records):
            rng = seeded_rng(derive_seed(seed, "consistency", domain, k))
            d, lab = sample_object_descriptors(net.describe(rec.image), rec, samples_per_image, rng)
            descs.append(d)
            labels += lab
        banks.append((np.concatenate(descs), labels))
    return consistency_from_banks(banks[0][0], banks[0][1], banks[1][0], banks[1][1])
