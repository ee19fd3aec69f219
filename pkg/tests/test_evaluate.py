from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from objmatch.correspond import Dataset, PairingType, PairSampler, PairSpec, SamplingConfig, sample_queries
from objmatch.descriptor import DescriptorNet, DescriptorNetConfig, replay, train
from objmatch.evaluate import (
    EvalReport,
    PairingStats,
    best_match,
    best_matches,
    consistency_from_banks,
    cross_domain_consistency,
    distance_map,
    evaluate_pair,
    evaluate_pairs,
    held_out_pairs,
    normalized_error,
)
from objmatch.experiment import dataset_stats
from objmatch.rng import derive_seed, seeded_rng
from objmatch.types import DescriptorMap, DomainTag
from scenes import card_scene


def scan_best_match(query, values):
    """Independent exhaustive scan: strict improvement keeps the row-major first minimum."""
    best, where = np.inf, None
    for r in range(values.shape[0]):
        for c in range(values.shape[1]):
            d = float(sum((float(values[r, c, k]) - float(query[k])) ** 2 for k in range(values.shape[2])))
            if d < best:
                best, where = d, (c, r)
    return where


# -- best match ---------------------------------------------------------------------


def test_exact_hit():
    values = np.full((8, 9, 3), 5.0)
    values[3, 6] = [0.1, 0.2, 0.3]
    assert best_match(np.array([0.1, 0.2, 0.3]), DescriptorMap(values)) == (6, 3)


def test_constant_map_breaks_ties_to_origin():
    assert best_match(np.ones(3), np.zeros((6, 6, 3))) == (0, 0)
    assert best_matches(np.ones((4, 3)), np.zeros((6, 6, 3))).tolist() == [[0, 0]] * 4


def test_row_major_tie_break():
    values = np.ones((5, 5, 2))
    values[2, 4] = values[3, 1] = 0
    assert best_match(np.zeros(2), values) == (4, 2)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        distance_map(np.zeros(2), np.zeros((4, 4, 3)))


def test_brute_force_oracle_100_queries():
    rng = seeded_rng(0)
    values = rng.standard_normal((32, 32, 3))
    queries = rng.standard_normal((100, 3))
    vectorized = best_matches(queries, values)
    for q, v in zip(queries, vectorized):
        expected = scan_best_match(q, values)
        assert best_match(q, values) == expected
        assert tuple(v) == expected


# -- metrics --------------------------------------------------------------------------


def test_ratio_accuracy():
    assert PairingStats(queries=1000, correct=800).accuracy == 0.8


def test_error_arithmetic():
    assert normalized_error([13, 14], [10, 10], 64, 64)[0] == pytest.approx(5 / np.sqrt(8192), abs=1e-12)
    assert normalized_error([13, 14], [10, 10], 64, 64)[0] == pytest.approx(0.05524, abs=1e-5)


def test_zero_error_when_prediction_is_truth():
    pts = seeded_rng(1).uniform(0, 64, (50, 2))
    assert not normalized_error(pts, pts, 64, 64).any()


@given(st.lists(st.floats(0, 64), min_size=4, max_size=4))
@settings(max_examples=200, deadline=None)
def test_error_in_unit_interval(xs):
    e = normalized_error(xs[:2], xs[2:], 64, 64)[0]
    assert 0.0 <= e <= 1.0


def test_empty_stats_are_not_numbers():
    doc = PairingStats().to_json()
    assert doc["object_match_accuracy"] is None and doc["query_count"] == 0


# -- constructed one-hot scene ----------------------------------------------------------------


LAYOUT = [
    [("a", 14.3, 20.0, 0.6), ("b", 44.0, 40.5, 0.55), ("c", 30.0, 50.0, 0.7)],
    [("b", 16.0, 15.0, 0.5), ("a", 45.2, 30.7, 0.65), ("c", 20.0, 48.0, 0.6), ("a", 50.0, 52.0, 0.7)],
    [("d", 30.0, 30.0, 0.5)],
]
CODES = {"a": [1.0, 0, 0], "b": [0, 1.0, 0], "c": [0, 0, 1.0], "d": [1.0, 1.0, 1.0]}


def one_hot(rec):
    model_of = rec.annotation.model_of()
    values = np.full(rec.image.mask.shape + (3,), -1.0)
    for inst, model in model_of.items():
        values[rec.image.mask == inst] = CODES[model]
    return values


class OneHotNet:
    def __init__(self, dataset):
        self.dataset = dataset

    def describe(self, image):
        return DescriptorMap(one_hot(self.dataset.record(image.scene_id, image.image_id)))


@pytest.fixture(scope="module")
def cards():
    return Dataset([card_scene(LAYOUT)])


def first_pixel_oracle(rec_b, model, truth):
    """Row-major-first pixel of ``model`` in B; distance from its center to the nearest truth."""
    model_of = rec_b.annotation.model_of()
    mask = rec_b.image.mask
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if mask[r, c] >= 0 and model_of[int(mask[r, c])] == model:
                d = np.hypot(truth[:, 0] - (c + 0.5), truth[:, 1] - (r + 0.5))
                return np.nanmin(d) / np.hypot(64, 64)
    raise AssertionError("model not visible in B")


def test_one_hot_descriptors_are_perfect_with_oracle_error(cards):
    rec_a, rec_b = cards.record("cards", "000"), cards.record("cards", "001")
    stats_ = evaluate_pair(one_hot(rec_a), one_hot(rec_b), rec_a, rec_b, 300, seeded_rng(5))
    assert stats_.queries == 300 and stats_.accuracy == 1.0
    queries = sample_queries(rec_a, rec_b, 300, seeded_rng(5))
    expected = np.mean([first_pixel_oracle(rec_b, m, t) for m, t in zip(queries.models, queries.truth_b)])
    assert stats_.mean_error == pytest.approx(expected, abs=1e-12)
    assert stats_.mean_error_correct == pytest.approx(expected, abs=1e-12)


def test_pairs_without_shared_models_are_skipped(cards):
    specs = [PairSpec(PairingType.SIM_SIM, "cards", "000", "cards", "001", True),
             PairSpec(PairingType.SIM_SIM, "cards", "000", "cards", "002", True)]
    report = evaluate_pairs(OneHotNet(cards), cards, specs, n_queries=50, config_echo={"dim": 3})
    row = report.row(PairingType.SIM_SIM)
    assert (row.pairs, row.skipped, row.queries, row.accuracy) == (1, 1, 50, 1.0)
    doc = report.to_json()
    assert doc["config"] == {"dim": 3}
    assert set(doc["pairing_types"]["Sim-Sim"]) == {
        "object_match_accuracy", "mean_normalized_error", "mean_normalized_error_correct_only",
        "query_count", "pair_count", "skipped_pairs"}


def test_aggregation_is_order_independent(cards):
    specs = [PairSpec(PairingType.SIM_SIM, "cards", a, "cards", b, True) for a, b in
             (("000", "001"), ("001", "000"), ("000", "000"), ("001", "001"))]
    net = OneHotNet(cards)
    first = evaluate_pairs(net, cards, specs, n_queries=40)
    a = first.row(PairingType.SIM_SIM)
    total = PairingStats()
    for k, spec in enumerate(specs):
        rec_a, rec_b = cards.records(spec)
        part = evaluate_pair(one_hot(rec_a), one_hot(rec_b), rec_a, rec_b, 40, seeded_rng(derive_seed(0, "queries", k)))
        total.merge(part)
    assert (a.queries, a.correct) == (total.queries, total.correct)
    assert a.error_sum == pytest.approx(total.error_sum, rel=1e-12)


def test_report_write(tmp_path, cards):
    report = EvalReport(config={"input_mode": "rgbd"})
    report.row(PairingType.SIM_REAL).merge(PairingStats(pairs=1, queries=4, correct=3, error_sum=0.2))
    doc = json.loads(report.write(tmp_path / "r.json").read_text())
    assert doc["pairing_types"]["Sim-Real"]["object_match_accuracy"] == 0.75
    assert doc["overall"]["query_count"] == 4


# -- cross-domain consistency -------------------------------------------------------------------


def test_identical_banks_give_purity_one():
    rng = seeded_rng(2)
    desc = rng.standard_normal((500, 3))
    labels = [f"m{i % 5}" for i in range(500)]
    result = consistency_from_banks(desc, labels, desc, labels)
    assert result.purity == 1.0 and not result.degenerate


def test_random_descriptors_give_chance_purity():
    rng = seeded_rng(3)
    k, n = 5, 5000
    labels = lambda: [f"m{i}" for i in rng.integers(0, k, n)]  # noqa: E731
    result = consistency_from_banks(rng.standard_normal((n, 3)), labels(), rng.standard_normal((n, 3)), labels())
    # binomial standard error at p=0.2, n=5000 is about 0.0057
    assert abs(result.purity - 1 / k) < 0.025


def test_single_model_is_flagged(caplog):
    rng = seeded_rng(4)
    with caplog.at_level(logging.WARNING):
        result = consistency_from_banks(rng.standard_normal((50, 3)), ["m"] * 50, rng.standard_normal((40, 3)), ["m"] * 40)
    assert result.purity == 1.0 and result.degenerate and "trivially" in caplog.text


def test_model_missing_from_one_domain_is_excluded(caplog):
    desc = np.eye(3)
    with caplog.at_level(logging.WARNING):
        result = consistency_from_banks(desc, ["a", "b", "z"], desc, ["a", "b", "y"])
    assert result.excluded == ["y", "z"] and result.samples == 2 and result.purity == 1.0


def test_cross_domain_consistency_runs_on_records(small_dataset):
    sim = [small_dataset.record(small_dataset.by_domain[DomainTag.SIM][0], "000")]
    real = [small_dataset.record(small_dataset.by_domain[DomainTag.PSEUDO_REAL][0], "000")]
    net = DescriptorNet(DescriptorNetConfig(dim=3))
    a = cross_domain_consistency(net, sim, real, samples_per_image=100)
    b = cross_domain_consistency(net, sim, real, samples_per_image=100)
    assert a == b and 0.0 <= a.purity <= 1.0


# -- monotone sanity under weight corruption ----------------------------------------------------


@pytest.fixture(scope="module")
def trained_small(small_scenes):
    dataset = Dataset(small_scenes)
    net = DescriptorNet(DescriptorNetConfig(dim=3, hidden=(16, 16)), dataset_stats(dataset, "rgbd"))
    pairs = list(PairSampler(dataset, SamplingConfig(), seed=0).records(100))
    return dataset, train(net, dataset, replay(pairs), 400).net


def per_pair_accuracy(net, dataset, specs, n_queries=100):
    out = []
    for k, spec in enumerate(specs):
        rec_a, rec_b = dataset.records(spec)
        s = evaluate_pair(net.describe(rec_a.image), net.describe(rec_b.image), rec_a, rec_b, n_queries,
                          seeded_rng(1000 + k))
        out.append(s.accuracy)
    return np.array(out)


def test_weight_noise_never_significantly_improves_accuracy(trained_small):
    dataset, net = trained_small
    specs = held_out_pairs(dataset, 20, PairingType.SIM_REAL, seed=11)
    levels = [0.0, 0.3, 1.0, 3.0]  # noise sigma relative to each tensor's std
    accs = []
    for j, level in enumerate(levels):
        noisy = net.copy()
        rng = seeded_rng(50 + j)
        for name, p in noisy.params.items():
            p += (level * p.std() * rng.standard_normal(p.shape)).astype(p.dtype)
        accs.append(per_pair_accuracy(noisy, dataset, specs))
    critical = stats.t.ppf(0.95, len(specs) - 1)
    for prev, cur in zip(accs, accs[1:]):
        d = cur - prev
        se = d.std(ddof=1) / np.sqrt(len(d))
        assert se == 0 or d.mean() / se < critical, (prev.mean(), cur.mean())
    assert accs[0].mean() > accs[-1].mean()
