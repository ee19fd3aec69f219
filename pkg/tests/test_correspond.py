from __future__ import annotations

import numpy as np
import pytest

from objmatch.checks import occlusion_oracle
from objmatch.correspond import (
    ALL_PAIRINGS,
    Dataset,
    InsufficientScenesError,
    NoSharedModelError,
    PairingType,
    PairSampler,
    PairSpec,
    SamplingConfig,
    build_pair_file,
    generate_match_set,
    generate_matches,
    generate_non_matches,
    sample_pair_spec,
    split_counts,
    true_locations,
)
from objmatch.pairfile import PairFileError, iter_pair_file, pair_file_count, read_pair_file, write_pair_file
from objmatch.rng import seeded_rng
from objmatch.types import DomainTag, NonMatchCategory
from objmatch.verify import verify_pair_file
from scenes import card_scene



def _pair(dataset, a="000", b="001", scene="cards"):
    return dataset.records(PairSpec(PairingType.SIM_SIM, scene, a, scene, b, True))


# -- scheduler ----------------------------------------------------------------------


def test_pairing_type_frequencies_over_30k(small_dataset):
    rng = seeded_rng(0)
    counts = np.bincount([int(sample_pair_spec(small_dataset, rng).pairing_type) for _ in range(30000)], minlength=3)
    assert np.all((counts / 30000 >= 0.323) & (counts / 30000 <= 0.343)), counts


def test_same_scene_rate_over_10k_sim_sim(small_dataset):
    rng = seeded_rng(1)
    specs = [sample_pair_spec(small_dataset, rng, (PairingType.SIM_SIM,)) for _ in range(10000)]
    assert abs(np.mean([s.same_scene for s in specs]) - 0.30) <= 0.015


def test_sim_real_is_always_cross_scene_and_domains_match(small_dataset):
    rng = seeded_rng(2)
    for _ in range(500):
        spec = sample_pair_spec(small_dataset, rng)
        small_dataset.check_pair(spec)
        if spec.pairing_type == PairingType.SIM_REAL:
            assert not spec.same_scene and spec.scene_a != spec.scene_b
        if spec.same_scene:
            assert spec.image_a != spec.image_b


def test_pair_spec_invariants():
    with pytest.raises(ValueError):
        PairSpec(PairingType.SIM_REAL, "a", "0", "a", "1", True)
    with pytest.raises(ValueError):
        PairSpec(PairingType.SIM_SIM, "a", "0", "b", "1", True)


def test_insufficient_scenes(small_scenes):
    only_sim = Dataset([s for s in small_scenes if s.domain_tag == DomainTag.SIM][:1])
    with pytest.raises(InsufficientScenesError):
        sample_pair_spec(only_sim, seeded_rng(0), (PairingType.SIM_SIM,))
    with pytest.raises(InsufficientScenesError):
        sample_pair_spec(only_sim, seeded_rng(0), (PairingType.SIM_REAL,))


# -- matches --------------------------------------------------------------------------


def test_self_pair_matches_are_identical(small_dataset):
    """Same-instance matches of an image with itself coincide; with repeated models the
    cross-product rule also pairs different instances, which land on other copies."""
    scene_id = small_dataset.by_domain[DomainTag.SIM][0]
    rec = small_dataset.record(scene_id, "000")
    ms, _ = generate_matches(rec, rec, SamplingConfig(n_matches=500), seeded_rng(0))
    assert ms.n_matches == 500
    same = ms.match_instances[:, 0] == ms.match_instances[:, 1]
    assert same.sum() > 100
    assert np.array_equal(ms.match_a[same], ms.match_b[same])


def test_self_pair_with_unique_instances_is_identity():
    scene = card_scene([[("a", 20, 20, 1.0), ("b", 44, 40, 0.8)]])
    rec = Dataset([scene]).record("cards", "000")
    ms, _ = generate_matches(rec, rec, SamplingConfig(n_matches=300), seeded_rng(0))
    assert ms.n_matches == 300 and np.array_equal(ms.match_a, ms.match_b)


def test_matches_on_masks_and_in_bounds(small_dataset):
    sampler = PairSampler(small_dataset, SamplingConfig(n_matches=300, n_non_matches=300))
    for k in range(10):
        spec, ms = sampler.record(k)
        rec_a, rec_b = small_dataset.records(spec)
        ms.check_bounds(64, 64)
        a, b = np.floor(ms.match_a).astype(int), np.floor(ms.match_b).astype(int)
        assert np.all(rec_a.mask[a[:, 1], a[:, 0]] >= 0) and np.all(rec_b.mask[b[:, 1], b[:, 0]] >= 0)
        assert ms.n_matches <= 300


def test_multiple_instances_are_matched_uniformly():
    scene = card_scene([[("card", 32, 32, 1.0)],
                        [("card", 14, 14, 1.0), ("card", 48, 20, 1.0), ("card", 30, 48, 1.0)]])
    rec_a, rec_b = _pair(Dataset([scene]))
    ms, short = generate_matches(rec_a, rec_b, SamplingConfig(n_matches=10000), seeded_rng(3))
    assert short == 0
    freq = np.bincount(ms.match_instances[:, 1], minlength=3) / ms.n_matches
    assert np.all(np.abs(freq - 1 / 3) <= 0.05), freq


def test_fully_covered_plane_never_matched_in_either_mode():
    # view B: the near card hides the far card completely; view A shows both. The card grid
    # is finer than a pixel so the vertex-only rule also sees the occluder in every pixel.
    scene = card_scene([[("far", 20, 20, 1.2), ("near", 46, 46, 2.0)],
                        [("far", 32, 32, 1.2), ("near", 32, 32, 0.5)]], grid=30)
    rec_a, rec_b = _pair(Dataset([scene]))
    assert not np.any(rec_b.mask == 0)
    for mode in ("zbuffer", "vertex_only"):
        ms, short = generate_matches(rec_a, rec_b, SamplingConfig(n_matches=200, occlusion=mode), seeded_rng(4))
        assert ms.n_matches == 200 and short == 0
        assert set(ms.match_models) == {"near"}


def test_two_plane_oracle_small():
    report = occlusion_oracle(10, seed=5)
    assert report.occluded_matches == 0 and report.disagreements == 0
    assert report.hidden_vertices > 0 and report.matches > 0


def test_no_shared_model_is_an_error():
    scene = card_scene([[("a", 20, 20, 1.0)], [("b", 40, 40, 1.0)]])
    rec_a, rec_b = _pair(Dataset([scene]))
    with pytest.raises(NoSharedModelError):
        generate_matches(rec_a, rec_b, SamplingConfig(), seeded_rng(0))


def test_budget_exhaustion_returns_partial_set(caplog):
    # in B only one vertex column of the card is inside the image
    scene = card_scene([[("card", 32, 32, 1.0)], [("card", 65.6, 32, 1.0)]])
    rec_a, rec_b = _pair(Dataset([scene]))
    ms, short = generate_matches(rec_a, rec_b, SamplingConfig(n_matches=1000, budget_factor=2), seeded_rng(0))
    assert short > 0 and ms.n_matches == 1000 - short
    assert "matches found" in caplog.text


# -- non-matches --------------------------------------------------------------------------


def test_default_split_counts():
    assert split_counts(5000, (1 / 3, 1 / 3, 1 / 3)) == [1667, 1667, 1666]
    assert sum(split_counts(7, (0.5, 0.25, 0.25))) == 7


def test_default_non_match_counts(small_dataset):
    spec, ms = PairSampler(small_dataset).record(0)
    assert ms.n_non_matches == 5000
    assert ms.category_counts() == (1667, 1667, 1666)


def test_categories_agree_with_masks(small_dataset):
    spec, ms = PairSampler(small_dataset, SamplingConfig(n_matches=10, n_non_matches=900)).record(1)
    rec_a, rec_b = small_dataset.records(spec)
    a, b = np.floor(ms.non_match_a).astype(int), np.floor(ms.non_match_b).astype(int)
    on_a, on_b = rec_a.mask[a[:, 1], a[:, 0]] >= 0, rec_b.mask[b[:, 1], b[:, 0]] >= 0
    cat = ms.non_match_category
    assert np.all(on_a[cat == 0] & on_b[cat == 0])
    assert np.all(on_a[cat == 1] & ~on_b[cat == 1])
    assert np.all(~on_a[cat == 2] & ~on_b[cat == 2])


def test_obj_obj_non_matches_avoid_true_correspondences(small_dataset):
    cfg = SamplingConfig(n_matches=10, n_non_matches=3000)
    sampler = PairSampler(small_dataset, cfg)
    checked = 0
    for k in range(6):
        spec, ms = sampler.record(k)
        rec_a, rec_b = small_dataset.records(spec)
        oo = ms.non_match_category == NonMatchCategory.OBJ_OBJ
        truth = true_locations(rec_a, rec_b, np.floor(ms.non_match_a[oo]).astype(int))
        dist = np.sqrt(((truth - ms.non_match_b[oo][:, None, :]) ** 2).sum(axis=2))
        assert not np.any(dist < cfg.exclusion_radius)
        checked += int(np.isfinite(dist).any(axis=1).sum())
    assert checked > 100


def test_true_locations_identity_on_same_image(small_dataset):
    scene_id = small_dataset.by_domain[DomainTag.SIM][0]
    rec = small_dataset.record(scene_id, "001")
    pix = np.argwhere(rec.mask >= 0)[::7, ::-1]
    truth = true_locations(rec, rec, pix)
    hit = ~np.isnan(truth[:, :, 0])
    err = np.abs(truth - (pix[:, None, :] + 0.5))
    assert hit.any(axis=1).mean() > 0.95
    # every point finds itself through the instance that owns it
    assert np.all(np.nanmin(np.where(hit, err.max(axis=2), np.inf), axis=1)[hit.any(axis=1)] < 1e-6)


def test_no_shared_models_needs_no_exclusion():
    scene = card_scene([[("a", 20, 20, 1.0)], [("b", 40, 40, 1.0)]])
    rec_a, rec_b = _pair(Dataset([scene]))
    ms = generate_non_matches(rec_a, rec_b, SamplingConfig(n_non_matches=300), seeded_rng(0))
    assert ms.category_counts() == (100, 100, 100)


def test_all_background_b_redistributes(caplog):
    scene = card_scene([[("a", 20, 20, 1.0)], [("a", 32, 32, 0.05)]])
    rec_a, rec_b = _pair(Dataset([scene]))
    assert np.all(rec_b.mask >= 0)
    ms = generate_non_matches(rec_a, rec_b, SamplingConfig(n_non_matches=300), seeded_rng(0))
    counts = ms.category_counts()
    # B is all object here, so the background categories are the unsatisfiable ones
    assert counts[1] == counts[2] == 0 and counts[0] == 300
    assert "unsatisfiable" in caplog.text

    empty = card_scene([[("a", 20, 20, 1.0)], [("a", 32, 32, -1.0)]], scene_id="empty")
    rec_a, rec_b = _pair(Dataset([empty]), scene="empty")
    assert np.all(rec_b.mask < 0)
    ms = generate_non_matches(rec_a, rec_b, SamplingConfig(n_non_matches=300), seeded_rng(0))
    assert ms.category_counts()[0] == 0 and ms.n_non_matches == 300


# -- pair files ---------------------------------------------------------------------------


def test_pair_file_is_deterministic(small_dataset, tmp_path):
    cfg = SamplingConfig(n_matches=50, n_non_matches=50)
    a = build_pair_file(small_dataset, 100, cfg, 7, tmp_path / "a.prs")
    b = build_pair_file(small_dataset, 100, cfg, 7, tmp_path / "b.prs")
    assert a.read_bytes() == b.read_bytes()
    assert pair_file_count(a) == 100
    assert all(ms.n_matches <= 50 for _, ms in iter_pair_file(a))


def test_parallel_pair_file_matches_sequential(small_dataset, tmp_path):
    cfg = SamplingConfig(n_matches=50, n_non_matches=50)
    a = build_pair_file(small_dataset, 20, cfg, 3, tmp_path / "a.prs", jobs=1)
    b = build_pair_file(small_dataset, 20, cfg, 3, tmp_path / "b.prs", jobs=2)
    assert a.read_bytes() == b.read_bytes()


def test_pair_file_round_trip(small_dataset, tmp_path):
    records = list(PairSampler(small_dataset, SamplingConfig(n_matches=20, n_non_matches=30)).records(5))
    path = write_pair_file(tmp_path / "p.prs", records)
    back = read_pair_file(path)
    for (spec, ms), (spec2, ms2) in zip(records, back):
        assert spec == spec2
        for name in ("match_a", "match_b", "non_match_a", "non_match_b", "non_match_category"):
            assert np.array_equal(getattr(ms, name), getattr(ms2, name))


def test_pair_file_corruption_is_detected(small_dataset, tmp_path):
    records = list(PairSampler(small_dataset, SamplingConfig(n_matches=5, n_non_matches=5)).records(2))
    path = write_pair_file(tmp_path / "p.prs", records)
    data = path.read_bytes()
    (tmp_path / "bad.prs").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "short.prs").write_bytes(data[:-3])
    (tmp_path / "long.prs").write_bytes(data + b"\0")
    for name in ("bad.prs", "short.prs", "long.prs"):
        with pytest.raises(PairFileError):
            read_pair_file(tmp_path / name)


def test_pair_file_reprojects(small_dataset, tmp_path):
    path = build_pair_file(small_dataset, 20, SamplingConfig(n_matches=200, n_non_matches=200), 1, tmp_path / "p.prs")
    report = verify_pair_file(path, small_dataset)
    assert report.ok, report.failures[:5]
    assert report.exact_f32 == report.matches == 20 * 200


def test_verifier_catches_a_moved_match(small_dataset, tmp_path):
    records = list(PairSampler(small_dataset, SamplingConfig(n_matches=50, n_non_matches=10)).records(3))
    records[1][1].match_b[7] += np.float32(0.75)
    path = write_pair_file(tmp_path / "p.prs", records)
    report = verify_pair_file(path, small_dataset)
    assert (1, "match", 7) in report.failures


def test_generate_match_set_combines_both(small_dataset):
    rec_a = small_dataset.record(small_dataset.by_domain[DomainTag.SIM][0], "000")
    rec_b = small_dataset.record(small_dataset.by_domain[DomainTag.SIM][0], "002")
    ms = generate_match_set(rec_a, rec_b, SamplingConfig(n_matches=40, n_non_matches=60), seeded_rng(0))
    assert ms.n_matches == 40 and ms.n_non_matches == 60
    assert ALL_PAIRINGS == (PairingType.SIM_SIM, PairingType.REAL_REAL, PairingType.SIM_REAL)
