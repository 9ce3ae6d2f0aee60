import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedcontrast._rng import derive_seed
from guidedcontrast.augmentation import AugRanges, Augmentation, aug_distance, sample_random
from guidedcontrast.guided import (
    AugMemoryBank,
    coverage_metrics,
    explore,
    kernel,
    most_novel,
    novelty_score,
    pair_for_sample,
    random_pair,
    select_novel,
)

EPS = C = 1e-3
FAR = Augmentation(scale=(1, 1, 1), rotation=(math.pi, math.pi, math.pi), translation=(1, 1, 1))
NEAR = Augmentation(scale=(0.5, 0.5, 0.5), translation=(-1, -1, -1))


def brute_score(candidate, entries, eps=EPS, c=C, weights=(1, 1, 1)):
    total = sum(eps / (aug_distance(m, candidate, weights) + eps) for m in entries)
    return 1.0 / (math.sqrt(total) + c)


class TestKernel:
    @pytest.mark.parametrize("d,expected", [(0.0, 1.0), (EPS, 0.5), (9 * EPS, 0.1)])
    def test_values(self, d, expected):
        assert kernel(d, EPS) == pytest.approx(expected, rel=1e-15)

    def test_strictly_decreasing(self):
        d = np.linspace(0, 5, 1000)
        assert np.all(np.diff(kernel(d, EPS)) < 0)


class TestNoveltyScore:
    def test_empty_bank(self):
        bank = AugMemoryBank(epsilon=EPS, c=C)
        for s in range(20):
            assert novelty_score(sample_random(AugRanges(), s), bank) == 1.0 / C

    def test_duplicate(self):
        bank = AugMemoryBank(epsilon=EPS, c=C)
        bank.add(NEAR)
        assert novelty_score(NEAR, bank) == 1.0 / (1.0 + C)

    def test_far_candidate_below_one_over_c(self):
        bank = AugMemoryBank(epsilon=EPS, c=C)
        bank.add(NEAR)
        far = novelty_score(FAR, bank)
        assert novelty_score(NEAR, bank) < far < 1.0 / C

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        bank = AugMemoryBank(epsilon=0.05, c=0.01, weights=(1.0, 2.0, 0.5))
        entries = [sample_random(AugRanges(), int(s)) for s in rng.integers(0, 10**6, 30)]
        for a in entries:
            bank.add(a)
        for s in range(10):
            cand = sample_random(AugRanges(), 5000 + s)
            expected = brute_score(cand, entries, 0.05, 0.01, (1.0, 2.0, 0.5))
            assert novelty_score(cand, bank) == pytest.approx(expected, rel=1e-12)

    def test_strictly_decreasing_as_candidate_approaches(self):
        bank = AugMemoryBank(epsilon=EPS, c=C)
        bank.add(Augmentation(translation=(0, 0, 0)))
        scores = [novelty_score(Augmentation(translation=(t, 0, 0)), bank) for t in np.linspace(1, 0, 50)]
        assert np.all(np.diff(scores) < 0)


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = AugMemoryBank(capacity=3)
        augs = [sample_random(AugRanges(), s) for s in range(7)]
        for a in augs:
            bank.add(a)
            assert len(bank) <= 3
        assert bank.entries == tuple(augs[-3:])

    def test_vectors_follow_entries(self):
        bank = AugMemoryBank(capacity=4)
        for s in range(11):
            bank.add(sample_random(AugRanges(), s))
        ref = AugMemoryBank(capacity=4)
        for a in bank.entries:
            ref.add(a)
        np.testing.assert_array_equal(bank.vectors, ref.vectors)

    def test_records_round_trip(self):
        bank = AugMemoryBank(capacity=5)
        for s in range(8):
            bank.add(sample_random(AugRanges(), s))
        back = AugMemoryBank.from_records(bank.to_records(), capacity=5)
        assert back.entries == bank.entries
        np.testing.assert_array_equal(back.vectors, bank.vectors)

    @pytest.mark.parametrize("kwargs", [{"capacity": 0}, {"epsilon": 0.0}, {"c": -1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AugMemoryBank(**kwargs)


class TestSelectNovel:
    def test_single_candidate(self):
        bank = AugMemoryBank()
        a = select_novel(bank, AugRanges(), 1, seed=4)
        assert bank.entries == (a,)
        assert a == sample_random(AugRanges(), derive_seed(4, 0))

    def test_far_candidate_wins(self):
        bank = AugMemoryBank()
        bank.add(NEAR)
        assert most_novel([NEAR, FAR], bank) == 1
        assert most_novel([FAR, NEAR], bank) == 0

    def test_tie_goes_to_lower_index(self):
        bank = AugMemoryBank()
        bank.add(NEAR)
        assert most_novel([FAR, FAR, NEAR], bank) == 0
        assert most_novel([FAR, FAR], AugMemoryBank()) == 0

    def test_deterministic(self):
        b1, b2 = AugMemoryBank(), AugMemoryBank()
        for s in range(5):
            assert select_novel(b1, AugRanges(), 8, s) == select_novel(b2, AugRanges(), 8, s)

    def test_duplicate_never_beats_distinct(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            bank = AugMemoryBank()
            entries = [sample_random(AugRanges(), int(s)) for s in rng.integers(0, 10**6, 5)]
            for a in entries:
                bank.add(a)
            dup = entries[int(rng.integers(5))]
            other = sample_random(AugRanges(), int(rng.integers(10**6)))
            if min(aug_distance(other, e) for e in entries) > 0:
                assert novelty_score(dup, bank) < novelty_score(other, bank)


class TestPairForSample:
    def test_first_view_has_no_crop(self):
        bank = AugMemoryBank()
        for s in range(30):
            a1, a2 = pair_for_sample(bank, AugRanges(), 4, s)
            assert a1.crop is None
            assert a2.crop is not None
            assert a1.jitter.sigma == 0.01

    def test_bank_grows_by_two(self):
        bank = AugMemoryBank(capacity=100)
        for k in range(5):
            pair_for_sample(bank, AugRanges(), 4, k)
            assert len(bank) == 2 * (k + 1)

    def test_views_differ(self):
        bank = AugMemoryBank()
        for s in range(100):
            a1, a2 = pair_for_sample(bank, AugRanges(), 2, s)
            assert aug_distance(a1, a2) > 0

    def test_random_pair_matches_sampler(self):
        a1, a2 = random_pair(AugRanges(), 9)
        assert a1 == sample_random(AugRanges(), derive_seed(9, 0)).without_crop()
        assert a2 == sample_random(AugRanges(), derive_seed(9, 1))


class TestCoverage:
    def test_identical(self):
        a = sample_random(AugRanges(), 1)
        assert coverage_metrics([a, a]) == {"min_pairwise": 0.0, "mean_nn": 0.0}

    def test_translation_endpoints(self):
        a = Augmentation(translation=(-1, -1, -1))
        b = Augmentation(translation=(1, 1, 1))
        cov = coverage_metrics([a, b])
        assert cov["min_pairwise"] == math.sqrt(3) == cov["mean_nn"]

    def test_matches_brute_force(self):
        augs = [sample_random(AugRanges(), s) for s in range(300)]
        nn = [min(aug_distance(a, b) for j, b in enumerate(augs) if j != i) for i, a in enumerate(augs)]
        cov = coverage_metrics(augs)
        assert cov["min_pairwise"] == pytest.approx(min(nn), rel=1e-12)
        assert cov["mean_nn"] == pytest.approx(float(np.mean(nn)), rel=1e-12)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            coverage_metrics([Augmentation()])

    def test_degenerate_ranges(self):
        r = AugRanges(scale=(1, 1), rotation=(0, 0), translation=(0, 0))
        assert coverage_metrics(explore("random", 2, 16, 0, r), ranges=r)["mean_nn"] == 0.0

    def test_guided_spreads_more_on_small_sets(self):
        wins = 0
        for t in range(5):
            g = coverage_metrics(explore("guided", 64, 16, t))["mean_nn"]
            r = coverage_metrics(explore("random", 64, 16, t))["mean_nn"]
            wins += g >= r
        assert wins == 5

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            explore("grid", 4, 4, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6))
def test_selection_is_among_candidates(n, seed):
    bank = AugMemoryBank()
    bank.add(sample_random(AugRanges(), seed + 1))
    chosen = select_novel(bank, AugRanges(), n, seed)
    cands = [sample_random(AugRanges(), derive_seed(seed, k)) for k in range(n)]
    assert chosen in cands
    assert bank.entries[-1] == chosen
