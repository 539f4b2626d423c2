import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convrec.belief import BeliefNetwork, BtnConfig
from convrec.data import Interaction, ItemCatalog, UserHistory
from convrec.dialogue import (
    ConversationEngine,
    NoUnknownAttributeError,
    PolicyConfig,
    TurnRecord,
    replay_candidate_counts,
)
from convrec.recommender import EmbeddingStore, RecommendationNetwork, RnConfig
from convrec.simulation import (
    EpisodeResult,
    MetricsReport,
    STRATEGIES,
    SimulatedUser,
    bernoulli_entropy,
    engine_for_strategy,
    episode_seed,
    evaluate,
    max_entropy_attribute,
    opening_attribute,
    popularity_counts,
    run_episode,
    run_episodes,
    simulate_answer,
)
from convrec.simulation import _highest_score_chooser, _most_informative_chooser, _random_chooser


def make_models(catalog, users=range(3), dim=6, history_length=2, seed=0):
    P = catalog.attribute_count
    store = EmbeddingStore(users, catalog.item_ids, dim=dim, seed=seed)
    btn = BeliefNetwork(BtnConfig(attribute_count=P, user_dim=dim,
                                  history_length=history_length,
                                  conv_channels=3, conv_dense=8,
                                  hidden=(10, 12), dropout=0.2), seed=seed)
    rn = RecommendationNetwork(RnConfig(dim=dim, history_length=history_length,
                                        block1_channels=3, block2_channels=4,
                                        trunk_hidden=10, head_hidden=(8, 6)),
                               seed=seed)
    attr_emb = np.random.default_rng(seed).normal(size=(P, dim))
    histories = {
        u: UserHistory(u, (catalog.item_ids[0],),
                       catalog.binary_matrix([catalog.item_ids[0]],
                                             rows=history_length))
        for u in users
    }
    return store, btn, rn, attr_emb, histories


class TestSimulatedUser:
    CATALOG = ItemCatalog({0: {0, 2}, 1: {1}, 2: {0, 1, 2}}, attribute_count=3)

    def test_yes_on_target_attribute(self):
        user = SimulatedUser.for_item(self.CATALOG, 0)
        assert simulate_answer(user, 0) is True
        assert simulate_answer(user, 2) is True

    def test_no_on_other_attribute(self):
        user = SimulatedUser.for_item(self.CATALOG, 0)
        assert simulate_answer(user, 1) is False

    def test_full_question_sweep_recovers_attribute_vector(self):
        for item in self.CATALOG.item_ids:
            user = SimulatedUser.for_item(self.CATALOG, item)
            answers = np.array([float(simulate_answer(user, p)) for p in range(3)])
            np.testing.assert_array_equal(answers,
                                          self.CATALOG.binary_vector(item))


class TestOpeningAttribute:
    def test_single_attribute_is_forced(self):
        user = SimulatedUser(target=7, attributes=frozenset({3}))
        assert opening_attribute(user, 0) == 3
        assert opening_attribute(user, 99) == 3

    def test_same_seed_same_attribute(self):
        user = SimulatedUser(target=1, attributes=frozenset({0, 1, 2, 3}))
        assert opening_attribute(user, 5) == opening_attribute(user, 5)

    def test_attribute_always_from_target_set(self):
        user = SimulatedUser(target=1, attributes=frozenset({2, 5, 9}))
        for seed in range(50):
            assert opening_attribute(user, seed) in {2, 5, 9}

    def test_empty_attribute_set_rejected(self):
        with pytest.raises(ValueError, match="item 4"):
            opening_attribute(SimulatedUser(4, frozenset()), 0)

    def test_uniform_frequency_over_four_attributes(self):
        user = SimulatedUser(target=1, attributes=frozenset({0, 1, 2, 3}))
        rng = np.random.default_rng(0)
        counts = np.zeros(4)
        for _ in range(10_000):
            counts[opening_attribute(user, rng)] += 1
        freqs = counts / 10_000
        assert np.all(freqs >= 0.23) and np.all(freqs <= 0.27)


class TestEvaluate:
    @staticmethod
    def result(success, turn):
        log = (TurnRecord(1, "open", 0, None, "yes", 1),)
        return EpisodeResult(success, turn, log, (1,))

    def test_single_success_at_turn_five(self):
        report = evaluate([self.result(True, 5)])
        assert report.sr_at(4) == 0.0
        for t in range(5, 16):
            assert report.sr_at(t) == 1.0
        assert report.average_turns == 5.0
        assert report.episodes == 1

    def test_success_and_failure_mix(self):
        report = evaluate([self.result(True, 3), self.result(False, 15)])
        assert report.sr_at(15) == 0.5
        assert report.sr_at(2) == 0.0
        assert report.average_turns == pytest.approx(9.0)

    def test_hundred_episodes_match_counting_oracle(self):
        rng = np.random.default_rng(4)
        episodes = []
        for _ in range(100):
            success = bool(rng.random() < 0.6)
            turn = int(rng.integers(2, 16)) if success else 15
            episodes.append(self.result(success, turn))
        report = evaluate(episodes)
        for t in range(1, 16):
            expected = sum(1 for e in episodes
                           if e.success and e.termination_turn <= t) / 100
            assert report.sr_at(t) == expected
        expected_at = sum(e.termination_turn if e.success else 15
                          for e in episodes) / 100
        assert report.average_turns == pytest.approx(expected_at)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        episodes = [self.result(bool(rng.random() < 0.5),
                                int(rng.integers(2, 16)))
                    for _ in range(30)]
        episodes = [self.result(e.success,
                                e.termination_turn if e.success else 15)
                    for e in episodes]
        shuffled = list(episodes)
        rng.shuffle(shuffled)
        assert evaluate(episodes) == evaluate(shuffled)

    def test_empty_collection_rejected(self):
        with pytest.raises(ValueError):
            evaluate([])

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.booleans(), st.integers(2, 15)),
                    min_size=1, max_size=40))
    def test_curve_always_monotone_and_bounded(self, spec):
        episodes = [self.result(ok, turn if ok else 15) for ok, turn in spec]
        report = evaluate(episodes)
        curve = report.success_rate_at
        assert all(a <= b for a, b in zip(curve, curve[1:]))
        assert 1.0 <= report.average_turns <= 15.0

    def test_report_dict_roundtrip(self):
        report = evaluate([self.result(True, 5), self.result(False, 15)])
        assert MetricsReport.from_dict(report.to_dict()) == report


class TestEntropy:
    def test_even_split_is_peak(self):
        assert bernoulli_entropy(0.5) == pytest.approx(math.log(2))

    def test_degenerate_shares_are_zero(self):
        assert bernoulli_entropy(0.0) == 0.0
        assert bernoulli_entropy(1.0) == 0.0

    def test_three_of_ten(self):
        assert bernoulli_entropy(0.3) == pytest.approx(0.6109, abs=5e-5)

    def test_symmetric(self):
        assert bernoulli_entropy(0.2) == pytest.approx(bernoulli_entropy(0.8))


class TestMaxEntropyAttribute:
    def test_ten_candidates_three_with_attribute(self):
        items = {v: ({0} if v < 3 else set()) | {1} for v in range(10)}
        catalog = ItemCatalog(items, attribute_count=2)
        # attribute 0 covers 3/10 (entropy ~0.611), attribute 1 covers all
        # (entropy 0), so attribute 0 wins.
        assert max_entropy_attribute(set(range(10)), catalog, set()) == 0

    def test_asked_attributes_skipped(self):
        items = {v: {0, 1} if v < 5 else {1} for v in range(10)}
        catalog = ItemCatalog(items, attribute_count=2)
        assert max_entropy_attribute(set(range(10)), catalog, {0}) == 1

    def test_all_asked_signals_recommend(self):
        catalog = ItemCatalog({0: {0}}, attribute_count=1)
        with pytest.raises(NoUnknownAttributeError):
            max_entropy_attribute({0}, catalog, {0})

    def test_empty_candidates_rejected(self):
        catalog = ItemCatalog({0: {0}}, attribute_count=1)
        with pytest.raises(ValueError):
            max_entropy_attribute(set(), catalog, set())

    def test_matches_enumeration_oracle_on_200_instances(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n_items = int(rng.integers(2, 31))
            n_attrs = int(rng.integers(2, 11))
            items = {}
            for v in range(n_items):
                size = int(rng.integers(1, n_attrs + 1))
                items[v] = set(map(int, rng.choice(n_attrs, size=size,
                                                   replace=False)))
            for p in range(n_attrs):  # keep ids dense
                items[int(rng.integers(n_items))].add(p)
            catalog = ItemCatalog(items, attribute_count=n_attrs)
            k = int(rng.integers(1, n_items + 1))
            candidates = set(map(int, rng.choice(n_items, size=k,
                                                 replace=False)))
            asked = set(map(int, rng.choice(
                n_attrs, size=int(rng.integers(0, n_attrs)), replace=False)))
            got = max_entropy_attribute(candidates, catalog, asked)
            best, best_h = None, -1.0
            for p in range(n_attrs):
                if p in asked:
                    continue
                share = len(candidates & catalog.items_with(p)) / len(candidates)
                h = 0.0
                if 0.0 < share < 1.0:
                    h = -(share * math.log(share)
                          + (1 - share) * math.log(1 - share))
                if h > best_h:
                    best, best_h = p, h
            assert got == best


class _State:
    """Just enough state for exercising choosers in isolation."""

    def __init__(self, feedback, seed=0, candidates=(), asked=(), user=None):
        self.feedback = np.asarray(feedback, dtype=float)
        self.seed = seed
        self.candidates = set(candidates)
        self.asked = set(asked)
        self.user = user

    @property
    def unknown_attributes(self):
        return np.flatnonzero(self.feedback == 0.5)


class TestChoosers:
    def test_highest_score_picks_largest_belief(self):
        state = _State([0.5, 0.5])
        assert _highest_score_chooser(None, state, np.array([0.9, 0.1]), 2) == 0

    def test_highest_score_ignores_answered(self):
        state = _State([1.0, 0.5, 0.5])
        q = np.array([1.0, 0.2, 0.8])
        assert _highest_score_chooser(None, state, q, 2) == 2

    def test_random_uniform_over_unasked(self):
        counts = np.zeros(5)
        for seed in range(10_000):
            state = _State([1.0, 0.5, 0.5, 0.5, 0.5, 0.5], seed=seed)
            counts[_random_chooser(None, state, None, 2) - 1] += 1
        freqs = counts / 10_000
        assert np.all(freqs >= 0.18) and np.all(freqs <= 0.22)

    def test_random_reproducible_per_seed_and_turn(self):
        state = _State([0.5] * 6, seed=11)
        first = _random_chooser(None, state, None, 3)
        assert _random_chooser(None, state, None, 3) == first

    def test_most_informative_prefers_disjoint_slates(self):
        class _StubEngine:
            def relation_matrix(self, user):
                return np.eye(3)

            def slate(self, state, q):
                if q[1] == 0.0:
                    return (10, 11)
                if q[1] == 1.0:
                    return (12, 13)
                return (10, 11)  # attribute 2's slates are identical

        state = _State([1.0, 0.5, 0.5])
        assert _most_informative_chooser(_StubEngine(), state, None, 2) == 1

    def test_most_informative_tie_breaks_to_lower_id(self):
        class _StubEngine:
            def relation_matrix(self, user):
                return np.eye(3)

            def slate(self, state, q):
                return (1, 2)

        state = _State([1.0, 0.5, 0.5])
        assert _most_informative_chooser(_StubEngine(), state, None, 2) == 1


class TestRunEpisode:
    def test_single_item_catalog_succeeds_at_turn_two(self):
        catalog = ItemCatalog({0: {0}}, attribute_count=1)
        models = make_models(catalog)
        engine = engine_for_strategy("uncertainty", catalog, *models,
                                     config=PolicyConfig(mc_passes=2))
        result = run_episode(engine, SimulatedUser.for_item(catalog, 0), seed=1)
        assert result.success and result.termination_turn == 2
        assert result.log[1].action == "recommendation"

    def test_recommendation_forced_by_final_turn(self):
        # Every item carries every attribute, so questions never narrow the
        # candidate set and unknowns persist; the turn cap must fire.
        catalog = ItemCatalog({v: set(range(20)) for v in range(30)},
                              attribute_count=20)
        models = make_models(catalog)
        engine = engine_for_strategy(
            "random", catalog, *models,
            config=PolicyConfig(alpha=0.5, mc_passes=2))
        result = run_episode(engine, SimulatedUser.for_item(catalog, 3), seed=2)
        assert result.termination_turn == 15
        kinds = [rec.action for rec in result.log]
        assert kinds[0] == "open"
        assert kinds[1:-1] == ["question"] * 13
        assert kinds[-1] == "recommendation"

    def test_greedy_never_asks(self):
        catalog = ItemCatalog({v: {v % 4} for v in range(40)}, attribute_count=4)
        models = make_models(catalog)
        engine = engine_for_strategy("greedy", catalog, *models,
                                     config=PolicyConfig(mc_passes=2))
        result = run_episode(engine, SimulatedUser.for_item(catalog, 5), seed=3)
        assert all(rec.action in ("open", "recommendation") for rec in result.log)

    def test_seed_fixes_entire_transcript(self):
        catalog = ItemCatalog({v: {v % 3, 3 + v % 2} for v in range(25)},
                              attribute_count=5)
        models = make_models(catalog)
        for name in ("uncertainty", "random", "max-entropy"):
            engine = engine_for_strategy(name, catalog, *models,
                                         config=PolicyConfig(alpha=0.4,
                                                             mc_passes=3))
            a = run_episode(engine, SimulatedUser.for_item(catalog, 7), seed=9)
            b = run_episode(engine, SimulatedUser.for_item(catalog, 7), seed=9)
            assert a == b, name

    def test_failure_charged_full_budget(self):
        # Target hidden in a large uniform catalog ranked by popularity that
        # never favors it: the episode fails and reports the full turn count.
        catalog = ItemCatalog({v: {0} for v in range(200)}, attribute_count=1)
        models = make_models(catalog)
        popularity = {v: 200.0 - v for v in range(150)}
        engine = engine_for_strategy("greedy", catalog, *models,
                                     config=PolicyConfig(mc_passes=2),
                                     ranker="popularity", popularity=popularity)
        result = run_episode(engine, SimulatedUser.for_item(catalog, 199), seed=4)
        assert not result.success
        assert result.termination_turn == 15

    def test_eleven_candidate_narrowing_succeeds_at_turn_seven(self):
        # Opening pins eleven candidates; five questions about attributes no
        # candidate carries leave the set untouched, and once every attribute
        # is answered the turn-seven slate holds the target.
        items = {v: {0} for v in range(11)}
        for j in range(1, 6):
            items[10 + j] = {j}
        catalog = ItemCatalog(items, attribute_count=6)
        models = make_models(catalog)
        engine = ConversationEngine(
            catalog, *models,
            config=PolicyConfig(alpha=0.5, slate_size=10, mc_passes=2),
            attribute_chooser=lambda e, s, q, t: int(s.unknown_attributes[0]),
            ranker="popularity", popularity={0: 100.0})
        result = run_episode(engine, SimulatedUser.for_item(catalog, 0), seed=5)
        assert result.success
        assert result.termination_turn == 7
        assert result.candidate_counts == (11,) * 7
        assert [rec.action for rec in result.log] == (
            ["open"] + ["question"] * 5 + ["recommendation"])
        replayed = replay_candidate_counts(catalog, result.log)
        assert replayed == list(result.candidate_counts)


class TestRunEpisodes:
    @staticmethod
    def setup_world():
        catalog = ItemCatalog({v: {v % 3, 3 + v % 2} for v in range(24)},
                              attribute_count=5)
        models = make_models(catalog)
        engine = engine_for_strategy("uncertainty", catalog, *models,
                                     config=PolicyConfig(alpha=0.3, mc_passes=2))
        pairs = [(u, (u * 7 + i) % 24) for u in range(3) for i in range(2)]
        return engine, pairs

    def test_results_follow_pair_order(self):
        engine, pairs = self.setup_world()
        results = run_episodes(engine, pairs, seed=123)
        assert [(r.user, r.target) for r in results] == pairs

    def test_threaded_run_matches_serial(self):
        engine, pairs = self.setup_world()
        serial = run_episodes(engine, pairs, seed=123, jobs=1)
        threaded = run_episodes(engine, pairs, seed=123, jobs=4)
        assert serial == threaded

    def test_run_seed_changes_episode_seeds(self):
        assert episode_seed(123, 0) != episode_seed(124, 0)
        assert episode_seed(123, 0) != episode_seed(123, 1)
        assert episode_seed(123, 5) == episode_seed(123, 5)

    def test_log_fn_sees_every_episode(self):
        engine, pairs = self.setup_world()
        seen = []
        run_episodes(engine, pairs, seed=1,
                     log_fn=lambda i, r: seen.append(i))
        assert sorted(seen) == list(range(len(pairs)))


class TestStrategyRegistry:
    def test_known_names(self):
        assert set(STRATEGIES) == {"uncertainty", "random", "most-inf",
                                   "max-entropy", "highest-score", "greedy"}

    def test_unknown_name_rejected(self):
        catalog = ItemCatalog({0: {0}}, attribute_count=1)
        with pytest.raises(ValueError, match="unknown strategy"):
            engine_for_strategy("optimal", catalog, *make_models(catalog))

    def test_greedy_flag_set(self):
        assert STRATEGIES["greedy"].always_recommend
        assert not STRATEGIES["uncertainty"].always_recommend


class TestPopularityCounts:
    def test_counts_rows_per_item(self):
        interactions = [Interaction(0, 5, 1.0), Interaction(1, 5, 3.0),
                        Interaction(0, 2, 1.0)]
        assert popularity_counts(interactions) == {5: 2.0, 2: 1.0}

    def test_empty_is_empty(self):
        assert popularity_counts([]) == {}
