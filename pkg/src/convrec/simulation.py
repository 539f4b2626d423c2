"""Truthful user simulation, episode running, and turn-based metrics.

A simulated user fixes one target item and answers attribute questions
truthfully: yes exactly when the target carries the attribute. Episodes
drive a :class:`~convrec.dialogue.ConversationEngine` against such a user
until the slate containing the target is accepted or the turn budget runs
out, and collections of episodes summarize into a cumulative success-rate
curve plus the average number of turns (failures charged the full budget).

The question-selection baselines live here too: random choice, the
split-slate overlap minimizer, candidate-share entropy, and raw belief
score, plus the always-recommend policy.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .belief import BeliefNetwork, predict_beliefs
from .data import ItemCatalog, Interaction, UserHistory
from .dialogue import (
    ConversationEngine,
    DialogueState,
    NoUnknownAttributeError,
    PolicyConfig,
    TurnRecord,
    apply_attribute_feedback,
    apply_recommendation_feedback,
    select_query_attribute,
)
from .recommender import EmbeddingStore, RecommendationNetwork

__all__ = [
    "EpisodeResult",
    "MetricsReport",
    "STRATEGIES",
    "SimulatedUser",
    "Strategy",
    "bernoulli_entropy",
    "engine_for_strategy",
    "evaluate",
    "max_entropy_attribute",
    "opening_attribute",
    "popularity_counts",
    "run_episode",
    "run_episodes",
    "simulate_answer",
]

# Tag separating the random-chooser RNG stream from the per-turn
# stochastic-pass streams, which use small pass indices in the same slot.
_RANDOM_STREAM = 982_451_653


@dataclass(frozen=True)
class SimulatedUser:
    """A user who wants exactly one item and answers from its attributes."""

    target: int
    attributes: frozenset[int]

    @classmethod
    def for_item(cls, catalog: ItemCatalog, item: int) -> "SimulatedUser":
        return cls(target=int(item), attributes=catalog.attributes_of(item))


def simulate_answer(user: SimulatedUser, attribute: int) -> bool:
    """Yes exactly when the target item carries the attribute."""
    return int(attribute) in user.attributes


def opening_attribute(user: SimulatedUser,
                      seed: int | np.random.Generator | None = None) -> int:
    """One attribute of the target, uniform over its attribute set."""
    attrs = sorted(user.attributes)
    if not attrs:
        raise ValueError(f"item {user.target} has no attributes to open with")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(attrs[rng.integers(len(attrs))])


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one simulated conversation."""

    success: bool
    termination_turn: int
    log: tuple[TurnRecord, ...]
    candidate_counts: tuple[int, ...]
    user: int | None = None
    target: int | None = None

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "termination_turn": self.termination_turn,
            "log": [rec.to_dict() for rec in self.log],
            "candidate_counts": list(self.candidate_counts),
            "user": self.user,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EpisodeResult":
        return cls(
            success=bool(raw["success"]),
            termination_turn=int(raw["termination_turn"]),
            log=tuple(TurnRecord.from_dict(r) for r in raw["log"]),
            candidate_counts=tuple(int(c) for c in raw["candidate_counts"]),
            user=None if raw.get("user") is None else int(raw["user"]),
            target=None if raw.get("target") is None else int(raw["target"]),
        )


@dataclass(frozen=True)
class MetricsReport:
    """Cumulative success rates by turn plus the average turn count."""

    success_rate_at: tuple[float, ...]
    average_turns: float
    episodes: int

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("a metrics report needs at least one episode")
        curve = self.success_rate_at
        if any(not 0.0 <= s <= 1.0 for s in curve):
            raise ValueError("success rates must lie in [0, 1]")
        if any(a > b for a, b in zip(curve, curve[1:])):
            raise ValueError("success rates must be non-decreasing in the turn")
        if not 1.0 <= self.average_turns <= len(curve):
            raise ValueError(
                f"average turns {self.average_turns} outside [1, {len(curve)}]")

    def sr_at(self, turn: int) -> float:
        """Success rate by the given 1-based turn."""
        return self.success_rate_at[turn - 1]

    def to_dict(self) -> dict:
        return {
            "success_rate_at": list(self.success_rate_at),
            "average_turns": self.average_turns,
            "episodes": self.episodes,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MetricsReport":
        return cls(
            success_rate_at=tuple(float(s) for s in raw["success_rate_at"]),
            average_turns=float(raw["average_turns"]),
            episodes=int(raw["episodes"]),
        )


def evaluate(results: Iterable[EpisodeResult],
             max_turns: int = PolicyConfig().max_turns) -> MetricsReport:
    """Fold episodes into the success-rate curve and average turn count.

    An episode counts as a success at every turn from its termination turn
    onward; a failed episode never counts and contributes ``max_turns`` to
    the average.
    """
    results = list(results)
    if not results:
        raise ValueError("need at least one episode to evaluate")
    n = len(results)
    curve = tuple(
        sum(1 for r in results if r.success and r.termination_turn <= t) / n
        for t in range(1, max_turns + 1)
    )
    total = sum(r.termination_turn if r.success else max_turns for r in results)
    return MetricsReport(success_rate_at=curve, average_turns=total / n,
                         episodes=n)


def bernoulli_entropy(share: float) -> float:
    """Entropy (natural log) of a yes/no split, with 0·ln 0 taken as 0."""
    if share <= 0.0 or share >= 1.0:
        return 0.0
    return -(share * math.log(share) + (1.0 - share) * math.log(1.0 - share))


def max_entropy_attribute(candidates: set[int], catalog: ItemCatalog,
                          asked: set[int]) -> int:
    """Unasked attribute whose candidate share is most even.

    The share of candidates carrying the attribute defines a yes/no split;
    the attribute with the highest split entropy is returned, ties going to
    the smaller id.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    best = None
    best_entropy = -1.0
    n = len(candidates)
    for p in range(catalog.attribute_count):
        if p in asked:
            continue
        share = len(candidates & catalog.items_with(p)) / n
        entropy = bernoulli_entropy(share)
        if entropy > best_entropy:
            best, best_entropy = p, entropy
    if best is None:
        raise NoUnknownAttributeError("all attributes asked; recommend instead")
    return best


def _random_chooser(engine: ConversationEngine, state: DialogueState,
                    q: np.ndarray, turn: int) -> int:
    rng = np.random.default_rng(
        np.random.SeedSequence([state.seed, turn, _RANDOM_STREAM]))
    unknown = state.unknown_attributes
    return int(unknown[rng.integers(unknown.size)])


def _most_informative_chooser(engine: ConversationEngine, state: DialogueState,
                              q: np.ndarray, turn: int) -> int:
    """Attribute whose two hypothetical answers move the slate the most.

    For each unasked attribute, rank candidates under both the no- and the
    yes-answer belief vectors; the attribute whose two slates overlap least
    (as sets) wins, ties going to the smaller id.
    """
    relation = engine.relation_matrix(state.user)
    best = None
    best_overlap = None
    for p in map(int, state.unknown_attributes):
        slates = []
        for answer in (0.0, 1.0):
            feedback = state.feedback.copy()
            feedback[p] = answer
            slates.append(set(engine.slate(state, predict_beliefs(relation,
                                                                  feedback))))
        overlap = len(slates[0] & slates[1])
        if best_overlap is None or overlap < best_overlap:
            best, best_overlap = p, overlap
    if best is None:
        raise NoUnknownAttributeError("all attributes asked; recommend instead")
    return best


def _max_entropy_chooser(engine: ConversationEngine, state: DialogueState,
                         q: np.ndarray, turn: int) -> int:
    return max_entropy_attribute(state.candidates, engine.catalog, state.asked)


def _highest_score_chooser(engine: ConversationEngine, state: DialogueState,
                           q: np.ndarray, turn: int) -> int:
    return select_query_attribute(q, state.feedback)


@dataclass(frozen=True)
class Strategy:
    """How question targets are chosen (or skipped) during an episode."""

    name: str
    chooser: object = None
    always_recommend: bool = False


STRATEGIES: dict[str, Strategy] = {
    "uncertainty": Strategy("uncertainty", None),
    "random": Strategy("random", _random_chooser),
    "most-inf": Strategy("most-inf", _most_informative_chooser),
    "max-entropy": Strategy("max-entropy", _max_entropy_chooser),
    "highest-score": Strategy("highest-score", _highest_score_chooser),
    "greedy": Strategy("greedy", None, always_recommend=True),
}


def engine_for_strategy(name: str, catalog: ItemCatalog, store: EmbeddingStore,
                        belief_net: BeliefNetwork,
                        rec_net: RecommendationNetwork,
                        attribute_embeddings: np.ndarray,
                        histories: Mapping[int, UserHistory],
                        config: PolicyConfig = PolicyConfig(),
                        ranker: str = "network",
                        popularity: Mapping[int, float] | None = None,
                        ) -> ConversationEngine:
    """Conversation engine with the named question strategy installed."""
    try:
        strategy = STRATEGIES[name]
    except KeyError:
        raise ValueError(
            f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}"
        ) from None
    return ConversationEngine(
        catalog, store, belief_net, rec_net, attribute_embeddings, histories,
        config=config, attribute_chooser=strategy.chooser,
        always_recommend=strategy.always_recommend, ranker=ranker,
        popularity=popularity)


def popularity_counts(interactions: Iterable[Interaction]) -> dict[int, float]:
    """Global interaction count per item, for popularity-ranked slates."""
    counts: dict[int, float] = {}
    for record in interactions:
        counts[record.item] = counts.get(record.item, 0.0) + 1.0
    return counts


def run_episode(engine: ConversationEngine, sim_user: SimulatedUser,
                seed: int, user: int | None = None) -> EpisodeResult:
    """Play one full conversation against a truthful simulated user.

    The seed fixes the opening attribute and every stochastic draw inside
    the episode, so the result is reproducible and the log replayable.
    """
    opening = opening_attribute(sim_user, seed)
    state = engine.open_session(user, opening, seed=seed)
    while state.status == "active":
        action = engine.next_action(state)
        if action.kind == "question":
            liked = simulate_answer(sim_user, action.attribute)
            apply_attribute_feedback(state, action.attribute, liked,
                                     engine.catalog, engine.config.max_turns)
        else:
            accepted = sim_user.target in action.items
            apply_recommendation_feedback(state, action.items, accepted,
                                          engine.config.max_turns)
    return EpisodeResult(
        success=state.status == "succeeded",
        termination_turn=state.termination_turn,
        log=tuple(state.log),
        candidate_counts=tuple(rec.candidates_after for rec in state.log),
        user=user,
        target=sim_user.target,
    )


def episode_seed(base_seed: int, index: int) -> int:
    """Independent per-episode seed derived from the run seed and position."""
    return int(np.random.SeedSequence([int(base_seed), int(index)])
               .generate_state(1)[0])


def run_episodes(engine: ConversationEngine, pairs: Sequence[tuple[int, int]],
                 seed: int = 123, jobs: int = 1,
                 log_fn=None) -> list[EpisodeResult]:
    """One episode per (user, target item) pair, in pair order.

    Episodes draw disjoint seeds from the run seed and are independent given
    the frozen models, so ``jobs > 1`` fans them out over threads; results
    come back in pair order either way.
    """
    users = {user for user, _ in pairs}
    for user in users:  # warm the per-user relation cache before fan-out
        engine.relation_matrix(user)

    def one(index: int) -> EpisodeResult:
        user, item = pairs[index]
        sim_user = SimulatedUser.for_item(engine.catalog, item)
        result = run_episode(engine, sim_user, episode_seed(seed, index),
                             user=user)
        if log_fn is not None:
            log_fn(index, result)
        return result

    if jobs <= 1:
        return [one(i) for i in range(len(pairs))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(len(pairs))))
