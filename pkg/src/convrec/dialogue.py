"""Conversation decisions and session state.

A session opens with one liked attribute (turn 1). From turn 2 on the
system either asks a yes/no attribute question or shows a slate of items,
chosen by a four-way rule: ask only while an unknown attribute still looks
ambiguous, the conversation has turns left, and more candidates remain
than fit one slate. Question targets are picked by fused epistemic
uncertainty: stochastic-forward-pass variance and midpoint proximity,
combined by a harmonic mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .belief import BeliefNetwork, predict_beliefs
from .data import ItemCatalog, UserHistory
from .recommender import EmbeddingStore, RecommendationNetwork, belief_embedding

__all__ = [
    "Action",
    "ConversationEngine",
    "DialogueState",
    "InvariantViolation",
    "NoUnknownAttributeError",
    "PolicyConfig",
    "ReplayError",
    "TurnRecord",
    "UsageError",
    "UNKNOWN",
    "apply_attribute_feedback",
    "apply_recommendation_feedback",
    "confidence",
    "decide_action",
    "fuse_uncertainty",
    "init_session",
    "mc_belief_samples",
    "mc_dropout_variance",
    "midpoint_proximity",
    "midpoint_proximity_raw",
    "normalize_minmax",
    "query_rule",
    "replay_candidate_counts",
    "select_query_attribute",
]

UNKNOWN = 0.5


class UsageError(RuntimeError):
    """A session operation was invoked out of order or twice."""


class InvariantViolation(RuntimeError):
    """Internal session bookkeeping broke an invariant."""


class NoUnknownAttributeError(LookupError):
    """Every attribute is answered; the caller should recommend instead."""


class ReplayError(RuntimeError):
    """A transcript does not reproduce under replay."""


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.1
    slate_size: int = 10
    max_turns: int = 15
    mc_passes: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 0.5:
            raise ValueError(f"alpha must be in [0, 0.5], got {self.alpha}")
        if self.slate_size < 1:
            raise ValueError(f"slate_size must be >= 1, got {self.slate_size}")
        if self.max_turns < 2:
            raise ValueError(f"max_turns must be >= 2, got {self.max_turns}")
        if self.mc_passes < 1:
            raise ValueError(f"mc_passes must be >= 1, got {self.mc_passes}")


@dataclass(frozen=True)
class TurnRecord:
    turn: int
    action: str  # "open" | "question" | "recommendation"
    attribute: int | None
    items: tuple[int, ...] | None
    response: str  # "yes" | "no" | "accept" | "reject"
    candidates_after: int

    def to_dict(self) -> dict:
        return {
            "turn": self.turn,
            "action": self.action,
            "attribute": self.attribute,
            "items": list(self.items) if self.items is not None else None,
            "response": self.response,
            "candidates_after": self.candidates_after,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TurnRecord":
        return cls(
            turn=int(raw["turn"]),
            action=str(raw["action"]),
            attribute=None if raw["attribute"] is None else int(raw["attribute"]),
            items=None if raw["items"] is None else tuple(int(v) for v in raw["items"]),
            response=str(raw["response"]),
            candidates_after=int(raw["candidates_after"]),
        )


@dataclass
class DialogueState:
    """Mutable per-session record; confined to one conversation."""

    user: int | None
    seed: int
    feedback: np.ndarray
    candidates: set[int]
    asked: set[int] = field(default_factory=set)
    rejected: set[int] = field(default_factory=set)
    log: list[TurnRecord] = field(default_factory=list)
    turn: int = 1
    beliefs: np.ndarray | None = None
    status: str = "active"  # active | succeeded | exhausted
    termination_turn: int | None = None

    @property
    def unknown_attributes(self) -> np.ndarray:
        return np.flatnonzero(self.feedback == UNKNOWN)


@dataclass(frozen=True)
class Action:
    kind: str  # "question" | "recommendation"
    attribute: int | None = None
    items: tuple[int, ...] | None = None


def init_session(catalog: ItemCatalog, user: int | None, opening_attribute: int,
                 seed: int = 0) -> DialogueState:
    """Start a session from the user's one liked attribute.

    Feedback starts all-unknown except the opening attribute (set to 1);
    candidates start as every item carrying that attribute.
    """
    p1 = int(opening_attribute)
    if not 0 <= p1 < catalog.attribute_count:
        raise ValueError(f"unknown attribute {p1}")
    feedback = np.full(catalog.attribute_count, UNKNOWN)
    feedback[p1] = 1.0
    candidates = set(catalog.items_with(p1))
    state = DialogueState(user=user, seed=int(seed), feedback=feedback,
                          candidates=candidates, asked={p1})
    state.log.append(TurnRecord(1, "open", p1, None, "yes", len(candidates)))
    return state


def confidence(q: np.ndarray) -> np.ndarray:
    """Distance of each belief from total ambivalence: |q - 0.5| in [0, 0.5]."""
    return np.abs(np.asarray(q, dtype=float) - 0.5)


def query_rule(uncertain_unknown_exists: bool, before_last_turn: bool,
               candidates_exceed_slate: bool, unknowns_remain: bool) -> bool:
    """True (ask a question) exactly when all four predicates hold."""
    return (uncertain_unknown_exists and before_last_turn
            and candidates_exceed_slate and unknowns_remain)


def decide_action(q: np.ndarray, feedback: np.ndarray, turn: int,
                  candidate_count: int, config: PolicyConfig) -> str:
    """``"question"`` or ``"recommendation"`` for the system turn ``turn``."""
    unknown = feedback == UNKNOWN
    uncertain_unknown = bool(np.any(confidence(q)[unknown] <= config.alpha))
    ask = query_rule(
        uncertain_unknown,
        turn < config.max_turns,
        candidate_count > config.slate_size,
        bool(unknown.any()),
    )
    return "question" if ask else "recommendation"


def normalize_minmax(values: np.ndarray) -> np.ndarray:
    """Min-max rescale into [0, 1]; an all-equal vector maps to all zeros."""
    values = np.asarray(values, dtype=float)
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def mc_belief_samples(network: BeliefNetwork, user_vec: np.ndarray,
                      history_matrix: np.ndarray, feedback: np.ndarray,
                      n_passes: int, session_seed: int, turn: int) -> np.ndarray:
    """Beliefs from ``n_passes`` stochastic forward passes, one row per pass.

    Pass ``i`` uses an RNG seeded from ``(session_seed, turn, i)``, so
    passes are order-independent and reproducible.
    """
    samples = np.empty((n_passes, network.config.attribute_count))
    for i in range(n_passes):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(session_seed), int(turn), i]))
        relation = network.relation_matrix(user_vec, history_matrix,
                                           mode="mc", rng=rng)
        samples[i] = predict_beliefs(relation, feedback)
    return samples


def mc_dropout_variance(samples: np.ndarray) -> np.ndarray:
    """Per-attribute population variance of belief samples, min-max normalized."""
    raw = np.var(samples, axis=0)
    return normalize_minmax(raw)


def midpoint_proximity_raw(q: np.ndarray) -> np.ndarray:
    """1 - 2|q - 0.5|: 1 at total ambivalence, 0 at a settled belief."""
    return 1.0 - 2.0 * np.abs(np.asarray(q, dtype=float) - 0.5)


def midpoint_proximity(q: np.ndarray) -> np.ndarray:
    return normalize_minmax(midpoint_proximity_raw(q))


def fuse_uncertainty(proximity: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Elementwise harmonic mean; 0 wherever both inputs are 0."""
    proximity = np.asarray(proximity, dtype=float)
    variance = np.asarray(variance, dtype=float)
    total = proximity + variance
    out = np.zeros_like(total)
    nonzero = total > 0
    out[nonzero] = 2.0 * proximity[nonzero] * variance[nonzero] / total[nonzero]
    return out


def select_query_attribute(uncertainty: np.ndarray, feedback: np.ndarray) -> int:
    """Most uncertain still-unknown attribute; ties go to the smaller id."""
    unknown = np.flatnonzero(feedback == UNKNOWN)
    if unknown.size == 0:
        raise NoUnknownAttributeError("all attributes answered; recommend instead")
    values = np.asarray(uncertainty, dtype=float)[unknown]
    return int(unknown[np.argmax(values)])


def apply_attribute_feedback(state: DialogueState, attribute: int, liked: bool,
                             catalog: ItemCatalog,
                             max_turns: int = PolicyConfig().max_turns) -> None:
    """Record a yes/no answer and filter candidates accordingly.

    Yes keeps only items with the attribute; no removes every item that has
    it. Asking an already-answered attribute is a usage error. An answer
    that leaves no candidate (possible only for contradictory answers, never
    for a user describing a real item) exhausts the session.
    """
    p = int(attribute)
    if state.status != "active":
        raise UsageError(f"session already {state.status}")
    if state.feedback[p] != UNKNOWN:
        raise UsageError(f"attribute {p} was already answered")
    members = catalog.items_with(p)
    state.feedback[p] = 1.0 if liked else 0.0
    if liked:
        state.candidates &= set(members)
    else:
        state.candidates -= set(members)
    state.asked.add(p)
    state.turn += 1
    if not state.candidates:
        state.status = "exhausted"
        state.termination_turn = max_turns
    state.log.append(TurnRecord(state.turn, "question", p, None,
                                "yes" if liked else "no", len(state.candidates)))


def apply_recommendation_feedback(state: DialogueState, slate: Sequence[int],
                                  accepted: bool,
                                  max_turns: int = PolicyConfig().max_turns) -> None:
    """Record the user's verdict on a slate; terminal on accept, on running
    out of turns, and on running out of candidates."""
    if state.status != "active":
        raise UsageError(f"session already {state.status}")
    slate_set = set(int(v) for v in slate)
    if not slate_set <= state.candidates:
        raise InvariantViolation(
            f"slate contains items outside the candidate set: "
            f"{sorted(slate_set - state.candidates)}"
        )
    state.turn += 1
    if accepted:
        state.status = "succeeded"
        state.termination_turn = state.turn
    else:
        state.candidates -= slate_set
        state.rejected |= slate_set
        if state.turn >= max_turns or not state.candidates:
            state.status = "exhausted"
            state.termination_turn = max_turns
    state.log.append(TurnRecord(state.turn, "recommendation", None,
                                tuple(sorted(slate_set)),
                                "accept" if accepted else "reject",
                                len(state.candidates)))


AttributeChooser = Callable[["ConversationEngine", DialogueState, np.ndarray, int], int]


class ConversationEngine:
    """Binds frozen models to the per-turn decision logic.

    ``attribute_chooser`` replaces the fused-uncertainty question selector
    (used by the ablation strategies); ``always_recommend`` drops questions
    entirely; ``ranker="popularity"`` swaps the slate source to global
    interaction counts.
    """

    def __init__(self, catalog: ItemCatalog, store: EmbeddingStore,
                 belief_net: BeliefNetwork, rec_net: RecommendationNetwork,
                 attribute_embeddings: np.ndarray,
                 histories: Mapping[int, UserHistory],
                 config: PolicyConfig = PolicyConfig(),
                 attribute_chooser: AttributeChooser | None = None,
                 always_recommend: bool = False,
                 ranker: str = "network",
                 popularity: Mapping[int, float] | None = None):
        if ranker not in ("network", "popularity"):
            raise ValueError(f"unknown ranker {ranker!r}")
        if ranker == "popularity" and popularity is None:
            raise ValueError("popularity ranker needs interaction counts")
        self.catalog = catalog
        self.store = store
        self.belief_net = belief_net
        self.rec_net = rec_net
        self.attribute_embeddings = attribute_embeddings
        self.histories = dict(histories)
        self.config = config
        self.attribute_chooser = attribute_chooser
        self.always_recommend = always_recommend
        self.ranker = ranker
        self.popularity = dict(popularity) if popularity else {}
        self._relation_cache: dict[int | None, np.ndarray] = {}

    def open_session(self, user: int | None, opening_attribute: int,
                     seed: int = 0) -> DialogueState:
        if user is not None:
            self.store.user_vector(user)  # fail fast on unknown users
        return init_session(self.catalog, user, opening_attribute, seed)

    def _user_vector(self, user: int | None) -> np.ndarray:
        if user is None:
            return np.zeros(self.store.dim)
        return self.store.user_vector(user)

    def _history(self, user: int | None) -> UserHistory:
        if user is not None and user in self.histories:
            return self.histories[user]
        k = self.belief_net.config.history_length
        return UserHistory(user=-1 if user is None else user, items=(),
                           matrix=np.zeros((k, self.catalog.attribute_count)))

    def relation_matrix(self, user: int | None) -> np.ndarray:
        """Deterministic relation matrix; cached, since a session's inputs
        other than feedback never change."""
        if user not in self._relation_cache:
            self._relation_cache[user] = self.belief_net.relation_matrix(
                self._user_vector(user), self._history(user).matrix)
        return self._relation_cache[user]

    def beliefs(self, state: DialogueState) -> np.ndarray:
        return predict_beliefs(self.relation_matrix(state.user), state.feedback)

    def uncertainty(self, state: DialogueState, turn: int) -> np.ndarray:
        """Fused question-worthiness of each attribute at the given turn."""
        samples = mc_belief_samples(
            self.belief_net, self._user_vector(state.user),
            self._history(state.user).matrix, state.feedback,
            self.config.mc_passes, state.seed, turn)
        sigma = mc_dropout_variance(samples)
        proximity = midpoint_proximity(self.beliefs(state))
        return fuse_uncertainty(proximity, sigma)

    def slate(self, state: DialogueState, q: np.ndarray | None = None) -> tuple[int, ...]:
        if not state.candidates:
            raise UsageError("no candidates left to recommend")
        if self.ranker == "popularity":
            ranked = sorted(state.candidates,
                            key=lambda v: (-self.popularity.get(v, 0.0), v))
            return tuple(ranked[:self.config.slate_size])
        if q is None:
            q = self.beliefs(state)
        o = belief_embedding(q, self.attribute_embeddings)
        history = self._history(state.user)
        return tuple(self.rec_net.rank_candidates(
            self.store, state.user, history.items, o, state.candidates,
            self.config.slate_size, user_vec=self._user_vector(state.user)))

    def next_action(self, state: DialogueState) -> Action:
        """Decide the system's move for the upcoming turn."""
        if state.status != "active":
            raise UsageError(f"session already {state.status}")
        turn = state.turn + 1
        q = self.beliefs(state)
        state.beliefs = q
        kind = decide_action(q, state.feedback, turn, len(state.candidates),
                             self.config)
        if self.always_recommend:
            kind = "recommendation"
        if kind == "question":
            if self.attribute_chooser is None:
                attribute = select_query_attribute(
                    self.uncertainty(state, turn), state.feedback)
            else:
                attribute = self.attribute_chooser(self, state, q, turn)
            return Action(kind="question", attribute=int(attribute))
        return Action(kind="recommendation", items=self.slate(state, q))


def replay_candidate_counts(catalog: ItemCatalog, records: Sequence[TurnRecord]) -> list[int]:
    """Re-run a transcript's candidate updates, checking every recorded count.

    Returns the reproduced |V_t| sequence; raises :class:`ReplayError` on the
    first turn whose recorded count cannot be reproduced.
    """
    if not records or records[0].action != "open":
        raise ReplayError("transcript must start with the opening turn")
    candidates = set(catalog.items_with(records[0].attribute))
    counts = []
    for rec in records:
        if rec.action == "open":
            pass
        elif rec.action == "question":
            members = catalog.items_with(rec.attribute)
            if rec.response == "yes":
                candidates &= set(members)
            else:
                candidates -= set(members)
        elif rec.action == "recommendation":
            if rec.response == "reject":
                candidates -= set(rec.items)
        else:
            raise ReplayError(f"unknown action {rec.action!r}")
        if len(candidates) != rec.candidates_after:
            raise ReplayError(
                f"turn {rec.turn}: replay gives {len(candidates)} candidates, "
                f"transcript says {rec.candidates_after}"
            )
        counts.append(len(candidates))
    return counts
