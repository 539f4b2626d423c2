"""Item scoring and ranking: shared embeddings, derived attribute embeddings,
the residual scoring network, margin loss, and its training loop.

Scores are unconstrained reals where lower means a better match, so a slate
is the K candidates with the smallest scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Interaction, ItemCatalog, UserHistory
from .nnkit import (
    Adam,
    Concat,
    Dense,
    Flatten,
    NonFiniteGradientError,
    ReLU,
    Reshape,
    ResidualBlock,
    Sequential,
    cosine_lr,
)

__all__ = [
    "EmbeddingStore",
    "EmptyCandidateError",
    "EpochRecord",
    "RnConfig",
    "RnTrainConfig",
    "RecommendationNetwork",
    "TrainingDiverged",
    "refresh_attribute_embeddings",
    "belief_embedding",
    "mask_attributes",
    "rec_loss",
    "train_rn",
]


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss or gradient; parameters were rolled back
    to the last finite snapshot before this was raised."""

    def __init__(self, message: str, records: list["EpochRecord"]):
        super().__init__(message)
        self.records = records


class EmptyCandidateError(ValueError):
    """Ranking was asked for a slate from an empty candidate set."""


@dataclass(frozen=True)
class EpochRecord:
    """One line of training progress; epoch 0 describes the initial state."""
    epoch: int
    train_loss: float
    holdout_loss: float | None


class EmbeddingStore:
    """Trainable user and item embedding tables with id-keyed access."""

    def __init__(self, user_ids: Sequence[int], item_ids: Sequence[int],
                 dim: int = 64, seed: int = 0):
        self.dim = int(dim)
        self.user_ids = tuple(sorted(set(int(u) for u in user_ids)))
        self.item_ids = tuple(sorted(set(int(v) for v in item_ids)))
        self._user_row = {u: i for i, u in enumerate(self.user_ids)}
        self._item_row = {v: i for i, v in enumerate(self.item_ids)}
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(self.dim)
        self.user = rng.uniform(-bound, bound, size=(len(self.user_ids), self.dim))
        self.item = rng.uniform(-bound, bound, size=(len(self.item_ids), self.dim))

    def user_vector(self, user: int) -> np.ndarray:
        try:
            return self.user[self._user_row[user]]
        except KeyError:
            raise LookupError(f"unknown user {user}") from None

    def item_vector(self, item: int) -> np.ndarray:
        try:
            return self.item[self._item_row[item]]
        except KeyError:
            raise LookupError(f"unknown item {item}") from None

    def item_matrix(self, items: Sequence[int]) -> np.ndarray:
        return np.stack([self.item_vector(v) for v in items]) if items else \
            np.zeros((0, self.dim))

    def user_row(self, user: int) -> int:
        try:
            return self._user_row[user]
        except KeyError:
            raise LookupError(f"unknown user {user}") from None

    def item_row(self, item: int) -> int:
        try:
            return self._item_row[item]
        except KeyError:
            raise LookupError(f"unknown item {item}") from None

    def history_image(self, user_vec: np.ndarray, history_items: Sequence[int],
                      rows: int) -> np.ndarray:
        """Stack history item embeddings (zero-padded to ``rows``) plus the user row."""
        image = np.zeros((rows + 1, self.dim))
        for i, item in enumerate(history_items):
            image[i] = self.item_vector(item)
        image[rows] = user_vec
        return image


def refresh_attribute_embeddings(store: EmbeddingStore, catalog: ItemCatalog) -> np.ndarray:
    """Derive attribute embeddings: row p is the mean item embedding over V[p].

    Attributes attached to no item get a zero row and a warning.
    """
    out = np.zeros((catalog.attribute_count, store.dim))
    for p in range(catalog.attribute_count):
        members = catalog.items_with(p)
        if not members:
            warnings.warn(f"attribute {p} has no items; using a zero embedding row")
            continue
        rows = [store.item_row(v) for v in members]
        out[p] = store.item[rows].mean(axis=0)
    return out


def belief_embedding(q: np.ndarray, attribute_embeddings: np.ndarray) -> np.ndarray:
    """Weighted sum of attribute embedding rows, weights given by ``q``."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != attribute_embeddings.shape[0]:
        raise ValueError(
            f"belief length {q.shape[-1]} != attribute count {attribute_embeddings.shape[0]}"
        )
    return q @ attribute_embeddings


def mask_attributes(b: np.ndarray, rate: float = 0.5,
                    seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Independently replace each component of ``b`` with 0.5 at ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    b = np.asarray(b, dtype=float)
    if rate == 0.0:
        return b.copy()
    if rate == 1.0:
        return np.full_like(b, 0.5)
    rng = np.random.default_rng(seed)
    masked = b.copy()
    masked[rng.random(b.shape) < rate] = 0.5
    return masked


def rec_loss(s_pos: float, s_neg: float, margin: float = 0.5) -> float:
    """Squared score of the true pair plus squared hinge on the negative."""
    return float(s_pos) ** 2 + max(margin - float(s_neg), 0.0) ** 2


@dataclass(frozen=True)
class RnConfig:
    dim: int = 64
    history_length: int = 5
    block1_channels: int = 64
    block2_channels: int = 128
    trunk_hidden: int = 256
    head_hidden: tuple[int, int] = (256, 128)
    kernel: int = 3

    @property
    def image_rows(self) -> int:
        return self.history_length + 1

    @property
    def flat_dim(self) -> int:
        height = -(-self.image_rows // 2)
        width = -(-self.dim // 2)
        return self.block2_channels * height * width


class RecommendationNetwork:
    """Scores (user, history, belief embedding, item) tuples.

    The trunk turns the history image plus the belief embedding into a
    preference summary; the head maps (summary, item embedding) to a scalar.
    """

    def __init__(self, config: RnConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.trunk = Sequential([
            Reshape((1, c.image_rows, c.dim)),
            ResidualBlock(1, c.block1_channels, c.kernel, 1, rng=rng),
            ResidualBlock(c.block1_channels, c.block2_channels, c.kernel, 2, rng=rng),
            Flatten(),
            Concat("belief"),
            Dense(c.flat_dim + c.dim, c.trunk_hidden, rng=rng),
            ReLU(),
            Dense(c.trunk_hidden, c.dim, rng=rng),
        ])
        h1, h2 = c.head_hidden
        self.head = Sequential([
            Dense(2 * c.dim, h1, rng=rng),
            ReLU(),
            Dense(h1, h2, rng=rng),
            ReLU(),
            Dense(h2, 1, rng=rng),
        ])

    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"trunk.{k}": v for k, v in self.trunk.named_params().items()}
        out.update({f"head.{k}": v for k, v in self.head.named_params().items()})
        return out

    def load_params(self, values: Mapping[str, np.ndarray]) -> None:
        trunk = {k[len("trunk."):]: v for k, v in values.items() if k.startswith("trunk.")}
        head = {k[len("head."):]: v for k, v in values.items() if k.startswith("head.")}
        self.trunk.load_params(trunk)
        self.head.load_params(head)

    def spec(self) -> dict:
        return {"trunk": self.trunk.spec(), "head": self.head.spec()}

    def preference_summary(self, images: np.ndarray, beliefs: np.ndarray,
                           mode: str = "eval", rng=None):
        """Trunk forward over a batch of flattened history images."""
        out, caches = self.trunk.forward(images, mode=mode, rng=rng,
                                         aux={"belief": beliefs})
        return out, caches

    def head_scores(self, summaries: np.ndarray, item_vecs: np.ndarray,
                    mode: str = "eval", rng=None):
        x = np.concatenate([summaries, item_vecs], axis=1)
        out, caches = self.head.forward(x, mode=mode, rng=rng)
        return out[:, 0], caches

    def score(self, store: EmbeddingStore, user: int, history_items: Sequence[int],
              item: int, belief_emb: np.ndarray,
              user_vec: np.ndarray | None = None) -> float:
        return float(self.score_items(store, user, history_items, [item], belief_emb,
                                      user_vec=user_vec)[0])

    def score_items(self, store: EmbeddingStore, user: int | None,
                    history_items: Sequence[int], items: Sequence[int],
                    belief_emb: np.ndarray,
                    user_vec: np.ndarray | None = None) -> np.ndarray:
        """Deterministic eval-mode scores for ``items`` under one context."""
        if user_vec is None:
            user_vec = store.user_vector(user)
        image = store.history_image(user_vec, history_items, self.config.history_length)
        flat = image.reshape(1, -1)
        summary, _ = self.preference_summary(flat, belief_emb.reshape(1, -1))
        summaries = np.repeat(summary, len(items), axis=0)
        item_vecs = store.item_matrix(list(items))
        scores, _ = self.head_scores(summaries, item_vecs)
        return scores

    def rank_candidates(self, store: EmbeddingStore, user: int | None,
                        history_items: Sequence[int], belief_emb: np.ndarray,
                        candidates: Sequence[int], k: int,
                        user_vec: np.ndarray | None = None) -> list[int]:
        """The ``min(k, |candidates|)`` lowest-scoring items, ties to smaller ids."""
        items = sorted(set(int(v) for v in candidates))
        if not items:
            raise EmptyCandidateError("cannot rank an empty candidate set")
        scores = self.score_items(store, user, history_items, items, belief_emb,
                                  user_vec=user_vec)
        ids = np.array(items)
        order = np.lexsort((ids, scores))
        return [int(ids[i]) for i in order[:k]]


@dataclass(frozen=True)
class RnTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    lr_min: float = 0.0
    mask_rate: float = 0.5
    margin: float = 0.5
    attr_refresh_every: int = 500
    holdout_fraction: float = 0.1
    seed: int = 123


def _split_holdout(pairs: Sequence[Interaction], fraction: float, rng) -> tuple[list, list]:
    order = rng.permutation(len(pairs))
    n_hold = int(len(pairs) * fraction)
    holdout = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]]
    return train, holdout


def _snapshot(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _restore(params: Mapping[str, np.ndarray], snapshot: Mapping[str, np.ndarray]) -> None:
    for k, v in params.items():
        v[...] = snapshot[k]


class _RnBatch:
    """Pre-resolved tensors for one minibatch of (user, item) training pairs."""

    def __init__(self, pairs, store, catalog, histories, mask_rate, rng, all_items):
        self.pairs = pairs
        self.users = [p.user for p in pairs]
        self.pos_items = [p.item for p in pairs]
        self.neg_items = []
        for p in pairs:
            while True:
                v_neg = int(all_items[rng.integers(len(all_items))])
                if v_neg != p.item:
                    break
            self.neg_items.append(v_neg)
        self.masked = np.stack([
            mask_attributes(catalog.binary_vector(p.item), mask_rate, rng)
            for p in pairs
        ])
        self.history_items = [histories[p.user].items for p in pairs]


def _rn_batch_loss(network: RecommendationNetwork, store: EmbeddingStore,
                   batch: _RnBatch, attr_emb: np.ndarray, margin: float,
                   with_grads: bool):
    """Forward (and optionally backward) pass of the margin loss over a batch.

    Returns ``(loss, grads)`` where grads maps parameter names (including
    ``user_embeddings`` / ``item_embeddings``) to gradient arrays.
    """
    cfg = network.config
    n = len(batch.pairs)
    images = np.stack([
        store.history_image(store.user_vector(u), items, cfg.history_length).ravel()
        for u, items in zip(batch.users, batch.history_items)
    ])
    beliefs = belief_embedding(batch.masked, attr_emb)
    summaries, trunk_caches = network.preference_summary(images, beliefs)
    pos_vecs = store.item_matrix(batch.pos_items)
    neg_vecs = store.item_matrix(batch.neg_items)
    s_pos, pos_caches = network.head_scores(summaries, pos_vecs)
    s_neg, neg_caches = network.head_scores(summaries, neg_vecs)
    hinge = np.maximum(margin - s_neg, 0.0)
    loss = float(np.mean(s_pos ** 2 + hinge ** 2))
    if not with_grads:
        return loss, None

    d_pos = (2.0 * s_pos / n)[:, None]
    d_neg = (-2.0 * hinge / n)[:, None]
    dim = cfg.dim
    grads: dict[str, np.ndarray] = {}
    d_summary = np.zeros_like(summaries)
    d_item = np.zeros_like(store.item)
    for tag, caches, d_out, item_list in (
        ("pos", pos_caches, d_pos, batch.pos_items),
        ("neg", neg_caches, d_neg, batch.neg_items),
    ):
        dx, head_grads, _ = network.head.backward(caches, d_out)
        for name, g in head_grads.items():
            key = f"head.{name}"
            grads[key] = grads.get(key, 0) + g
        d_summary += dx[:, :dim]
        for i, item in enumerate(item_list):
            d_item[store.item_row(item)] += dx[i, dim:]

    d_images, trunk_grads, _ = network.trunk.backward(trunk_caches, d_summary)
    for name, g in trunk_grads.items():
        grads[f"trunk.{name}"] = g
    d_user = np.zeros_like(store.user)
    d_images = d_images.reshape(n, cfg.image_rows, dim)
    for i, (u, items) in enumerate(zip(batch.users, batch.history_items)):
        for j, item in enumerate(items):
            d_item[store.item_row(item)] += d_images[i, j]
        d_user[store.user_row(u)] += d_images[i, cfg.history_length]
    grads["user_embeddings"] = d_user
    grads["item_embeddings"] = d_item
    return loss, grads


def train_rn(pairs: Sequence[Interaction], catalog: ItemCatalog,
             histories: Mapping[int, UserHistory], store: EmbeddingStore,
             config: RnTrainConfig = RnTrainConfig(),
             network: RecommendationNetwork | None = None,
             log_fn: Callable[[EpochRecord], None] | None = None,
             on_refresh: Callable[[int, np.ndarray], None] | None = None,
             ) -> tuple[RecommendationNetwork, np.ndarray, list[EpochRecord]]:
    """Fit the scoring network and embeddings with margin loss.

    Negatives are drawn uniformly from the catalog excluding the positive
    item. Attribute embeddings are derived at the start and re-derived after
    every ``attr_refresh_every``-th optimizer step (``on_refresh`` observes
    each refresh), staying fixed in between — they receive no gradients.
    Returns ``(network, attribute_embeddings, records)``; on a non-finite
    loss or gradient, parameters roll back to the last finite epoch and
    :class:`TrainingDiverged` is raised.
    """
    if network is None:
        network = RecommendationNetwork(
            replace(RnConfig(), dim=store.dim), seed=config.seed)
    if network.config.dim != store.dim:
        raise ValueError(
            f"network dim {network.config.dim} != store dim {store.dim}")
    rng = np.random.default_rng(config.seed)
    train_pairs, holdout = _split_holdout(list(pairs), config.holdout_fraction, rng)
    if not train_pairs:
        raise ValueError("no training pairs left after the holdout split")
    all_items = np.array(catalog.item_ids)
    attr_emb = refresh_attribute_embeddings(store, catalog)
    if on_refresh is not None:
        on_refresh(0, attr_emb)

    params = dict(network.named_params())
    params["user_embeddings"] = store.user
    params["item_embeddings"] = store.item
    optimizer = Adam(lr=config.lr)

    def holdout_loss():
        if not holdout:
            return None
        batch = _RnBatch(holdout, store, catalog, histories, config.mask_rate,
                         np.random.default_rng(config.seed + 1), all_items)
        loss, _ = _rn_batch_loss(network, store, batch, attr_emb, config.margin, False)
        return loss

    init_batch = _RnBatch(train_pairs[:min(len(train_pairs), config.batch_size)],
                          store, catalog, histories, config.mask_rate,
                          np.random.default_rng(config.seed + 2), all_items)
    init_loss, _ = _rn_batch_loss(network, store, init_batch, attr_emb,
                                  config.margin, False)
    records = [EpochRecord(0, init_loss, holdout_loss())]
    if log_fn:
        log_fn(records[0])

    batches_per_epoch = -(-len(train_pairs) // config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    snapshot = _snapshot(params)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        for b in range(batches_per_epoch):
            chunk = [train_pairs[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            batch = _RnBatch(chunk, store, catalog, histories, config.mask_rate,
                             rng, all_items)
            loss, grads = _rn_batch_loss(network, store, batch, attr_emb,
                                         config.margin, True)
            if not np.isfinite(loss):
                _restore(params, snapshot)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}", records)
            try:
                optimizer.step(params, grads, lr=cosine_lr(
                    step, total_steps, config.lr, config.lr_min))
            except NonFiniteGradientError as err:
                _restore(params, snapshot)
                raise TrainingDiverged(str(err), records) from err
            step += 1
            epoch_losses.append(loss)
            if config.attr_refresh_every > 0 and step % config.attr_refresh_every == 0:
                attr_emb = refresh_attribute_embeddings(store, catalog)
                if on_refresh is not None:
                    on_refresh(step, attr_emb)
        record = EpochRecord(epoch, float(np.mean(epoch_losses)), holdout_loss())
        records.append(record)
        if log_fn:
            log_fn(record)
        snapshot = _snapshot(params)
    return network, attr_emb, records
