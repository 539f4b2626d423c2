"""Belief tracking: the network that maps a user's profile to an
attribute-relation matrix, the belief update from partial feedback, the
per-attribute cross-entropy loss, and the training loop.

The relation matrix A is exactly symmetric with a unit diagonal, so an
attribute the user has confirmed (feedback 1) keeps belief 1 whenever the
off-diagonal contributions cancel. Beliefs are A·a clamped into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Interaction, ItemCatalog, UserHistory
from .nnkit import (
    Adam,
    Concat,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    NonFiniteGradientError,
    ReLU,
    Reshape,
    Sequential,
    cosine_lr,
)
from .recommender import (
    EmbeddingStore,
    EpochRecord,
    TrainingDiverged,
    _restore,
    _snapshot,
    _split_holdout,
    mask_attributes,
)

__all__ = [
    "BtnConfig",
    "BtnTrainConfig",
    "BeliefNetwork",
    "LOSS_EPS",
    "symmetrize_unit_diagonal",
    "predict_beliefs",
    "attribute_loss",
    "train_btn",
]

LOSS_EPS = 1e-6


def symmetrize_unit_diagonal(a_tilde: np.ndarray) -> np.ndarray:
    """Average a square matrix with its transpose, then force the diagonal to 1."""
    if a_tilde.ndim == 2:
        out = 0.5 * (a_tilde + a_tilde.T)
        np.fill_diagonal(out, 1.0)
        return out
    out = 0.5 * (a_tilde + np.swapaxes(a_tilde, -1, -2))
    idx = np.arange(a_tilde.shape[-1])
    out[..., idx, idx] = 1.0
    return out


def predict_beliefs(relation: np.ndarray, feedback: np.ndarray) -> np.ndarray:
    """Belief per attribute: the matrix-vector product clamped into [0, 1]."""
    feedback = np.asarray(feedback, dtype=float)
    if relation.shape[-1] != feedback.shape[-1]:
        raise ValueError(
            f"relation width {relation.shape[-1]} != feedback length {feedback.shape[-1]}"
        )
    if relation.ndim == 2 and feedback.ndim == 1:
        raw = relation @ feedback
    else:
        raw = np.einsum("...pq,...q->...p", relation, feedback)
    return np.clip(raw, 0.0, 1.0)


def attribute_loss(q: np.ndarray, b: np.ndarray) -> float:
    """Summed binary cross-entropy between beliefs and the true attribute vector.

    ``q`` is clamped into ``[LOSS_EPS, 1 - LOSS_EPS]`` first. For batched
    inputs the per-sample sums are averaged.
    """
    q = np.clip(np.asarray(q, dtype=float), LOSS_EPS, 1.0 - LOSS_EPS)
    b = np.asarray(b, dtype=float)
    per_attr = -(b * np.log(q) + (1.0 - b) * np.log(1.0 - q))
    if per_attr.ndim == 1:
        return float(per_attr.sum())
    return float(per_attr.sum(axis=-1).mean())


@dataclass(frozen=True)
class BtnConfig:
    attribute_count: int
    user_dim: int = 64
    history_length: int = 5
    conv_channels: int = 64
    conv_dense: int = 128
    hidden: tuple[int, int] = (512, 1024)
    dropout: float = 0.1
    kernel: int = 3


class BeliefNetwork:
    """Maps (user embedding, history attribute matrix) to the relation matrix.

    Two convolutions read the history's attribute rows, a dense layer
    compresses them, the user embedding is appended, and three dense layers
    expand to P² values that are reshaped and symmetrized into A. Dropout
    after each hidden dense layer doubles as the stochastic source for
    uncertainty sampling (mode ``"mc"``).
    """

    def __init__(self, config: BtnConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        p = c.attribute_count
        flat = c.conv_channels * c.history_length * p
        h1, h2 = c.hidden
        self.net = Sequential([
            Reshape((1, c.history_length, p)),
            Conv2d(1, c.conv_channels, c.kernel, 1, rng=rng),
            ReLU(),
            Conv2d(c.conv_channels, c.conv_channels, c.kernel, 1, rng=rng),
            ReLU(),
            Flatten(),
            Dense(flat, c.conv_dense, rng=rng),
            ReLU(),
            Dropout(c.dropout),
            Concat("user"),
            Dense(c.conv_dense + c.user_dim, h1, rng=rng),
            ReLU(),
            Dropout(c.dropout),
            Dense(h1, h2, rng=rng),
            ReLU(),
            Dropout(c.dropout),
            Dense(h2, p * p, rng=rng),
        ])

    def named_params(self) -> dict[str, np.ndarray]:
        return self.net.named_params()

    def load_params(self, values: Mapping[str, np.ndarray]) -> None:
        self.net.load_params(dict(values))

    def spec(self) -> dict:
        return {"layers": self.net.spec()}

    def _forward(self, histories: np.ndarray, user_vecs: np.ndarray,
                 mode: str, rng):
        p = self.config.attribute_count
        flat = histories.reshape(histories.shape[0], -1)
        out, caches = self.net.forward(flat, mode=mode, rng=rng,
                                       aux={"user": user_vecs})
        a_tilde = out.reshape(-1, p, p)
        return symmetrize_unit_diagonal(a_tilde), a_tilde, caches

    def relation_matrix(self, user_vec: np.ndarray, history_matrix: np.ndarray,
                        mode: str = "eval",
                        rng: np.random.Generator | None = None) -> np.ndarray:
        """Relation matrix for one user profile; deterministic in eval mode."""
        c = self.config
        if history_matrix.shape != (c.history_length, c.attribute_count):
            raise ValueError(
                f"history matrix must be {(c.history_length, c.attribute_count)}, "
                f"got {history_matrix.shape}"
            )
        relation, _, _ = self._forward(history_matrix[None], user_vec[None], mode, rng)
        return relation[0]

    def relation_matrices(self, user_vecs: np.ndarray, history_matrices: np.ndarray,
                          mode: str = "eval",
                          rng: np.random.Generator | None = None) -> np.ndarray:
        relation, _, _ = self._forward(history_matrices, user_vecs, mode, rng)
        return relation


@dataclass(frozen=True)
class BtnTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    lr_min: float = 0.0
    mask_rate: float = 0.5
    holdout_fraction: float = 0.1
    seed: int = 123


def _btn_batch_loss(network: BeliefNetwork, store: EmbeddingStore,
                    users: Sequence[int], targets: np.ndarray, fed: np.ndarray,
                    histories: Mapping[int, UserHistory], mode: str, rng,
                    with_grads: bool):
    """Loss (and gradients) of beliefs from masked feedback against targets."""
    n = len(users)
    user_vecs = np.stack([store.user_vector(u) for u in users])
    hist = np.stack([histories[u].matrix for u in users])
    relation, _, caches = network._forward(hist, user_vecs, mode, rng)
    raw = np.einsum("bpq,bq->bp", relation, fed)
    q = np.clip(raw, 0.0, 1.0)
    loss = attribute_loss(q, targets)
    if not with_grads:
        return loss, None, None

    qc = np.clip(q, LOSS_EPS, 1.0 - LOSS_EPS)
    d_q = (-(targets / qc) + (1.0 - targets) / (1.0 - qc)) / n
    flow = (raw > LOSS_EPS) & (raw < 1.0 - LOSS_EPS)
    d_raw = d_q * flow
    d_relation = np.einsum("bp,bq->bpq", d_raw, fed)
    # Through symmetrization: dÃ_ij = ½(dA_ij + dA_ji); overwritten diagonal
    # contributes nothing.
    d_tilde = 0.5 * (d_relation + np.swapaxes(d_relation, -1, -2))
    idx = np.arange(network.config.attribute_count)
    d_tilde[:, idx, idx] = 0.0
    _, param_grads, aux_grads = network.net.backward(
        caches, d_tilde.reshape(n, -1))
    d_user = np.zeros_like(store.user)
    for i, u in enumerate(users):
        d_user[store.user_row(u)] += aux_grads["user"][i]
    return loss, param_grads, d_user


def train_btn(pairs: Sequence[Interaction], catalog: ItemCatalog,
              histories: Mapping[int, UserHistory], store: EmbeddingStore,
              config: BtnTrainConfig = BtnTrainConfig(),
              network: BeliefNetwork | None = None,
              log_fn: Callable[[EpochRecord], None] | None = None,
              ) -> tuple[BeliefNetwork, list[EpochRecord]]:
    """Fit the belief network on (user, item) pairs from the training log.

    Each pair's feedback input is the item's attribute vector with every
    component independently masked to 0.5 at ``mask_rate``, so the network
    sees the partial-knowledge inputs it will face mid-conversation; the
    target stays the full attribute vector. On a non-finite loss or
    gradient, parameters roll back to the last finite epoch and
    :class:`TrainingDiverged` is raised.
    """
    if network is None:
        network = BeliefNetwork(
            BtnConfig(attribute_count=catalog.attribute_count, user_dim=store.dim),
            seed=config.seed,
        )
    rng = np.random.default_rng(config.seed)
    train_pairs, holdout = _split_holdout(list(pairs), config.holdout_fraction, rng)
    if not train_pairs:
        raise ValueError("no training pairs left after the holdout split")

    params = dict(network.named_params())
    params["user_embeddings"] = store.user
    optimizer = Adam(lr=config.lr)

    def batch_tensors(chunk, mask_rng):
        users = [p.user for p in chunk]
        targets = np.stack([catalog.binary_vector(p.item) for p in chunk])
        fed = np.stack([
            mask_attributes(catalog.binary_vector(p.item), config.mask_rate, mask_rng)
            for p in chunk
        ])
        return users, targets, fed

    def eval_loss(chunk, seed_offset):
        if not chunk:
            return None
        users, targets, fed = batch_tensors(
            chunk, np.random.default_rng(config.seed + seed_offset))
        loss, _, _ = _btn_batch_loss(network, store, users, targets, fed,
                                     histories, "eval", None, False)
        return loss

    init_train = eval_loss(train_pairs[:config.batch_size], 2)
    records = [EpochRecord(0, init_train, eval_loss(holdout, 1))]
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
            chunk = [train_pairs[i]
                     for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            users, targets, fed = batch_tensors(chunk, rng)
            loss, param_grads, d_user = _btn_batch_loss(
                network, store, users, targets, fed, histories, "train", rng, True)
            if not np.isfinite(loss):
                _restore(params, snapshot)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}", records)
            grads = dict(param_grads)
            grads["user_embeddings"] = d_user
            try:
                optimizer.step(params, grads, lr=cosine_lr(
                    step, total_steps, config.lr, config.lr_min))
            except NonFiniteGradientError as err:
                _restore(params, snapshot)
                raise TrainingDiverged(str(err), records) from err
            step += 1
            epoch_losses.append(loss)
        record = EpochRecord(epoch, float(np.mean(epoch_losses)), eval_loss(holdout, 1))
        records.append(record)
        if log_fn:
            log_fn(record)
        snapshot = _snapshot(params)
    return network, records
