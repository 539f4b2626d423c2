"""Dataset ingestion: catalogs, interaction logs, splits, and user histories.

Input files are UTF-8 tab-separated values; lines starting with ``#`` are
comments. Interactions are ``user<TAB>item[<TAB>weight]`` where the weight
column holds either a timestamp or a play count depending on the history
policy. Attributes are ``item<TAB>attribute`` pairs with attribute ids
forming a dense range ``0..P-1``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "Interaction",
    "ItemCatalog",
    "SplitConfig",
    "UserHistory",
    "DatasetManifest",
    "Dataset",
    "HISTORY_POLICIES",
    "load_catalog",
    "save_catalog",
    "load_interactions",
    "split_interactions",
    "select_history",
    "build_histories",
    "load_manifest",
    "load_dataset",
]

HISTORY_POLICIES = ("latest-by-timestamp", "most-frequent")

DEFAULT_HISTORY_LENGTH = 5


class DataFormatError(ValueError):
    """An input file or record violates the dataset contract."""


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    weight: float | None = None


class ItemCatalog:
    """Items with binary attribute vectors and the inverted attribute index.

    Every item must carry at least one attribute. ``attribute_count`` may
    exceed the largest id present (useful for programmatic construction);
    the file loader additionally requires the ids to be dense.
    """

    def __init__(self, attributes_by_item: Mapping[int, Iterable[int]],
                 attribute_count: int | None = None):
        attrs: dict[int, frozenset[int]] = {}
        max_attr = -1
        for item, values in attributes_by_item.items():
            item = int(item)
            values = frozenset(int(p) for p in values)
            if not values:
                raise DataFormatError(f"item {item} has no attributes")
            if min(values) < 0:
                raise DataFormatError(f"item {item} has a negative attribute id")
            attrs[item] = values
            max_attr = max(max_attr, max(values))
        if not attrs:
            raise DataFormatError("catalog is empty")
        count = max_attr + 1 if attribute_count is None else int(attribute_count)
        if count <= max_attr:
            raise DataFormatError(
                f"attribute_count {count} is lower than max attribute id {max_attr}"
            )
        self._attributes = attrs
        self.attribute_count = count
        self.item_ids: tuple[int, ...] = tuple(sorted(attrs))
        index: dict[int, set[int]] = {p: set() for p in range(count)}
        for item, values in attrs.items():
            for p in values:
                index[p].add(item)
        self._index = {p: frozenset(members) for p, members in index.items()}

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item: int) -> bool:
        return item in self._attributes

    def attributes_of(self, item: int) -> frozenset[int]:
        return self._attributes[item]

    def items_with(self, attribute: int) -> frozenset[int]:
        return self._index[attribute]

    def has_attribute(self, item: int, attribute: int) -> bool:
        return attribute in self._attributes[item]

    def binary_vector(self, item: int) -> np.ndarray:
        vec = np.zeros(self.attribute_count)
        vec[list(self._attributes[item])] = 1.0
        return vec

    def binary_matrix(self, items: Sequence[int], rows: int | None = None) -> np.ndarray:
        """Stack b(v) rows for ``items``, zero-padding up to ``rows`` if given."""
        n = len(items) if rows is None else int(rows)
        if n < len(items):
            raise DataFormatError(f"cannot fit {len(items)} items into {n} rows")
        out = np.zeros((n, self.attribute_count))
        for i, item in enumerate(items):
            out[i, list(self._attributes[item])] = 1.0
        return out


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 123

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise DataFormatError(f"need three non-negative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataFormatError(f"ratios must sum to 1, got {self.ratios}")


@dataclass(frozen=True)
class UserHistory:
    user: int
    items: tuple[int, ...]
    matrix: np.ndarray  # (k, P); zero rows pad histories shorter than k

    def __post_init__(self):
        if len(self.items) > self.matrix.shape[0]:
            raise DataFormatError("history has more items than matrix rows")


def _read_tsv(path: str | Path, expected_columns: tuple[int, ...]) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in expected_columns:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {expected_columns} columns, got {len(parts)}"
                )
            rows.append(parts)
    return rows


def _parse_int(token: str, path, lineno_hint: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise DataFormatError(f"{path}: {lineno_hint} is not an integer: {token!r}") from None


def load_catalog(path: str | Path) -> ItemCatalog:
    """Read an ``item<TAB>attribute`` file into a catalog.

    Attribute ids must be the dense range ``0..P-1``.
    """
    attrs: dict[int, set[int]] = defaultdict(set)
    for item_tok, attr_tok in _read_tsv(path, (2,)):
        item = _parse_int(item_tok, path, "item id")
        attr = _parse_int(attr_tok, path, "attribute id")
        attrs[item].add(attr)
    catalog = ItemCatalog(attrs)
    seen = {p for values in attrs.values() for p in values}
    missing = sorted(set(range(catalog.attribute_count)) - seen)
    if missing:
        raise DataFormatError(f"{path}: attribute ids are not dense, missing {missing}")
    return catalog


def save_catalog(path: str | Path, catalog: ItemCatalog) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for item in catalog.item_ids:
            for attr in sorted(catalog.attributes_of(item)):
                fh.write(f"{item}\t{attr}\n")


def load_interactions(path: str | Path) -> list[Interaction]:
    """Read ``user<TAB>item[<TAB>weight]`` records in file order."""
    records = []
    for parts in _read_tsv(path, (2, 3)):
        user = _parse_int(parts[0], path, "user id")
        item = _parse_int(parts[1], path, "item id")
        weight = None
        if len(parts) == 3:
            try:
                weight = float(parts[2])
            except ValueError:
                raise DataFormatError(
                    f"{path}: weight is not numeric: {parts[2]!r}"
                ) from None
        records.append(Interaction(user, item, weight))
    if not records:
        raise DataFormatError(f"{path}: no interaction records")
    return records


def _apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total * ratios`` to integers summing to total."""
    exact = [total * r for r in ratios]
    sizes = [int(e) for e in exact]
    leftover = total - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_interactions(log: Sequence[Interaction], config: SplitConfig = SplitConfig(),
                       ) -> tuple[list[Interaction], list[Interaction], list[Interaction]]:
    """Shuffle records with the configured seed and cut train/validation/test."""
    if not log:
        raise DataFormatError("cannot split an empty interaction log")
    order = np.random.default_rng(config.seed).permutation(len(log))
    shuffled = [log[i] for i in order]
    n_train, n_val, _ = _apportion(len(log), config.ratios)
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


def select_history(user: int, log: Sequence[Interaction], catalog: ItemCatalog,
                   k: int = DEFAULT_HISTORY_LENGTH,
                   policy: str = "latest-by-timestamp") -> UserHistory:
    """Pick the user's representative items and build the padded attribute matrix.

    ``latest-by-timestamp`` keeps each item's newest timestamp and sorts by it
    descending; ``most-frequent`` sums the weight column (falling back to row
    counts when absent) and sorts descending. Ties break toward the smaller
    item id. Users without interactions get an all-zero matrix.
    """
    if policy not in HISTORY_POLICIES:
        raise DataFormatError(f"unknown history policy {policy!r}")
    score: dict[int, float] = defaultdict(float)
    for rec in log:
        if rec.user != user:
            continue
        if policy == "latest-by-timestamp":
            if rec.weight is None:
                raise DataFormatError(
                    f"latest-by-timestamp needs timestamps; user {user}, item {rec.item}"
                )
            score[rec.item] = max(score.get(rec.item, -np.inf), rec.weight)
        else:
            score[rec.item] += 1.0 if rec.weight is None else rec.weight
    ranked = sorted(score, key=lambda item: (-score[item], item))[:k]
    items = tuple(ranked)
    return UserHistory(user, items, catalog.binary_matrix(items, rows=k))


def build_histories(log: Sequence[Interaction], catalog: ItemCatalog,
                    k: int = DEFAULT_HISTORY_LENGTH,
                    policy: str = "latest-by-timestamp") -> dict[int, UserHistory]:
    users = sorted({rec.user for rec in log})
    return {u: select_history(u, log, catalog, k=k, policy=policy) for u in users}


@dataclass(frozen=True)
class DatasetManifest:
    interactions_path: Path
    attributes_path: Path
    history_policy: str = "latest-by-timestamp"
    history_length: int = DEFAULT_HISTORY_LENGTH

    def __post_init__(self):
        if self.history_policy not in HISTORY_POLICIES:
            raise DataFormatError(f"unknown history policy {self.history_policy!r}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON manifest naming the data files and the history policy."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        interactions = raw["interactions"]
        attributes = raw["attributes"]
    except KeyError as err:
        raise DataFormatError(f"{path}: manifest missing key {err}") from None
    base = path.parent
    return DatasetManifest(
        interactions_path=base / interactions,
        attributes_path=base / attributes,
        history_policy=raw.get("history_policy", "latest-by-timestamp"),
        history_length=int(raw.get("history_length", DEFAULT_HISTORY_LENGTH)),
    )


@dataclass(frozen=True)
class Dataset:
    catalog: ItemCatalog
    interactions: list[Interaction]
    manifest: DatasetManifest
    users: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(sorted({r.user for r in self.interactions})))

    def split(self, config: SplitConfig = SplitConfig()):
        return split_interactions(self.interactions, config)

    def histories(self, log: Sequence[Interaction] | None = None) -> dict[int, UserHistory]:
        source = self.interactions if log is None else log
        return build_histories(
            source, self.catalog, k=self.manifest.history_length,
            policy=self.manifest.history_policy,
        )


def load_dataset(manifest: DatasetManifest | str | Path) -> Dataset:
    """Load catalog and interactions, checking that every item is cataloged."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    catalog = load_catalog(manifest.attributes_path)
    interactions = load_interactions(manifest.interactions_path)
    for rec in interactions:
        if rec.item not in catalog:
            raise DataFormatError(
                f"interaction references item {rec.item} missing from the catalog"
            )
    return Dataset(catalog=catalog, interactions=interactions, manifest=manifest)
