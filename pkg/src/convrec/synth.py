"""Seeded synthetic worlds with planted attribute co-occurrence.

Items belong to clusters that share a block of attributes, a few base
attributes appear on almost every item, and a few niche attributes appear on
almost none. Users favor one cluster, so histories carry signal about both
the attribute correlations and the plausible targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Interaction, ItemCatalog, save_catalog

__all__ = ["WorldConfig", "SyntheticWorld", "generate_world", "write_world"]


@dataclass(frozen=True)
class WorldConfig:
    items: int = 200
    attributes: int = 12
    users: int = 80
    clusters: int = 3
    base_attributes: int = 2
    niche_attributes: int = 2
    cluster_attribute_rate: float = 0.8
    base_attribute_rate: float = 0.9
    niche_attribute_rate: float = 0.04
    cross_rate: float = 0.05
    interactions_per_user: int = 30
    within_cluster_affinity: float = 0.85
    seed: int = 123

    def __post_init__(self):
        blocks = self.attributes - self.base_attributes - self.niche_attributes
        if blocks < self.clusters:
            raise ValueError(
                f"{self.attributes} attributes cannot host {self.clusters} clusters "
                f"plus {self.base_attributes} base and {self.niche_attributes} niche"
            )


@dataclass(frozen=True)
class SyntheticWorld:
    catalog: ItemCatalog
    interactions: list[Interaction]
    item_cluster: dict[int, int]
    user_cluster: dict[int, int]
    cluster_attributes: list[tuple[int, ...]]


def _attribute_blocks(config: WorldConfig) -> tuple[list[int], list[tuple[int, ...]], list[int]]:
    base = list(range(config.base_attributes))
    niche = list(range(config.attributes - config.niche_attributes, config.attributes))
    pool = list(range(config.base_attributes, config.attributes - config.niche_attributes))
    blocks = [tuple(pool[i::config.clusters]) for i in range(config.clusters)]
    return base, blocks, niche


def generate_world(config: WorldConfig = WorldConfig()) -> SyntheticWorld:
    rng = np.random.default_rng(config.seed)
    base, blocks, niche = _attribute_blocks(config)
    other_attrs = {
        c: [p for oc, block in enumerate(blocks) if oc != c for p in block]
        for c in range(config.clusters)
    }

    attributes_by_item: dict[int, set[int]] = {}
    item_cluster: dict[int, int] = {}
    for item in range(config.items):
        cluster = item % config.clusters
        item_cluster[item] = cluster
        attrs = {p for p in base if rng.random() < config.base_attribute_rate}
        block = blocks[cluster]
        attrs |= {p for p in block if rng.random() < config.cluster_attribute_rate}
        if not attrs & set(block):  # keep every item attached to its cluster
            attrs.add(block[int(rng.integers(len(block)))])
        attrs |= {p for p in other_attrs[cluster] if rng.random() < config.cross_rate}
        attrs |= {p for p in niche if rng.random() < config.niche_attribute_rate}
        attributes_by_item[item] = attrs

    # Every attribute id must be attached to at least one item.
    for p in range(config.attributes):
        if not any(p in attrs for attrs in attributes_by_item.values()):
            attributes_by_item[int(rng.integers(config.items))].add(p)

    catalog = ItemCatalog(attributes_by_item, attribute_count=config.attributes)

    items_in_cluster = {
        c: [v for v in range(config.items) if item_cluster[v] == c]
        for c in range(config.clusters)
    }
    interactions: list[Interaction] = []
    user_cluster: dict[int, int] = {}
    timestamp = 0
    for user in range(config.users):
        cluster = int(rng.integers(config.clusters))
        user_cluster[user] = cluster
        for _ in range(config.interactions_per_user):
            if rng.random() < config.within_cluster_affinity:
                pool = items_in_cluster[cluster]
            else:
                pool = items_in_cluster[int(rng.integers(config.clusters))]
            item = int(pool[int(rng.integers(len(pool)))])
            timestamp += 1
            interactions.append(Interaction(user, item, float(timestamp)))

    return SyntheticWorld(catalog, interactions, item_cluster, user_cluster,
                          [tuple(b) for b in blocks])


def write_world(out_dir: str | Path, world: SyntheticWorld,
                history_policy: str = "latest-by-timestamp") -> Path:
    """Write TSV files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_catalog(out_dir / "attributes.tsv", world.catalog)
    with open(out_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for rec in world.interactions:
            fh.write(f"{rec.user}\t{rec.item}\t{rec.weight:g}\n")
    manifest = out_dir / "manifest.json"
    manifest.write_text(
        '{\n'
        '  "interactions": "interactions.tsv",\n'
        '  "attributes": "attributes.tsv",\n'
        f'  "history_policy": "{history_policy}"\n'
        '}\n',
        encoding="utf-8",
    )
    return manifest
