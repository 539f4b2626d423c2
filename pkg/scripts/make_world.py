#!/usr/bin/env python3
"""Generate a synthetic clustered world and write it to disk.

Produces ``attributes.tsv``, ``interactions.tsv``, and ``manifest.json`` in
the output directory, ready to be named by a run config's ``manifest`` field.

Example:
    python3 scripts/make_world.py --out data/world --items 200 --seed 123
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from convrec.synth import WorldConfig, generate_world, write_world


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--items", type=int, default=200)
    parser.add_argument("--attributes", type=int, default=12)
    parser.add_argument("--users", type=int, default=80)
    parser.add_argument("--clusters", type=int, default=3)
    parser.add_argument("--base-attributes", type=int, default=2)
    parser.add_argument("--niche-attributes", type=int, default=2)
    parser.add_argument("--cluster-rate", type=float, default=0.8)
    parser.add_argument("--base-rate", type=float, default=0.9)
    parser.add_argument("--niche-rate", type=float, default=0.04)
    parser.add_argument("--cross-rate", type=float, default=0.05)
    parser.add_argument("--affinity", type=float, default=0.85)
    parser.add_argument("--per-user", type=int, default=30)
    parser.add_argument("--seed", type=int, default=123)
    parser.add_argument("--history-policy", default="latest-by-timestamp",
                        choices=["latest-by-timestamp", "most-frequent"])
    args = parser.parse_args(argv)

    world = generate_world(WorldConfig(
        items=args.items, attributes=args.attributes, users=args.users,
        clusters=args.clusters, base_attributes=args.base_attributes,
        niche_attributes=args.niche_attributes,
        cluster_attribute_rate=args.cluster_rate,
        base_attribute_rate=args.base_rate,
        niche_attribute_rate=args.niche_rate, cross_rate=args.cross_rate,
        within_cluster_affinity=args.affinity,
        interactions_per_user=args.per_user, seed=args.seed))
    manifest = write_world(args.out, world, history_policy=args.history_policy)

    catalog = world.catalog
    per_item = [len(catalog.attributes_of(v)) for v in catalog.item_ids]
    cluster_sizes = Counter(world.item_cluster.values())
    print(f"wrote {manifest}")
    print(f"  items: {len(catalog.item_ids)}  attributes: {catalog.attribute_count}"
          f"  users: {len({r.user for r in world.interactions})}"
          f"  interactions: {len(world.interactions)}")
    print(f"  attributes per item: min {min(per_item)} / mean "
          f"{sum(per_item) / len(per_item):.1f} / max {max(per_item)}")
    print(f"  cluster sizes: {sorted(cluster_sizes.values(), reverse=True)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
