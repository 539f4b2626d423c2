"""Command-line entry point.

Subcommands cover the full workflow: ``train-btn`` and ``train-rn`` fit the
two networks and write checkpoints, ``simulate`` plays seeded episodes
against the truthful simulator and writes metrics plus transcripts,
``evaluate`` recomputes metrics from a transcript file, ``ablate`` compares
the question-selection strategies side by side, ``export-relations`` dumps
the learned attribute-relation grid, and ``serve`` starts the HTTP session
API.

Every run echoes its effective configuration and honors ``--seed``; given
the same inputs and seed, output files are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .belief import BeliefNetwork, BtnConfig, BtnTrainConfig, train_btn
from .data import (
    DataFormatError,
    Dataset,
    SplitConfig,
    load_dataset,
    load_manifest,
)
from .dialogue import PolicyConfig
from .nnkit import load_checkpoint, save_checkpoint
from .recommender import (
    EmbeddingStore,
    EpochRecord,
    RecommendationNetwork,
    RnConfig,
    RnTrainConfig,
    train_rn,
)
from .service import ModelSnapshot, create_app
from .simulation import (
    EpisodeResult,
    MetricsReport,
    STRATEGIES,
    engine_for_strategy,
    evaluate,
    run_episodes,
)

__all__ = ["ConfigError", "RunConfig", "load_run_config", "main"]

QUESTION_STRATEGIES = ("uncertainty", "random", "most-inf", "max-entropy",
                       "highest-score")


class ConfigError(ValueError):
    """A run configuration failed validation; message lists the fields."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs beyond the dataset files themselves."""

    manifest: str
    alpha: float = 0.1
    slate_size: int = 10
    max_turns: int = 15
    mc_passes: int = 10
    margin: float = 0.5
    learning_rate: float = 0.001
    epochs: int = 20
    batch_size: int = 128
    attr_refresh_every: int = 500
    mask_rate: float = 0.5
    holdout_fraction: float = 0.1
    embedding_dim: int = 64
    dropout: float = 0.1
    seed: int = 123
    history_policy: str | None = None  # None: use the manifest's
    history_length: int | None = None  # None: use the manifest's
    btn_conv_channels: int = 64
    btn_conv_dense: int = 128
    btn_hidden: tuple[int, int] = (512, 1024)
    rn_block1_channels: int = 64
    rn_block2_channels: int = 128
    rn_trunk_hidden: int = 256
    rn_head_hidden: tuple[int, int] = (256, 128)

    def __post_init__(self):
        problems = []
        if not self.manifest:
            problems.append("manifest: a dataset manifest path is required")
        if not 0.0 <= self.alpha <= 0.5:
            problems.append(f"alpha: must be in [0, 0.5], got {self.alpha}")
        for name in ("slate_size", "mc_passes", "batch_size",
                     "attr_refresh_every", "embedding_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.max_turns < 2:
            problems.append(f"max_turns: must be >= 2, got {self.max_turns}")
        if self.epochs < 0:
            problems.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.margin < 0:
            problems.append(f"margin: must be >= 0, got {self.margin}")
        for name in ("mask_rate", "holdout_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0 and not (
                    name == "mask_rate" and getattr(self, name) == 1.0):
                problems.append(
                    f"{name}: must be in [0, 1), got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.history_length is not None and self.history_length < 1:
            problems.append(
                f"history_length: must be >= 1, got {self.history_length}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    def policy(self) -> PolicyConfig:
        return PolicyConfig(alpha=self.alpha, slate_size=self.slate_size,
                            max_turns=self.max_turns, mc_passes=self.mc_passes)


_TUPLE_FIELDS = ("btn_hidden", "rn_head_hidden")


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a JSON file plus flag overrides.

    Unknown keys and invalid values raise :class:`ConfigError` naming the
    offending fields.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(
            f"{path}: unknown config fields: {', '.join(unknown)}")
    merged = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    for key in _TUPLE_FIELDS:
        if key in merged:
            merged[key] = tuple(int(v) for v in merged[key])
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _echo_config(config: RunConfig, extra: dict | None = None) -> None:
    effective = asdict(config)
    effective.update(extra or {})
    print("configuration:")
    print(json.dumps(effective, indent=2, sort_keys=True, default=str))


def _load_run_dataset(config: RunConfig) -> Dataset:
    manifest = load_manifest(config.manifest)
    if config.history_policy is not None:
        manifest = replace(manifest, history_policy=config.history_policy)
    if config.history_length is not None:
        manifest = replace(manifest, history_length=config.history_length)
    return load_dataset(manifest)


def _epoch_printer(record: EpochRecord) -> None:
    holdout = ("" if record.holdout_loss is None
               else f"  holdout {record.holdout_loss:.6f}")
    print(f"epoch {record.epoch:>3}  train {record.train_loss:.6f}{holdout}")


# --------------------------------------------------------------------------
# checkpoint files

def _store_path(out_dir: Path) -> Path:
    return out_dir / "embeddings.npz"


def _save_store(out_dir: Path, store: EmbeddingStore) -> None:
    save_checkpoint(_store_path(out_dir),
                    {"user": store.user, "item": store.item},
                    {"user_ids": list(store.user_ids),
                     "item_ids": list(store.item_ids), "dim": store.dim})


def _load_store(out_dir: Path) -> EmbeddingStore:
    arrays, meta = load_checkpoint(_store_path(out_dir))
    store = EmbeddingStore(meta["user_ids"], meta["item_ids"], dim=meta["dim"])
    store.user[...] = arrays["user"]
    store.item[...] = arrays["item"]
    return store


def _save_btn(out_dir: Path, net: BeliefNetwork) -> None:
    save_checkpoint(out_dir / "btn.npz", net.named_params(),
                    {"config": asdict(net.config)})


def _load_btn(out_dir: Path) -> BeliefNetwork:
    arrays, meta = load_checkpoint(out_dir / "btn.npz")
    raw = dict(meta["config"])
    raw["hidden"] = tuple(raw["hidden"])
    net = BeliefNetwork(BtnConfig(**raw))
    net.load_params(arrays)
    return net


def _save_rn(out_dir: Path, net: RecommendationNetwork,
             attr_emb: np.ndarray) -> None:
    save_checkpoint(out_dir / "rn.npz", net.named_params(),
                    {"config": asdict(net.config)})
    save_checkpoint(out_dir / "attribute_embeddings.npz", {"rows": attr_emb},
                    {"attribute_count": int(attr_emb.shape[0])})


def _load_rn(out_dir: Path) -> tuple[RecommendationNetwork, np.ndarray]:
    arrays, meta = load_checkpoint(out_dir / "rn.npz")
    raw = dict(meta["config"])
    raw["head_hidden"] = tuple(raw["head_hidden"])
    net = RecommendationNetwork(RnConfig(**raw))
    net.load_params(arrays)
    attr_arrays, _ = load_checkpoint(out_dir / "attribute_embeddings.npz")
    return net, attr_arrays["rows"]


def _load_or_init_store(out_dir: Path, dataset: Dataset,
                        config: RunConfig) -> EmbeddingStore:
    if _store_path(out_dir).exists():
        return _load_store(out_dir)
    return EmbeddingStore(dataset.users, dataset.catalog.item_ids,
                          dim=config.embedding_dim, seed=config.seed)


def _require_artifacts(out_dir: Path, *names: str) -> None:
    missing = [name for name in names if not (out_dir / name).exists()]
    if missing:
        raise ConfigError(
            f"missing artifacts in {out_dir}: {', '.join(missing)} "
            f"(run train-btn and train-rn first)")


# --------------------------------------------------------------------------
# metrics output

def _write_metrics_csv(path: Path, reports: dict[str, MetricsReport]) -> None:
    """One success-rate column per named report, plus summary rows."""
    names = list(reports)
    turns = len(next(iter(reports.values())).success_rate_at)
    lines = ["turn," + ",".join(names)]
    for t in range(1, turns + 1):
        row = ",".join(f"{reports[n].sr_at(t):.6f}" for n in names)
        lines.append(f"{t},{row}")
    lines.append("average_turns," + ",".join(
        f"{reports[n].average_turns:.6f}" for n in names))
    lines.append("episodes," + ",".join(str(reports[n].episodes) for n in names))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _print_metrics(reports: dict[str, MetricsReport]) -> None:
    names = list(reports)
    header = "turn  " + "  ".join(f"{n:>13}" for n in names)
    print(header)
    turns = len(next(iter(reports.values())).success_rate_at)
    for t in range(1, turns + 1):
        row = "  ".join(f"{reports[n].sr_at(t):>13.4f}" for n in names)
        print(f"{t:>4}  {row}")
    at_row = "  ".join(f"{reports[n].average_turns:>13.4f}" for n in names)
    print(f"  AT  {at_row}")
    episodes = next(iter(reports.values())).episodes
    print(f"({episodes} episodes per column)")


def _write_transcript(path: Path, results: list[EpisodeResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")


def _read_transcript(path: Path) -> list[EpisodeResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                results.append(EpisodeResult.from_dict(json.loads(line)))
    return results


# --------------------------------------------------------------------------
# model assembly shared by simulate / ablate / export-relations / serve

def _assemble(config: RunConfig, out_dir: Path):
    _require_artifacts(out_dir, "embeddings.npz", "btn.npz", "rn.npz",
                       "attribute_embeddings.npz")
    dataset = _load_run_dataset(config)
    train, _, test = dataset.split(SplitConfig(seed=config.seed))
    histories = dataset.histories(train)
    store = _load_store(out_dir)
    btn = _load_btn(out_dir)
    rn, attr_emb = _load_rn(out_dir)
    return dataset, train, test, histories, store, btn, rn, attr_emb


def _run_strategy(name: str, config: RunConfig, dataset, test, histories,
                  store, btn, rn, attr_emb, jobs: int):
    engine = engine_for_strategy(
        name, dataset.catalog, store, btn, rn, attr_emb, histories,
        config=config.policy())
    pairs = [(rec.user, rec.item) for rec in test]
    results = run_episodes(engine, pairs, seed=config.seed, jobs=jobs)
    return results, evaluate(results, max_turns=config.max_turns)


# --------------------------------------------------------------------------
# subcommands

def cmd_train_btn(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "train-btn", "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_run_dataset(config)
    train, _, _ = dataset.split(SplitConfig(seed=config.seed))
    histories = dataset.histories(train)
    store = _load_or_init_store(out_dir, dataset, config)
    network = BeliefNetwork(
        BtnConfig(attribute_count=dataset.catalog.attribute_count,
                  user_dim=store.dim,
                  history_length=dataset.manifest.history_length,
                  conv_channels=config.btn_conv_channels,
                  conv_dense=config.btn_conv_dense,
                  hidden=config.btn_hidden, dropout=config.dropout),
        seed=config.seed)
    network, _ = train_btn(
        train, dataset.catalog, histories, store,
        BtnTrainConfig(epochs=config.epochs, batch_size=config.batch_size,
                       lr=config.learning_rate, mask_rate=config.mask_rate,
                       holdout_fraction=config.holdout_fraction,
                       seed=config.seed),
        network=network, log_fn=_epoch_printer)
    _save_btn(out_dir, network)
    _save_store(out_dir, store)
    print(f"wrote {out_dir / 'btn.npz'} and {_store_path(out_dir)}")
    return 0


def cmd_train_rn(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "train-rn", "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_run_dataset(config)
    train, _, _ = dataset.split(SplitConfig(seed=config.seed))
    histories = dataset.histories(train)
    store = _load_or_init_store(out_dir, dataset, config)
    network = RecommendationNetwork(
        RnConfig(dim=store.dim,
                 history_length=dataset.manifest.history_length,
                 block1_channels=config.rn_block1_channels,
                 block2_channels=config.rn_block2_channels,
                 trunk_hidden=config.rn_trunk_hidden,
                 head_hidden=config.rn_head_hidden),
        seed=config.seed)
    network, attr_emb, _ = train_rn(
        train, dataset.catalog, histories, store,
        RnTrainConfig(epochs=config.epochs, batch_size=config.batch_size,
                      lr=config.learning_rate, mask_rate=config.mask_rate,
                      margin=config.margin,
                      attr_refresh_every=config.attr_refresh_every,
                      holdout_fraction=config.holdout_fraction,
                      seed=config.seed),
        network=network, log_fn=_epoch_printer)
    _save_rn(out_dir, network, attr_emb)
    _save_store(out_dir, store)
    print(f"wrote {out_dir / 'rn.npz'}, "
          f"{out_dir / 'attribute_embeddings.npz'} and {_store_path(out_dir)}")
    return 0


def cmd_simulate(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "simulate", "strategy": args.strategy,
                          "jobs": args.jobs, "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, _, test, histories, store, btn, rn, attr_emb = _assemble(
        config, out_dir)
    results, report = _run_strategy(args.strategy, config, dataset, test,
                                    histories, store, btn, rn, attr_emb,
                                    args.jobs)
    _write_metrics_csv(out_dir / "metrics.csv", {args.strategy: report})
    _write_transcript(out_dir / "transcript.jsonl", results)
    _print_metrics({args.strategy: report})
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'transcript.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    results = _read_transcript(Path(args.transcript))
    report = evaluate(results, max_turns=args.max_turns)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out_dir / "metrics.csv", {"recomputed": report})
    _print_metrics({"recomputed": report})
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "ablate", "jobs": args.jobs,
                          "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, _, test, histories, store, btn, rn, attr_emb = _assemble(
        config, out_dir)
    reports: dict[str, MetricsReport] = {}
    for name in QUESTION_STRATEGIES:
        results, report = _run_strategy(name, config, dataset, test,
                                        histories, store, btn, rn, attr_emb,
                                        args.jobs)
        reports[name] = report
        _write_transcript(out_dir / f"transcript_{name}.jsonl", results)
    _write_metrics_csv(out_dir / "metrics.csv", reports)
    _print_metrics(reports)
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_export_relations(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "export-relations", "user": args.user,
                          "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _require_artifacts(out_dir, "embeddings.npz", "btn.npz")
    dataset = _load_run_dataset(config)
    train, _, _ = dataset.split(SplitConfig(seed=config.seed))
    histories = dataset.histories(train)
    store = _load_store(out_dir)
    btn = _load_btn(out_dir)
    k = dataset.manifest.history_length
    if args.user is None:
        user_vec = np.zeros(store.dim)
        history = np.zeros((k, dataset.catalog.attribute_count))
    else:
        user_vec = store.user_vector(args.user)
        record = histories.get(args.user)
        history = (record.matrix if record is not None
                   else np.zeros((k, dataset.catalog.attribute_count)))
    relation = btn.relation_matrix(user_vec, history)
    path = out_dir / "relations.csv"
    with open(path, "w", encoding="utf-8") as fh:
        for row in relation:
            fh.write(",".join(f"{v:.8f}" for v in row) + "\n")
    print(f"wrote {path} ({relation.shape[0]}x{relation.shape[1]})")
    return 0


def cmd_serve(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    _echo_config(config, {"command": "serve", "host": args.host,
                          "port": args.port, "out_dir": args.out_dir})
    out_dir = Path(args.out_dir)
    dataset, train, _, histories, store, btn, rn, attr_emb = _assemble(
        config, out_dir)
    snapshot = ModelSnapshot(dataset.catalog, store, btn, rn, attr_emb,
                             histories, config=config.policy())
    app = create_app(snapshot)
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --------------------------------------------------------------------------
# argument wiring

def _overrides(args) -> dict:
    return {"seed": getattr(args, "seed", None),
            "alpha": getattr(args, "alpha", None)}


def _add_common(sub, with_jobs=False, with_strategy=False):
    sub.add_argument("--config", required=True,
                     help="JSON run configuration (must name the dataset manifest)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the configured seed")
    sub.add_argument("--alpha", type=float, default=None,
                     help="override the question/recommend threshold")
    sub.add_argument("--out-dir", default="artifacts",
                     help="directory for checkpoints and reports")
    if with_jobs:
        sub.add_argument("--jobs", type=int, default=1,
                         help="parallel episode workers (default 1)")
    if with_strategy:
        sub.add_argument("--strategy", default="uncertainty",
                         choices=sorted(STRATEGIES),
                         help="question-selection strategy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convrec",
        description="Train, simulate, inspect, and serve the conversational "
                    "recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-btn", help="fit the belief network")
    _add_common(p)
    p.set_defaults(func=cmd_train_btn)

    p = sub.add_parser("train-rn", help="fit the recommendation network")
    _add_common(p)
    p.set_defaults(func=cmd_train_rn)

    p = sub.add_parser("simulate",
                       help="run seeded episodes against the truthful simulator")
    _add_common(p, with_jobs=True, with_strategy=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="recompute metrics from a transcript")
    p.add_argument("--transcript", required=True,
                   help="transcript.jsonl written by simulate")
    p.add_argument("--max-turns", type=int, default=15)
    p.add_argument("--out-dir", default="artifacts")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate",
                       help="compare all question-selection strategies")
    _add_common(p, with_jobs=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-relations",
                       help="write the learned attribute-relation grid")
    _add_common(p)
    p.add_argument("--user", type=int, default=None,
                   help="user id whose relation grid to export "
                        "(default: cold start)")
    p.set_defaults(func=cmd_export_relations)

    p = sub.add_parser("serve", help="start the HTTP session API")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
