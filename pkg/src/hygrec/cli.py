"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, synthetic
from .config import RunConfig, apply_overrides, load_config
from .corpus import load_sessions
from .errors import ConfigError, DataError, NumericError, UnknownItem
from .fairness import PopularityTable, fairness_report
from .harness import (
    build_system,
    render_report,
    split_examples,
    truth_table,
)
from .kernels import ParameterStore
from .recommender import RecommendationList

log = logging.getLogger("hygrec")


def _cfg_from(args, require_seed=False, **overrides) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["seed"] = seed
    cfg = apply_overrides(cfg, **overrides)
    return cfg.validate(require_seed=require_seed)


def _derive_nodes_path(triples_path: str) -> str:
    p = Path(triples_path)
    if "triples" in p.name:
        candidate = p.with_name(p.name.replace("triples", "nodes"))
    else:
        candidate = p.with_suffix(p.suffix + ".nodes")
    if not candidate.exists():
        raise ConfigError(
            f"cannot find node table for {triples_path}; expected {candidate}"
        )
    return str(candidate)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _load_checkpoint(path) -> ParameterStore:
    try:
        return ParameterStore.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_lists(path):
    lists = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read lists file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                lists.append(
                    RecommendationList(
                        session_id=str(obj["session_id"]),
                        turn_index=int(obj["turn_index"]),
                        item_ids=tuple(int(i) for i in obj["items"]),
                        scores=tuple(float(s) for s in obj["scores"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad recommendation list: {exc}") from exc
    return lists


def _write_lists(path, lists):
    with open(path, "w", encoding="utf-8") as fh:
        for rl in lists:
            fh.write(
                json.dumps(
                    {
                        "session_id": rl.session_id,
                        "turn_index": rl.turn_index,
                        "items": list(rl.item_ids),
                        "scores": list(rl.scores),
                    }
                )
                + "\n"
            )


def cmd_make_synthetic(args) -> int:
    data = synthetic.generate(
        seed=args.seed,
        n_sessions=args.sessions,
        n_items=args.items,
        n_clusters=args.clusters,
    )
    paths = synthetic.write_dataset(data, args.out)
    config_path = Path(args.out) / "config.txt"
    with open(config_path, "w", encoding="utf-8") as fh:
        for key in sorted(paths):
            fh.write(f"{key}={paths[key]}\n")
    print(f"wrote dataset and {config_path}")
    return 0


def cmd_build_graphs(args) -> int:
    cfg = _cfg_from(
        args,
        sessions=args.sessions,
        dbpedia_triples=args.dbpedia,
        dbpedia_nodes=args.dbpedia_nodes or _derive_nodes_path(args.dbpedia),
        conceptnet_triples=args.conceptnet,
        conceptnet_nodes=args.conceptnet_nodes or _derive_nodes_path(args.conceptnet),
        reviews=args.reviews,
        lexicon_pos=args.lexicon_pos,
        lexicon_neg=args.lexicon_neg,
        khop=args.khop,
        threads=args.threads,
    )
    ds = harness.load_dataset(cfg)
    gsessions = harness.graph_sessions(ds.sessions)
    from .corpus import build_view_bundle, catalog_items

    catalog = catalog_items(ds.sessions, ds.reviews)
    bundle = build_view_bundle(
        gsessions, ds.kg_entities, ds.kg_concepts, ds.reviews, ds.lexicon,
        k=cfg.khop, active_views=cfg.active_views, threads=cfg.threads,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"views": {}, "catalog_size": len(catalog)}
    for view, g in bundle.hypergraphs.items():
        (out / f"{view}_hypergraph.txt").write_text(g.to_text(), encoding="utf-8")
        (out / f"{view}_nodes.tsv").write_text(
            bundle.node_tables[view].to_text(), encoding="utf-8"
        )
        manifest["views"][view] = {
            "nodes": g.node_count,
            "hyperedges": g.edge_count,
            "line_edges": bundle.line_graphs[view].edge_pair_count,
        }
    pops = PopularityTable.from_counts(harness.popularity_counts(gsessions), catalog)
    _write_json(out / "popularity.json", {str(k): v for k, v in pops.popularity.items()})
    _write_json(out / "manifest.json", manifest)
    print(f"wrote graphs for {len(bundle.hypergraphs)} views to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg_from(args, require_seed=True, epochs=args.epochs, tasks=args.tasks)
    ds = harness.load_dataset(cfg)
    system = harness.train(cfg, ds)
    system.store.save(args.out)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_recommend(args) -> int:
    cfg = _cfg_from(args, sessions=args.sessions)
    ds = harness.load_dataset(cfg)
    store = _load_checkpoint(args.checkpoint)
    system = build_system(cfg, ds, store=store)
    _train_ex, eval_ex = split_examples(ds.sessions)
    if not eval_ex:
        raise DataError("no sessions with ground truth to recommend for")
    lists = harness.score_examples(system, ds.sessions, eval_ex, args.k)
    _write_lists(args.out, lists)
    print(f"wrote {len(lists)} lists to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    lists = _load_lists(args.lists)
    truth = truth_table(load_sessions(args.truth))
    k_list = [int(x) for x in args.k.split(",") if x.strip()]
    if not k_list:
        raise ConfigError("--k needs at least one cutoff")
    metrics = harness.ranking_metrics(lists, truth, k_list)
    _write_json(args.out, metrics)
    _json, table = render_report(metrics)
    print(table, end="")
    return 0


def cmd_fairness(args) -> int:
    lists = _load_lists(args.lists)
    try:
        with open(args.pop, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read popularity file {args.pop}: {exc}") from exc
    pop = PopularityTable({int(k): float(v) for k, v in raw.items()})
    if len(pop.popularity) < args.catalog_size:
        raise UnknownItem(
            f"popularity table covers {len(pop.popularity)} items, "
            f"catalog size is {args.catalog_size}"
        )
    k_list = [int(x) for x in args.k.split(",") if x.strip()]
    report = fairness_report(lists, pop, args.catalog_size, k_list)
    _write_json(args.out, report)
    _json, table = render_report(report)
    print(table, end="")
    return 0


def cmd_respond(args) -> int:
    cfg = _cfg_from(args, sessions=args.session)
    ds = harness.load_dataset(cfg)
    store = _load_checkpoint(args.checkpoint)
    system = build_system(cfg, ds, store=store)
    for rec in ds.sessions:
        steps = harness.respond_session(system, rec, max_len=args.max_len)
        for step in steps:
            print(
                f"{rec.session_id}\t{step['step']}\t{step['token_id']}"
                f"\t{step['token']}\t{step['entropy']:.6f}"
            )
    return 0


def cmd_simulate_loop(args) -> int:
    cfg = _cfg_from(
        args,
        require_seed=True,
        turns=args.turns,
        user_model=args.user_model,
    )
    ds = harness.load_dataset(cfg)
    store = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    trace = harness.simulate_loop(
        cfg, ds, store=store, ranker=args.ranker, full_rebuild=args.full_rebuild
    )
    _write_json(args.out, trace)
    _json, table = render_report(trace)
    print(table, end="")
    return 0


def cmd_report(args) -> int:
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report input {args.input}: {exc}") from exc
    json_text, table = render_report(payload)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json_text)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hygrec",
        description="Multi-view hypergraph contrastive recommender with a fairness harness",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a planted-preference dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--clusters", type=int, default=2)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("build-graphs", help="build the four view hypergraphs")
    p.add_argument("--sessions", required=True)
    p.add_argument("--dbpedia", required=True, help="entity KG triples file")
    p.add_argument("--dbpedia-nodes", default=None)
    p.add_argument("--conceptnet", required=True, help="concept KG triples file")
    p.add_argument("--conceptnet-nodes", default=None)
    p.add_argument("--reviews", required=True)
    p.add_argument("--lexicon-pos", required=True)
    p.add_argument("--lexicon-neg", required=True)
    p.add_argument("--khop", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--tasks", choices=("both", "rec", "conv"), default=None)
    p.add_argument("--out", default="checkpoint.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="emit top-k lists for held-out turns")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sessions", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("evaluate", help="ranking metrics for recommendation lists")
    p.add_argument("--lists", required=True)
    p.add_argument("--truth", required=True, help="sessions file with ground truth")
    p.add_argument("--k", default="10,50")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fairness", help="fairness metrics for recommendation lists")
    p.add_argument("--lists", required=True)
    p.add_argument("--pop", required=True, help="popularity JSON (item -> share)")
    p.add_argument("--catalog-size", type=int, required=True)
    p.add_argument("--k", default="5,10,15,20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fairness)

    p = sub.add_parser("respond", help="greedy-decode responses with debug entropy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help="sessions file")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_respond)

    p = sub.add_parser("simulate-loop", help="closed-loop fairness simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ranker", choices=("trained", "popularity"), default="trained")
    p.add_argument("--turns", type=int, default=None)
    p.add_argument("--user-model", default=None)
    p.add_argument("--full-rebuild", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_loop)

    p = sub.add_parser("report", help="render a metrics/trace JSON as a table")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None, help="write canonical JSON here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
