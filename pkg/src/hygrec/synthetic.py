"""Synthetic planted-preference corpus for sanity checks and the
feedback-loop simulation.

Items split into latent clusters; each session mentions items and
entities from one cluster and its ground-truth recommendations come
from a popularity-skewed head inside that cluster, so a working model
must both separate clusters and learn the head ordering. Latent user
and item vectors (written to latents.json) drive the
preference-threshold user model in the loop simulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    KnowledgeGraph,
    ReviewCorpus,
    SentimentLexicon,
    SessionRecord,
    Turn,
    save_sessions,
)

POSITIVE_WORDS = ("great", "fun", "sharp", "warm", "crisp", "bright")
NEGATIVE_WORDS = ("dull", "slow", "flat", "messy", "bleak", "stale")
FILLER_WORDS = ("i", "watched", "it", "was", "really", "and", "the", "plot")


@dataclass
class SyntheticData:
    sessions: list
    kg_entities: KnowledgeGraph
    kg_concepts: KnowledgeGraph
    reviews: ReviewCorpus
    lexicon: SentimentLexicon
    latents: dict  # {"threshold", "users", "items"}
    n_items: int
    n_clusters: int


def _cluster_of(item: int, n_items: int, n_clusters: int) -> int:
    return item * n_clusters // n_items


def generate(
    seed: int,
    n_sessions: int = 200,
    n_items: int = 100,
    n_clusters: int = 2,
    head_size: int = 15,
    accept_threshold: float = 0.5,
) -> SyntheticData:
    rng = np.random.default_rng((seed, 0x5EED))
    cluster_items = [
        [i for i in range(n_items) if _cluster_of(i, n_items, n_clusters) == c]
        for c in range(n_clusters)
    ]
    head_size = min(head_size, min(len(items) for items in cluster_items))

    # entity graph: per cluster, a hub entity with leaf entities around it
    ent_nodes, ent_triples = {}, []
    leaves_per_cluster = 6
    for c in range(n_clusters):
        hub = c * (leaves_per_cluster + 1)
        ent_nodes[hub] = f"hub_{c}"
        for leaf in range(1, leaves_per_cluster + 1):
            ent_nodes[hub + leaf] = f"ent_{c}_{leaf}"
            ent_triples.append((hub, 0, hub + leaf))
    kg_entities = KnowledgeGraph(triples=tuple(ent_triples), node_table=ent_nodes)
    cluster_entities = [
        list(range(c * (leaves_per_cluster + 1), (c + 1) * (leaves_per_cluster + 1)))
        for c in range(n_clusters)
    ]

    # concept graph: one keyword node per item (same id), linked to a few
    # cluster topic words so same-cluster neighborhoods overlap
    topic_base = n_items + 100
    con_nodes = {i: f"kw_{i}" for i in range(n_items)}
    con_triples = []
    topics_per_cluster = 3
    for c in range(n_clusters):
        for t in range(topics_per_cluster):
            tid = topic_base + c * topics_per_cluster + t
            con_nodes[tid] = f"topic_{c}_{t}"
        for i in cluster_items[c]:
            tid = topic_base + c * topics_per_cluster + (i % topics_per_cluster)
            con_triples.append((i, 0, tid))
    kg_concepts = KnowledgeGraph(triples=tuple(con_triples), node_table=con_nodes)

    # reviews: filler plus one positive and one negative word per item
    reviews = {}
    for i in range(n_items):
        pos = POSITIVE_WORDS[i % len(POSITIVE_WORDS)]
        neg = NEGATIVE_WORDS[(i // len(NEGATIVE_WORDS)) % len(NEGATIVE_WORDS)]
        body = list(rng.choice(FILLER_WORDS, size=3))
        reviews[i] = [tuple(body + [pos, "but", neg])]
    review_corpus = ReviewCorpus(reviews=reviews)
    lexicon = SentimentLexicon(
        positive=frozenset(POSITIVE_WORDS), negative=frozenset(NEGATIVE_WORDS)
    )

    # ground-truth items come from the cluster head, linearly skewed
    head_weights = np.arange(head_size, 0, -1, dtype=np.float64)
    head_weights /= head_weights.sum()

    def draw_truth(c):
        head = cluster_items[c][:head_size]
        return int(rng.choice(head, p=head_weights))

    sessions = []
    for s in range(n_sessions):
        c = s % n_clusters
        max_mentions = min(5, len(cluster_items[c]))
        min_mentions = min(3, max_mentions)
        mentions = sorted(
            int(i)
            for i in rng.choice(
                cluster_items[c],
                size=rng.integers(min_mentions, max_mentions + 1),
                replace=False,
            )
        )
        entities = sorted(
            int(e)
            for e in rng.choice(cluster_entities[c], size=rng.integers(1, 3), replace=False)
        )
        split = max(1, len(mentions) // 2)
        truth_train, truth_eval = draw_truth(c), draw_truth(c)
        turns = (
            Turn("user", ("i", "liked") + tuple(f"kw_{i}" for i in mentions[:split]),
                 tuple(mentions[:split]), tuple(entities[:1])),
            Turn("system", ("you", "might", "like", f"item_{truth_train}"),
                 (truth_train,), ()),
            Turn("user", ("also", "enjoyed") + tuple(f"kw_{i}" for i in mentions[split:]),
                 tuple(mentions[split:]), tuple(entities[1:])),
            Turn("system", ("then", "try", f"item_{truth_eval}"), (truth_eval,), ()),
        )
        sessions.append(
            SessionRecord(
                session_id=f"s{s:04d}",
                turns=turns,
                ground_truth=((1, truth_train), (3, truth_eval)),
            )
        )

    # planted latents: cluster one-hot with noise; item vectors sharper
    users = {}
    for rec in sessions:
        c = int(rec.session_id[1:]) % n_clusters
        vec = rng.normal(0.0, 0.05, size=n_clusters)
        vec[c] += 1.0
        users[rec.session_id] = [float(x) for x in vec]
    items = {}
    for i in range(n_items):
        vec = np.zeros(n_clusters)
        vec[_cluster_of(i, n_items, n_clusters)] = 1.0
        items[str(i)] = [float(x) for x in vec]
    latents = {"threshold": accept_threshold, "users": users, "items": items}

    return SyntheticData(
        sessions=sessions,
        kg_entities=kg_entities,
        kg_concepts=kg_concepts,
        reviews=review_corpus,
        lexicon=lexicon,
        latents=latents,
        n_items=n_items,
        n_clusters=n_clusters,
    )


def write_dataset(data: SyntheticData, out_dir) -> dict:
    """Write all corpus files; returns config-ready path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "sessions": out / "sessions.jsonl",
        "dbpedia_triples": out / "dbpedia_triples.tsv",
        "dbpedia_nodes": out / "dbpedia_nodes.tsv",
        "conceptnet_triples": out / "conceptnet_triples.tsv",
        "conceptnet_nodes": out / "conceptnet_nodes.tsv",
        "reviews": out / "reviews.jsonl",
        "lexicon_pos": out / "lexicon_pos.txt",
        "lexicon_neg": out / "lexicon_neg.txt",
        "latents": out / "latents.json",
    }
    save_sessions(data.sessions, paths["sessions"])
    _write_kg(data.kg_entities, paths["dbpedia_triples"], paths["dbpedia_nodes"])
    _write_kg(data.kg_concepts, paths["conceptnet_triples"], paths["conceptnet_nodes"])
    with open(paths["reviews"], "w", encoding="utf-8") as fh:
        for item in sorted(data.reviews.reviews):
            for toks in data.reviews.reviews[item]:
                fh.write(json.dumps({"item_id": item, "tokens": list(toks)}) + "\n")
    paths["lexicon_pos"].write_text("\n".join(sorted(data.lexicon.positive)) + "\n")
    paths["lexicon_neg"].write_text("\n".join(sorted(data.lexicon.negative)) + "\n")
    with open(paths["latents"], "w", encoding="utf-8") as fh:
        json.dump(data.latents, fh, sort_keys=True, indent=1)
    return {k: str(v) for k, v in paths.items()}


def _write_kg(kg: KnowledgeGraph, triples_path, nodes_path):
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for nid in sorted(kg.node_table):
            fh.write(f"{nid}\t{kg.node_table[nid]}\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{h}\t{r}\t{t}\n")
