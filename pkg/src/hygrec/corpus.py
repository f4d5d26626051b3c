"""Conversation corpora, knowledge graphs, reviews, and the four views.

All builders are pure: the same inputs produce byte-identical
serializations. Iteration over sessions follows input order; seeds and
mentions are visited in sorted order, which keeps hyperedge columns
grouped per session and makes the incremental refresh path (used by the
feedback-loop simulation) produce exactly the same hypergraph as a full
rebuild.

View shapes:

* item view: one hyperedge per session holding every item it mentions.
* entity view: one hyperedge per (session, entity seed) holding the
  seed's k-hop neighborhood in the entity knowledge graph.
* word view: one hyperedge per (session, item keyword) holding the item
  row plus the keyword's k-hop neighborhood in the concept graph.
* review view: per (session, item), one positive and one negative
  hyperedge holding the item row plus matching sentiment words from its
  reviews; singletons are kept.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    EmptySession,
    InvariantViolation,
    ParseError,
    UnknownSeed,
)
from .hypergraph import Hyperedge, build_incidence, induce_line_graph_fast

VIEWS = ("entity", "item", "word", "review")


@dataclass(frozen=True)
class Turn:
    role: str
    tokens: tuple
    item_ids: tuple
    entity_ids: tuple


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    turns: tuple
    ground_truth: tuple  # ((turn_index, item_id), ...)

    def __post_init__(self):
        if "|" in self.session_id or "\t" in self.session_id:
            raise InvariantViolation(f"session id {self.session_id!r} contains '|' or tab")
        prev = -1
        for turn_idx, _item in self.ground_truth:
            if turn_idx <= prev:
                raise InvariantViolation(
                    f"session {self.session_id}: ground-truth turn indices not increasing"
                )
            prev = turn_idx
            if turn_idx >= len(self.turns):
                raise InvariantViolation(
                    f"session {self.session_id}: ground-truth turn {turn_idx} out of range"
                )
            if self.turns[turn_idx].role != "system":
                raise InvariantViolation(
                    f"session {self.session_id}: ground-truth turn {turn_idx} is not a system turn"
                )

    def mentioned_items(self) -> list:
        return sorted({i for t in self.turns for i in t.item_ids})

    def mentioned_entities(self) -> list:
        return sorted({e for t in self.turns for e in t.entity_ids})

    def truncated(self, upto_turn: int) -> "SessionRecord":
        """Copy restricted to turns[:upto_turn]; ground truth filtered."""
        return SessionRecord(
            session_id=self.session_id,
            turns=self.turns[:upto_turn],
            ground_truth=tuple((t, i) for t, i in self.ground_truth if t < upto_turn),
        )

    def with_extra_items(self, item_ids) -> "SessionRecord":
        """Copy with an appended user turn mentioning ``item_ids``."""
        extra = Turn(role="user", tokens=(), item_ids=tuple(item_ids), entity_ids=())
        return SessionRecord(self.session_id, self.turns + (extra,), self.ground_truth)


def _parse_turn(obj, sid):
    role = obj.get("role")
    if role not in ("user", "system"):
        raise InvariantViolation(f"session {sid}: bad turn role {role!r}")
    return Turn(
        role=role,
        tokens=tuple(str(t) for t in obj.get("tokens", [])),
        item_ids=tuple(int(i) for i in obj.get("item_ids", [])),
        entity_ids=tuple(int(e) for e in obj.get("entity_ids", [])),
    )


def load_sessions(path) -> list:
    """Parse a JSON-lines session file; one object per line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            if "session_id" not in obj or "turns" not in obj:
                raise ParseError("missing 'session_id' or 'turns'", line=lineno)
            sid = str(obj["session_id"])
            turns = tuple(_parse_turn(t, sid) for t in obj["turns"])
            truth = tuple((int(t), int(i)) for t, i in obj.get("ground_truth", []))
            records.append(SessionRecord(session_id=sid, turns=turns, ground_truth=truth))
    return records


def save_sessions(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "session_id": rec.session_id,
                        "turns": [
                            {
                                "role": t.role,
                                "tokens": list(t.tokens),
                                "item_ids": list(t.item_ids),
                                "entity_ids": list(t.entity_ids),
                            }
                            for t in rec.turns
                        ],
                        "ground_truth": [list(gt) for gt in rec.ground_truth],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass(frozen=True)
class KnowledgeGraph:
    triples: tuple  # ((head, relation, tail), ...)
    node_table: dict  # id -> name

    def __post_init__(self):
        neighbors: dict = {}
        for h, _r, t in self.triples:
            if h == t:
                raise InvariantViolation(f"self-loop triple on node {h}")
            if h not in self.node_table or t not in self.node_table:
                raise InvariantViolation(f"triple ({h},{t}) references unknown node")
            neighbors.setdefault(h, set()).add(t)
            neighbors.setdefault(t, set()).add(h)
        object.__setattr__(
            self, "_neighbors", {k: tuple(sorted(v)) for k, v in neighbors.items()}
        )

    def neighbors(self, node) -> tuple:
        return self._neighbors.get(node, ())


def load_kg(triples_path, nodes_path) -> KnowledgeGraph:
    """Tab-separated triples plus an id<TAB>name node table."""
    node_table = {}
    with open(nodes_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("node table line needs id<TAB>name", line=lineno)
            node_table[int(parts[0])] = parts[1]
    triples = []
    with open(triples_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("triple line needs head<TAB>relation<TAB>tail", line=lineno)
            triples.append((int(parts[0]), int(parts[1]), int(parts[2])))
    return KnowledgeGraph(triples=tuple(triples), node_table=node_table)


@dataclass(frozen=True)
class ReviewCorpus:
    reviews: dict  # item id -> list of token tuples

    def tokens_for(self, item_id) -> list:
        return [tok for toks in self.reviews.get(item_id, []) for tok in toks]


def load_reviews(path) -> ReviewCorpus:
    reviews: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            if "item_id" not in obj or "tokens" not in obj:
                raise ParseError("missing 'item_id' or 'tokens'", line=lineno)
            toks = tuple(normalize_token(t) for t in obj["tokens"])
            if not toks:
                raise ParseError("empty review token list", line=lineno)
            reviews.setdefault(int(obj["item_id"]), []).append(toks)
    return ReviewCorpus(reviews=reviews)


@dataclass(frozen=True)
class SentimentLexicon:
    positive: frozenset
    negative: frozenset

    def __post_init__(self):
        overlap = self.positive & self.negative
        if overlap:
            raise InvariantViolation(
                f"lexicon polarity overlap: {sorted(overlap)[:5]}"
            )


def normalize_token(tok: str) -> str:
    """Lowercased, whitespace-stripped; no stemming."""
    return str(tok).strip().lower()


def load_lexicon(pos_path, neg_path) -> SentimentLexicon:
    def read_words(path):
        with open(path, "r", encoding="utf-8") as fh:
            return frozenset(
                normalize_token(line) for line in fh if line.strip()
            )

    return SentimentLexicon(positive=read_words(pos_path), negative=read_words(neg_path))


def khop_neighbors(kg: KnowledgeGraph, seeds, k: int) -> set:
    """Nodes reachable within k undirected hops of any seed, seeds included."""
    seeds = set(seeds)
    for s in seeds:
        if s not in kg.node_table:
            raise UnknownSeed(f"seed {s} not in knowledge graph")
    frontier = deque((s, 0) for s in sorted(seeds))
    seen = set(seeds)
    while frontier:
        node, depth = frontier.popleft()
        if depth == k:
            continue
        for nb in kg.neighbors(node):
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, depth + 1))
    return seen


# ---------------------------------------------------------------------------
# node tables


class NodeTable:
    """Bidirectional (kind, key) <-> row map for one view."""

    def __init__(self, symbols):
        self.symbols = tuple(symbols)
        self._index = {sym: row for row, sym in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            raise InvariantViolation("duplicate symbols in node table")

    def __len__(self):
        return len(self.symbols)

    def row(self, kind, key) -> int:
        return self._index[(kind, key)]

    def maybe_row(self, kind, key):
        return self._index.get((kind, key))

    def symbol_of(self, row):
        return self.symbols[row]

    def to_text(self) -> str:
        return "".join(
            f"{row}\t{kind}\t{key}\n" for row, (kind, key) in enumerate(self.symbols)
        )

    @staticmethod
    def from_text(text: str) -> "NodeTable":
        symbols = []
        for line in text.splitlines():
            if not line:
                continue
            _row, kind, key = line.split("\t")
            symbols.append((kind, key if kind == "rev" else int(key)))
        return NodeTable(symbols)


def catalog_items(sessions, reviews: ReviewCorpus | None = None) -> list:
    """Sorted union of item ids seen in sessions, truth, and reviews."""
    items = set()
    for rec in sessions:
        items.update(rec.mentioned_items())
        items.update(i for _t, i in rec.ground_truth)
    if reviews is not None:
        items.update(reviews.reviews)
    return sorted(items)


# ---------------------------------------------------------------------------
# view builders


def _session_item_edges(rec, table):
    items = rec.mentioned_items()
    if not items:
        raise EmptySession(f"session {rec.session_id} mentions no items")
    return [
        Hyperedge((table.row("item", i) for i in items), provenance=f"{rec.session_id}|s")
    ]


def _session_entity_edges(rec, table, kg, k):
    return [
        Hyperedge(
            (table.row("ent", e) for e in sorted(khop_neighbors(kg, {seed}, k))),
            provenance=f"{rec.session_id}|e{seed}",
        )
        for seed in rec.mentioned_entities()
    ]


def _session_word_edges(rec, table, kg, k):
    edges = []
    for item in rec.mentioned_items():
        members = [table.row("item", item)]
        if item in kg.node_table:
            members.extend(
                table.row("con", w) for w in sorted(khop_neighbors(kg, {item}, k))
            )
        edges.append(Hyperedge(members, provenance=f"{rec.session_id}|w{item}"))
    return edges


def _session_review_edges(rec, table, reviews, lex):
    edges = []
    for item in rec.mentioned_items():
        tokens = set(reviews.tokens_for(item))
        for tag, polarity in (("+", lex.positive), ("-", lex.negative)):
            members = [table.row("item", item)] + [
                table.row("rev", w) for w in sorted(tokens & polarity)
            ]
            edges.append(Hyperedge(members, provenance=f"{rec.session_id}|r{item}{tag}"))
    return edges


def build_item_view(sessions, catalog, turn_index: int = 0):
    """One hyperedge per session over its mentioned items."""
    table = NodeTable(("item", i) for i in catalog)
    edges = [e for rec in sessions for e in _session_item_edges(rec, table)]
    return build_incidence(edges, len(table), view_tag="item", turn_index=turn_index), table


def build_entity_view(sessions, kg: KnowledgeGraph, k: int, catalog, turn_index: int = 0):
    """One hyperedge per (session, entity seed): the seed's k-hop set."""
    table = NodeTable(
        [("item", i) for i in catalog] + [("ent", e) for e in sorted(kg.node_table)]
    )
    edges = [e for rec in sessions for e in _session_entity_edges(rec, table, kg, k)]
    return build_incidence(edges, len(table), view_tag="entity", turn_index=turn_index), table


def build_word_view(sessions, kg: KnowledgeGraph, k: int, catalog, turn_index: int = 0):
    """One hyperedge per (session, item keyword): item row + k-hop words."""
    table = NodeTable(
        [("item", i) for i in catalog] + [("con", w) for w in sorted(kg.node_table)]
    )
    edges = [e for rec in sessions for e in _session_word_edges(rec, table, kg, k)]
    return build_incidence(edges, len(table), view_tag="word", turn_index=turn_index), table


def build_review_view(
    sessions, reviews: ReviewCorpus, lex: SentimentLexicon, catalog, turn_index: int = 0
):
    """Per (session, item): one positive and one negative hyperedge."""
    review_words = sorted(
        {
            tok
            for reviews_of_item in reviews.reviews.values()
            for review in reviews_of_item
            for tok in review
            if tok in lex.positive or tok in lex.negative
        }
    )
    table = NodeTable([("item", i) for i in catalog] + [("rev", w) for w in review_words])
    edges = [e for rec in sessions for e in _session_review_edges(rec, table, reviews, lex)]
    return build_incidence(edges, len(table), view_tag="review", turn_index=turn_index), table


@dataclass(frozen=True)
class ViewBundle:
    """The active view hypergraphs, their line graphs, and lookup maps."""

    hypergraphs: dict
    line_graphs: dict
    node_tables: dict
    turn_index: int = 0
    session_edges: dict = field(default_factory=dict)  # view -> sid -> edge rows

    @property
    def active_views(self) -> tuple:
        return tuple(v for v in VIEWS if v in self.hypergraphs)

    def mention_rows(self, view: str, rec: SessionRecord) -> list:
        """Rows of the session's mentioned items (all views) and
        entities (entity view) in this view's node table."""
        table = self.node_tables[view]
        rows = [
            r
            for i in rec.mentioned_items()
            if (r := table.maybe_row("item", i)) is not None
        ]
        if view == "entity":
            rows.extend(
                r
                for e in rec.mentioned_entities()
                if (r := table.maybe_row("ent", e)) is not None
            )
        return rows


def _session_edge_map(hypergraph) -> dict:
    mapping: dict = {}
    for idx, edge in enumerate(hypergraph.hyperedges):
        sid = edge.provenance.split("|", 1)[0]
        mapping.setdefault(sid, []).append(idx)
    return mapping


def build_view_bundle(
    sessions,
    kg_dbpedia: KnowledgeGraph,
    kg_conceptnet: KnowledgeGraph,
    reviews: ReviewCorpus,
    lex: SentimentLexicon,
    k: int = 2,
    active_views=VIEWS,
    threads: int = 1,
    turn_index: int = 0,
) -> ViewBundle:
    catalog = catalog_items(sessions, reviews)
    hypergraphs, tables = {}, {}
    if "entity" in active_views:
        hypergraphs["entity"], tables["entity"] = build_entity_view(
            sessions, kg_dbpedia, k, catalog, turn_index
        )
    if "item" in active_views:
        hypergraphs["item"], tables["item"] = build_item_view(sessions, catalog, turn_index)
    if "word" in active_views:
        hypergraphs["word"], tables["word"] = build_word_view(
            sessions, kg_conceptnet, k, catalog, turn_index
        )
    if "review" in active_views:
        hypergraphs["review"], tables["review"] = build_review_view(
            sessions, reviews, lex, catalog, turn_index
        )
    line_graphs = {v: induce_line_graph_fast(g, threads=threads) for v, g in hypergraphs.items()}
    session_edges = {v: _session_edge_map(g) for v, g in hypergraphs.items()}
    return ViewBundle(
        hypergraphs=hypergraphs,
        line_graphs=line_graphs,
        node_tables=tables,
        turn_index=turn_index,
        session_edges=session_edges,
    )


def refresh_view_bundle(
    bundle: ViewBundle,
    sessions,
    affected_ids,
    kg_dbpedia: KnowledgeGraph,
    kg_conceptnet: KnowledgeGraph,
    reviews: ReviewCorpus,
    lex: SentimentLexicon,
    k: int = 2,
    threads: int = 1,
    turn_index: int = 0,
) -> ViewBundle:
    """Incremental rebuild: recompute only affected sessions' hyperedges.

    Node tables are reused (the catalog is fixed); per-session edge
    groups keep their position in session order, so the result equals a
    full rebuild. Line graphs are re-induced for views whose edges
    changed.
    """
    affected = set(affected_ids)

    def per_session_edges(view, rec):
        table = bundle.node_tables[view]
        if view == "item":
            return _session_item_edges(rec, table)
        if view == "entity":
            return _session_entity_edges(rec, table, kg_dbpedia, k)
        if view == "word":
            return _session_word_edges(rec, table, kg_conceptnet, k)
        return _session_review_edges(rec, table, reviews, lex)

    hypergraphs, line_graphs = dict(bundle.hypergraphs), dict(bundle.line_graphs)
    session_edges = dict(bundle.session_edges)
    for view, old in bundle.hypergraphs.items():
        groups = {sid: [old.hyperedges[i] for i in idxs]
                  for sid, idxs in bundle.session_edges[view].items()}
        changed = False
        for rec in sessions:
            if rec.session_id in affected:
                groups[rec.session_id] = per_session_edges(view, rec)
                changed = True
        if not changed:
            continue
        edges = [e for rec in sessions for e in groups.get(rec.session_id, [])]
        g = build_incidence(
            edges, old.node_count, view_tag=view, turn_index=turn_index
        )
        hypergraphs[view] = g
        line_graphs[view] = induce_line_graph_fast(g, threads=threads)
        session_edges[view] = _session_edge_map(g)
    return ViewBundle(
        hypergraphs=hypergraphs,
        line_graphs=line_graphs,
        node_tables=bundle.node_tables,
        turn_index=turn_index,
        session_edges=session_edges,
    )
