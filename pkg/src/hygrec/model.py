"""Wires a view bundle and parameter store into forward passes.

Parameter naming lives here. Every parameter is initialized from
(seed, name), so creation order is irrelevant to the values. One
``ModelForward`` wraps one tape and caches parameter leaves so repeated
use of a parameter accumulates gradients into a single leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import kernels as K
from .contrastive import InterestSet
from .errors import MissingView


@dataclass
class SessionContext:
    """Current-window and history mention embeddings (each >= 1 row)."""

    x_curr: K.Tensor
    x_hist: K.Tensor


@dataclass
class DecoderWeights:
    self_attn: tuple
    fair_attn: tuple
    curr_attn: tuple
    hist_attn: tuple
    ffn: tuple


class InterestModel:
    """Multi-view interest model over a fixed catalog and node tables."""

    def __init__(self, cfg, store, bundle, catalog, vocab=None):
        self.cfg = cfg
        self.store = store
        self.bundle = bundle
        self.catalog = list(catalog)
        self.item_rows = {item: r for r, item in enumerate(self.catalog)}
        self.vocab = vocab

    def forward(self, tape) -> "ModelForward":
        return ModelForward(self, tape)


class ModelForward:
    def __init__(self, model: InterestModel, tape: K.Tape):
        self.model = model
        self.tape = tape
        self.cfg = model.cfg
        self.bundle = model.bundle
        self._leaves = {}
        self._iset = None

    def leaf(self, name, shape, init="glorot") -> K.Tensor:
        if name not in self._leaves:
            self._leaves[name] = self.tape.leaf(self.model.store.get(name, shape, init))
        return self._leaves[name]

    def _view_embedding(self, view) -> K.Tensor:
        n = len(self.bundle.node_tables[view])
        return self.leaf(f"emb/{view}", (n, self.cfg.dim))

    def item_embedding(self) -> K.Tensor:
        """Raw item table over the catalog, shared by all item lookups."""
        return self.leaf("emb/item", (len(self.model.catalog), self.cfg.dim))

    def interest_set(self) -> InterestSet:
        """The active hyper- and line-level interest matrices."""
        if self._iset is not None:
            return self._iset
        cfg = self.cfg
        hyper, line = {}, {}
        for view in self.bundle.active_views:
            emb = (
                self.item_embedding() if view == "item" else self._view_embedding(view)
            )
            g = self.bundle.hypergraphs[view]
            if view in cfg.hyper_views:
                weights = [
                    self.leaf(f"hgconv/{view}/{layer}", (cfg.dim, cfg.dim))
                    for layer in range(cfg.layers_hyper)
                ]
                hyper[view] = K.hgconv_forward(g, emb, weights)
            if view in cfg.line_views:
                weights = [
                    self.leaf(f"gconv/{view}/{layer}", (cfg.dim, cfg.dim))
                    for layer in range(cfg.layers_line)
                ]
                line[view] = K.gconv_forward(
                    self.bundle.line_graphs[view],
                    K.edge_mean(g, emb),
                    weights,
                    activation=cfg.activation,
                )
        self._iset = InterestSet(hyper=hyper, line=line)
        return self._iset

    def item_matrix(self) -> K.Tensor:
        """Candidate item representations: item-view convolution output
        when that level is active, the raw item table otherwise."""
        iset = self.interest_set()
        if "item" in iset.hyper:
            return iset.hyper["item"]
        return self.item_embedding()

    def _entity_matrix(self):
        iset = self.interest_set()
        if "entity" in iset.hyper:
            return iset.hyper["entity"], self.bundle.node_tables["entity"]
        if "entity" in self.bundle.node_tables:
            return self._view_embedding("entity"), self.bundle.node_tables["entity"]
        return None, None

    def _mention_rows_for_turns(self, turns):
        """(item_matrix rows, entity rows) mentioned across the turns."""
        items = sorted(
            {i for t in turns for i in t.item_ids if i in self.model.item_rows}
        )
        entities = sorted({e for t in turns for e in t.entity_ids})
        return [self.model.item_rows[i] for i in items], entities

    def session_context(self, rec, upto_turn=None) -> SessionContext:
        """Mention embeddings for the current window and for history.

        The window is the last ``context_window`` turns before
        ``upto_turn`` (exclusive); earlier turns form the history. A
        side with no mentions falls back to its learned default row.
        """
        turns = rec.turns if upto_turn is None else rec.turns[:upto_turn]
        w = self.cfg.context_window
        curr_turns, hist_turns = turns[-w:], turns[:-w]
        x_curr = self._context_matrix(curr_turns, "ctx/default_curr")
        x_hist = self._context_matrix(hist_turns, "ctx/default_hist")
        return SessionContext(x_curr=x_curr, x_hist=x_hist)

    def _context_matrix(self, turns, default_name) -> K.Tensor:
        parts = []
        item_rows, entities = self._mention_rows_for_turns(turns)
        if item_rows:
            parts.append(K.gather_rows(self.item_matrix(), item_rows))
        if entities:
            ent_matrix, ent_table = self._entity_matrix()
            if ent_matrix is not None:
                rows = [
                    r
                    for e in entities
                    if (r := ent_table.maybe_row("ent", e)) is not None
                ]
                if rows:
                    parts.append(K.gather_rows(ent_matrix, rows))
        if not parts:
            return self.leaf(default_name, (1, self.cfg.dim))
        return K.concat_rows(parts) if len(parts) > 1 else parts[0]

    def mha_weights(self, prefix) -> tuple:
        d = self.cfg.dim
        return tuple(
            self.leaf(f"{prefix}/{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")
        )

    def ffn_weights(self, prefix) -> tuple:
        d, h = self.cfg.dim, self.cfg.ffn_dim
        return (
            self.leaf(f"{prefix}/w1", (d, h)),
            self.leaf(f"{prefix}/b1", (1, h), init="zeros"),
            self.leaf(f"{prefix}/w2", (h, d)),
            self.leaf(f"{prefix}/b2", (1, d), init="zeros"),
        )

    def decoder_weights(self) -> DecoderWeights:
        return DecoderWeights(
            self_attn=self.mha_weights("dec/self"),
            fair_attn=self.mha_weights("dec/fair"),
            curr_attn=self.mha_weights("dec/curr"),
            hist_attn=self.mha_weights("dec/hist"),
            ffn=self.ffn_weights("dec/ffn"),
        )

    def token_embedding(self) -> K.Tensor:
        if self.model.vocab is None:
            raise MissingView("model has no vocabulary")
        return self.leaf("emb/token", (len(self.model.vocab), self.cfg.dim))

    def vocab_heads(self) -> tuple:
        d, v = self.cfg.dim, len(self.model.vocab)
        return (
            self.leaf("dec/p1", (d, v)),
            self.leaf("dec/p2", (d, v)),
            self.leaf("dec/copy", (d, d)),
        )
