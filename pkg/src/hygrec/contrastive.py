"""Eight-way interest representations and cross-view contrastive losses.

A session is the contrast unit: its pooled vector in one view is the
positive for its pooled vector in another view, with the rest of the
batch as in-batch negatives. Pair ordering is fixed (canonical view
order), so summation order and therefore results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import kernels as K
from .errors import BatchTooSmall, NoMentions
from .corpus import VIEWS

LEVELS = ("hyper", "line")


@dataclass
class InterestSet:
    """Per-view node-level (``hyper``) and hyperedge-level (``line``)
    embedding matrices, as tape tensors."""

    hyper: dict  # view -> Tensor (node_count, d)
    line: dict  # view -> Tensor (hyperedge_count, d)

    def views(self, level: str) -> tuple:
        present = self.hyper if level == "hyper" else self.line
        return tuple(v for v in VIEWS if v in present)


@dataclass
class SessionViewVectors:
    """Pooled per-(session, view, level) vectors, each a (1, d) tensor."""

    hyper: dict = field(default_factory=dict)  # view -> {sid: Tensor}
    line: dict = field(default_factory=dict)
    session_order: tuple = ()

    def _level(self, level: str) -> dict:
        return self.hyper if level == "hyper" else self.line

    def views(self, level: str) -> tuple:
        return tuple(v for v in VIEWS if v in self._level(level))

    def vector(self, level: str, view: str, sid: str):
        try:
            return self._level(level)[view][sid]
        except KeyError:
            raise NoMentions(f"session {sid} has no {level}-level vector in view {view!r}") from None


def session_view_vectors(iset: InterestSet, bundle, sessions) -> SessionViewVectors:
    """Pool interest matrices down to one vector per (session, view, level).

    Hyper level pools the rows of the session's mentioned nodes; line
    level pools the rows of the session's own hyperedges. A session with
    no mentions (or no hyperedges) in a view is simply absent from that
    view's batches.
    """
    svv = SessionViewVectors(session_order=tuple(rec.session_id for rec in sessions))
    for view, matrix in iset.hyper.items():
        per_session = {}
        for rec in sessions:
            rows = bundle.mention_rows(view, rec)
            if rows:
                per_session[rec.session_id] = K.mean_pool(matrix, rows)
        svv.hyper[view] = per_session
    for view, matrix in iset.line.items():
        edge_map = bundle.session_edges[view]
        per_session = {}
        for rec in sessions:
            rows = edge_map.get(rec.session_id, [])
            if rows:
                per_session[rec.session_id] = K.mean_pool(matrix, rows)
        svv.line[view] = per_session
    return svv


def infonce(anchors, positives, tau: float):
    """In-batch InfoNCE with cosine similarity.

    Row b of ``anchors`` and ``positives`` is the same session seen in
    two views; the other B-1 rows of ``positives`` act as negatives. The
    positive is included in the denominator, so the per-row loss is
    bounded below by 0 when the matched similarity is maximal.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = anchors.value.shape[0]
    if b != positives.value.shape[0]:
        raise BatchTooSmall("anchors and positives must be row-aligned")
    if b < 2:
        raise BatchTooSmall(f"contrastive batch needs >= 2 rows, got {b}")
    sims = K.scale(
        K.matmul(K.row_normalize(anchors), K.transpose(K.row_normalize(positives))),
        1.0 / tau,
    )
    log_denom = K.log(K.row_sum(K.exp(sims)))
    matched = K.row_sum(K.mul(sims, sims.tape.constant(np.eye(b))))
    return K.scale(K.sum_all(K.sub(log_denom, matched)), 1.0 / b)


def _pair_batch(svv: SessionViewVectors, level: str, view_a: str, view_b: str):
    vecs_a = svv._level(level)[view_a]
    vecs_b = svv._level(level)[view_b]
    common = [sid for sid in svv.session_order if sid in vecs_a and sid in vecs_b]
    if len(common) < 2:
        raise BatchTooSmall(
            f"views {view_a!r}/{view_b!r} share {len(common)} session(s) at "
            f"{level} level; need >= 2"
        )
    return (
        K.concat_rows([vecs_a[sid] for sid in common]),
        K.concat_rows([vecs_b[sid] for sid in common]),
    )


def level_cl_loss(svv: SessionViewVectors, level: str, tau: float, symmetrize: bool = True):
    """Sum of pair losses over all unordered view pairs at one level."""
    views = svv.views(level)
    if len(views) < 2:
        raise BatchTooSmall(f"{level} level has {len(views)} active view(s); need >= 2")
    total = None
    for view_a, view_b in combinations(views, 2):
        anchors, positives = _pair_batch(svv, level, view_a, view_b)
        term = infonce(anchors, positives, tau)
        if symmetrize:
            term = K.scale(K.add(term, infonce(positives, anchors, tau)), 0.5)
        total = term if total is None else K.add(total, term)
    return total


def total_cl_loss(
    svv: SessionViewVectors, tau: float, level_mean: bool = False, symmetrize: bool = True
):
    """Combined contrastive objective over both levels.

    The two level losses are summed; ``level_mean`` switches to their
    average instead.
    """
    combined = K.add(
        level_cl_loss(svv, "hyper", tau, symmetrize),
        level_cl_loss(svv, "line", tau, symmetrize),
    )
    return K.scale(combined, 0.5) if level_mean else combined


def contrastive_pair_counts(hyper_views, line_views) -> dict:
    """Number of unordered view pairs per level for a view configuration."""
    return {
        "hyper": len(hyper_views) * (len(hyper_views) - 1) // 2,
        "line": len(line_views) * (len(line_views) - 1) // 2,
    }
