"""Interest fusion, item scoring, recommendation losses, and ranking.

Scoring is softmax over the whole candidate table; the recommendation
loss is the multi-label binary cross-entropy over every (session, item)
pair, summed, with probabilities clamped away from 0 and 1. Ranking is
deterministic: ties break by ascending item id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .contrastive import SessionViewVectors
from .errors import (
    KTooLarge,
    LabelOutOfRange,
    MissingGroundTruth,
    MissingView,
    ShapeMismatch,
)

PROB_EPS = 1e-12


@dataclass
class FairRepresentation:
    """Stacked interest vectors plus the two fused representations."""

    x_fair: K.Tensor  # (2 * active views, d)
    x_fair_reco: K.Tensor  # (1, d)
    x_fair_conv: K.Tensor  # (rows of x_curr, d)


@dataclass(frozen=True)
class RecommendationList:
    session_id: str
    turn_index: int
    item_ids: tuple
    scores: tuple

    def __post_init__(self):
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ShapeMismatch("recommendation list has duplicate items")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ShapeMismatch("recommendation scores must be non-increasing")


def fuse_fair(svv: SessionViewVectors, ctx, sid: str, mha_weights, heads: int) -> FairRepresentation:
    """Fuse the session's pooled interest vectors with its context.

    ``x_fair`` stacks the hyper-level then line-level vectors in view
    order. ``x_fair_reco`` averages pooled interests with pooled current
    context; ``x_fair_conv`` attends the current context over the
    stacked interests.
    """
    vectors = []
    for level in ("hyper", "line"):
        views = svv.views(level)
        if not views:
            raise MissingView(f"no active views at {level} level")
        for view in views:
            vectors.append(svv.vector(level, view, sid))
    x_fair = K.concat_rows(vectors)
    pooled = K.concat_rows([K.mean_rows(x_fair), K.mean_rows(ctx.x_curr)])
    x_fair_reco = K.mean_rows(pooled)
    x_fair_conv = K.multi_head_attention(ctx.x_curr, x_fair, x_fair, *mha_weights, heads)
    return FairRepresentation(x_fair=x_fair, x_fair_reco=x_fair_reco, x_fair_conv=x_fair_conv)


def score_items(fr: FairRepresentation, item_matrix: K.Tensor) -> K.Tensor:
    """Softmax recommendation probabilities over the candidate table."""
    if fr.x_fair_reco.value.shape[1] != item_matrix.value.shape[1]:
        raise ShapeMismatch(
            f"representation dim {fr.x_fair_reco.value.shape[1]} != item dim "
            f"{item_matrix.value.shape[1]}"
        )
    return K.row_softmax(K.matmul(fr.x_fair_reco, K.transpose(item_matrix)))


def rec_loss(prob_rows, labels) -> K.Tensor:
    """Summed binary cross-entropy over all (session, item) pairs.

    ``prob_rows`` are (1, n_items) probability tensors; ``labels`` is a
    0/1 array of shape (batch, n_items).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise LabelOutOfRange("labels must be 0 or 1")
    probs = K.concat_rows(list(prob_rows)) if len(prob_rows) > 1 else prob_rows[0]
    if probs.value.shape != labels.shape:
        raise ShapeMismatch(f"probs {probs.value.shape} vs labels {labels.shape}")
    tape = probs.tape
    p = K.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = tape.constant(labels)
    y_neg = tape.constant(1.0 - labels)
    one = tape.constant(np.ones_like(labels))
    ll = K.add(K.mul(y, K.log(p)), K.mul(y_neg, K.log(K.sub(one, p))))
    return K.scale(K.sum_all(ll), -1.0)


def joint_rec_loss(j_cl: K.Tensor, j_r: K.Tensor, alpha: float) -> K.Tensor:
    """alpha-weighted contrastive term plus the recommendation loss."""
    return K.add(K.scale(j_cl, alpha), j_r)


def rank_topk(probabilities, k: int, item_ids, session_id="", turn_index=0) -> RecommendationList:
    """Top-k by probability; ties broken by ascending item id."""
    probs = np.asarray(probabilities, dtype=np.float64).ravel()
    item_ids = np.asarray(item_ids)
    if k > probs.size:
        raise KTooLarge(f"k={k} exceeds catalog size {probs.size}")
    order = np.lexsort((item_ids, -probs))[:k]
    return RecommendationList(
        session_id=session_id,
        turn_index=turn_index,
        item_ids=tuple(int(i) for i in item_ids[order]),
        scores=tuple(float(p) for p in probs[order]),
    )


def _ranks(lists, truth: dict, k: int):
    """Rank (1-based) of the true item in each list, or None if absent."""
    ranks = []
    for rl in lists:
        key = (rl.session_id, rl.turn_index)
        if key not in truth:
            raise MissingGroundTruth(f"no ground truth for {key}")
        target = truth[key]
        rank = None
        for pos, item in enumerate(rl.item_ids[:k], start=1):
            if item == target:
                rank = pos
                break
        ranks.append(rank)
    return ranks


def recall_at_k(lists, truth: dict, k: int) -> float:
    ranks = _ranks(lists, truth, k)
    return float(np.mean([1.0 if r is not None else 0.0 for r in ranks]))


def mrr_at_k(lists, truth: dict, k: int) -> float:
    ranks = _ranks(lists, truth, k)
    return float(np.mean([1.0 / r if r is not None else 0.0 for r in ranks]))


def ndcg_at_k(lists, truth: dict, k: int) -> float:
    ranks = _ranks(lists, truth, k)
    return float(
        np.mean([1.0 / np.log2(r + 1.0) if r is not None else 0.0 for r in ranks])
    )
