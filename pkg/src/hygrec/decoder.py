"""Conversational decoder block, copy-augmented token distribution,
generation loss, and surface diversity metrics.

The decoder is verified as math at toy scale: shapes, normalization,
gate behaviour, and gradients. Fluent generation is out of scope.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import EmptyVocabulary, NGramTooLong, TargetOutOfRange

PROB_EPS = 1e-12
BOS, EOS = "<bos>", "<eos>"


@dataclass(frozen=True)
class Vocabulary:
    """Token table with a marked subset of item-name tokens."""

    tokens: tuple
    item_token_ids: frozenset
    item_to_token: dict  # item id -> token id

    def __post_init__(self):
        if not self.tokens:
            raise EmptyVocabulary("vocabulary has no tokens")
        if not self.item_token_ids <= set(range(len(self.tokens))):
            raise EmptyVocabulary("item_token_ids outside the token table")
        object.__setattr__(
            self, "lookup", {tok: i for i, tok in enumerate(self.tokens)}
        )
        if len(self.lookup) != len(self.tokens):
            raise EmptyVocabulary("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.lookup[token]

    @staticmethod
    def build(word_tokens, item_ids, item_name=lambda i: f"item_{i}") -> "Vocabulary":
        """Specials, then sorted word tokens, then one token per item.

        Word tokens that collide with an item name are folded into the
        item token.
        """
        items = sorted(set(item_ids))
        item_names = {item_name(i) for i in items}
        words = sorted(set(word_tokens) - {BOS, EOS} - item_names)
        tokens = [BOS, EOS] + words
        item_to_token = {}
        for item in items:
            item_to_token[item] = len(tokens)
            tokens.append(item_name(item))
        return Vocabulary(
            tokens=tuple(tokens),
            item_token_ids=frozenset(item_to_token.values()),
            item_to_token=item_to_token,
        )


def decoder_block(t_prev, x_fair_conv, x_curr, x_hist, weights, gamma: float, heads: int):
    """One fusion block: self-attention, then attention over the fair,
    current, and historical contexts, gated mix, feed-forward."""
    a0 = K.multi_head_attention(t_prev, t_prev, t_prev, *weights.self_attn, heads)
    a1 = K.multi_head_attention(a0, x_fair_conv, x_fair_conv, *weights.fair_attn, heads)
    a2 = K.multi_head_attention(a1, x_curr, x_curr, *weights.curr_attn, heads)
    a3 = K.multi_head_attention(a2, x_hist, x_hist, *weights.hist_attn, heads)
    a4 = K.add(K.scale(a2, gamma), K.scale(a3, 1.0 - gamma))
    return K.feed_forward(a4, *weights.ffn)


def token_distribution(
    t_i, x_fair_conv, vocab: Vocabulary, copyable_items, token_emb, heads_weights
):
    """Next-token distribution: vocabulary head + context bias head +
    copy head over item tokens from the context, renormalized.

    The copy head puts mass only on tokens of ``copyable_items``; every
    other token gets exactly zero from it. Returns a (1, |V|) tensor
    summing to 1.
    """
    if len(vocab) == 0:
        raise EmptyVocabulary("empty vocabulary")
    w_vocab, w_bias, w_copy = heads_weights
    tape = t_i.tape
    last = K.gather_rows(t_i, [t_i.value.shape[0] - 1])
    p1 = K.row_softmax(K.matmul(last, w_vocab))
    p2 = K.row_softmax(K.matmul(K.mean_rows(x_fair_conv), w_bias))
    copy_tokens = sorted(
        vocab.item_to_token[i] for i in set(copyable_items) if i in vocab.item_to_token
    )
    if copy_tokens:
        sub_emb = K.gather_rows(token_emb, copy_tokens)
        scores = K.matmul(K.matmul(last, w_copy), K.transpose(sub_emb))
        p3_sub = K.row_softmax(scores)
        scatter = np.zeros((len(copy_tokens), len(vocab)))
        for col, tok in enumerate(copy_tokens):
            scatter[col, tok] = 1.0
        p3 = K.matmul(p3_sub, tape.constant(scatter))
        total = K.add(K.add(p1, p2), p3)
    else:
        total = K.add(p1, p2)
    z = float(total.value.sum())
    return K.scale(total, 1.0 / z)


def conv_loss(step_distributions, target_ids, vocab_size: int):
    """Negative log-likelihood of the target tokens, summed over steps.

    ``step_distributions`` is a flat list of (1, |V|) tensors aligned
    with ``target_ids`` (already truncated and batched by the caller).
    """
    if len(step_distributions) != len(target_ids):
        raise TargetOutOfRange("one distribution per target token required")
    for t in target_ids:
        if not 0 <= t < vocab_size:
            raise TargetOutOfRange(f"target token {t} outside vocabulary")
    stacked = (
        K.concat_rows(list(step_distributions))
        if len(step_distributions) > 1
        else step_distributions[0]
    )
    mask = np.zeros((len(target_ids), vocab_size))
    for row, t in enumerate(target_ids):
        mask[row, t] = 1.0
    picked = K.row_sum(K.mul(stacked, stacked.tape.constant(mask)))
    return K.scale(K.sum_all(K.log(K.clamp(picked, PROB_EPS, 1.0))), -1.0)


def joint_conv_loss(j_cl, j_c, beta: float):
    """beta-weighted contrastive term plus the generation loss."""
    return K.add(K.scale(j_cl, beta), j_c)


def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def dist_n(utterances, n: int) -> float:
    """Distinct n-grams over total n-grams across the whole corpus."""
    if n < 1:
        raise NGramTooLong("n must be >= 1")
    grams = [g for utt in utterances for g in _ngrams(list(utt), n)]
    if not grams:
        raise NGramTooLong(f"no utterance long enough for {n}-grams")
    return len(set(grams)) / len(grams)


def bleu_n(candidates, references, n: int) -> float:
    """Corpus BLEU with uniform weights up to n and brevity penalty."""
    if n < 1:
        raise NGramTooLong("n must be >= 1")
    if len(candidates) != len(references):
        raise TargetOutOfRange("one reference per candidate required")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_precision = 0.0
    for k in range(1, n + 1):
        matched, total = 0, 0
        for cand, ref in zip(candidates, references):
            cand_counts = Counter(_ngrams(list(cand), k))
            ref_counts = Counter(_ngrams(list(ref), k))
            total += sum(cand_counts.values())
            matched += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if matched == 0 or total == 0:
            return 0.0
        log_precision += math.log(matched / total) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)
