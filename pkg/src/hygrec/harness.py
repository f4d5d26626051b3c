"""End-to-end orchestration: training, evaluation, loop simulation.

Protocol: each session's last ground-truth turn is held out for
evaluation; earlier ground truths are training targets. View bundles
are built from sessions truncated at their held-out turn, so the
evaluation target never appears in any hypergraph or context.

Training alternates one recommendation epoch with one conversation
epoch. Every batch rebuilds a fresh tape: interest matrices, pooled
session vectors, the contrastive objective over in-batch sessions, and
the task loss. All shuffling is seeded per (seed, task, epoch), so runs
are bit-reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .config import RunConfig
from .contrastive import session_view_vectors, total_cl_loss
from .corpus import (
    KnowledgeGraph,
    ReviewCorpus,
    SentimentLexicon,
    build_view_bundle,
    catalog_items,
    load_kg,
    load_lexicon,
    load_reviews,
    load_sessions,
    refresh_view_bundle,
)
from .decoder import (
    BOS,
    EOS,
    Vocabulary,
    conv_loss,
    decoder_block,
    joint_conv_loss,
    token_distribution,
)
from .errors import ConfigError, DataError, NonFiniteLoss
from .fairness import PopularityTable, fairness_report
from .model import InterestModel
from .recommender import (
    fuse_fair,
    joint_rec_loss,
    mrr_at_k,
    ndcg_at_k,
    rank_topk,
    rec_loss,
    recall_at_k,
    score_items,
)

log = logging.getLogger("hygrec")


@dataclass
class Dataset:
    sessions: list
    kg_entities: KnowledgeGraph
    kg_concepts: KnowledgeGraph
    reviews: ReviewCorpus
    lexicon: SentimentLexicon
    latents: dict | None = None


def load_dataset(cfg: RunConfig) -> Dataset:
    required = (
        "sessions",
        "dbpedia_triples",
        "dbpedia_nodes",
        "conceptnet_triples",
        "conceptnet_nodes",
        "reviews",
        "lexicon_pos",
        "lexicon_neg",
    )
    missing = [key for key in required if not getattr(cfg, key)]
    if missing:
        raise ConfigError(f"missing data path config keys: {', '.join(missing)}")
    try:
        latents = None
        if cfg.latents:
            with open(cfg.latents, "r", encoding="utf-8") as fh:
                latents = json.load(fh)
        return Dataset(
            sessions=load_sessions(cfg.sessions),
            kg_entities=load_kg(cfg.dbpedia_triples, cfg.dbpedia_nodes),
            kg_concepts=load_kg(cfg.conceptnet_triples, cfg.conceptnet_nodes),
            reviews=load_reviews(cfg.reviews),
            lexicon=load_lexicon(cfg.lexicon_pos, cfg.lexicon_neg),
            latents=latents,
        )
    except OSError as exc:
        raise DataError(f"cannot read dataset file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"bad latents file {cfg.latents}: {exc}") from exc


def dataset_from_synthetic(data) -> Dataset:
    return Dataset(
        sessions=data.sessions,
        kg_entities=data.kg_entities,
        kg_concepts=data.kg_concepts,
        reviews=data.reviews,
        lexicon=data.lexicon,
        latents=data.latents,
    )


@dataclass(frozen=True)
class Example:
    session_id: str
    turn_index: int
    item_id: int


def split_examples(sessions):
    """Last ground truth per session is evaluation; the rest train."""
    train, evaluation = [], []
    for rec in sessions:
        for pos, (turn, item) in enumerate(rec.ground_truth):
            ex = Example(rec.session_id, turn, item)
            if pos == len(rec.ground_truth) - 1:
                evaluation.append(ex)
            else:
                train.append(ex)
    return train, evaluation


def graph_sessions(sessions):
    """Sessions truncated at their held-out turn for graph building."""
    out = []
    for rec in sessions:
        if rec.ground_truth:
            out.append(rec.truncated(rec.ground_truth[-1][0]))
        else:
            out.append(rec)
    return out


def build_vocabulary(sessions, catalog) -> Vocabulary:
    item_names = {f"item_{i}" for i in catalog}
    words = {
        tok
        for rec in sessions
        for turn in rec.turns
        for tok in turn.tokens
        if tok not in item_names
    }
    return Vocabulary.build(words, catalog)


def truth_table(sessions) -> dict:
    """(session_id, turn_index) -> ground-truth item, for every entry."""
    return {
        (rec.session_id, turn): item
        for rec in sessions
        for turn, item in rec.ground_truth
    }


def popularity_counts(sessions) -> dict:
    """Interaction counts: item mentions plus ground-truth items."""
    counts: dict = {}
    for rec in sessions:
        for turn in rec.turns:
            for item in turn.item_ids:
                counts[item] = counts.get(item, 0) + 1
        for _turn, item in rec.ground_truth:
            counts[item] = counts.get(item, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# training


@dataclass
class System:
    """A model plus everything needed to score and decode."""

    cfg: RunConfig
    model: InterestModel
    store: K.ParameterStore
    bundle: object
    catalog: list
    vocab: Vocabulary
    gsessions: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)


def build_system(cfg: RunConfig, ds: Dataset, store=None) -> System:
    gsessions = graph_sessions(ds.sessions)
    catalog = catalog_items(ds.sessions, ds.reviews)
    if not catalog:
        raise DataError("dataset has no items")
    bundle = build_view_bundle(
        gsessions,
        ds.kg_entities,
        ds.kg_concepts,
        ds.reviews,
        ds.lexicon,
        k=cfg.khop,
        active_views=cfg.active_views,
        threads=cfg.threads,
    )
    vocab = build_vocabulary(ds.sessions, catalog)
    if store is None:
        store = K.ParameterStore(cfg.seed if cfg.seed is not None else 0)
    model = InterestModel(cfg, store, bundle, catalog, vocab)
    return System(
        cfg=cfg,
        model=model,
        store=store,
        bundle=bundle,
        catalog=catalog,
        vocab=vocab,
        gsessions=gsessions,
    )


def _batched(indices, size):
    for lo in range(0, len(indices), size):
        yield indices[lo : lo + size]


def _batch_svv(fwd, system: System, sids):
    wanted = set(sids)
    recs = [rec for rec in system.gsessions if rec.session_id in wanted]
    return session_view_vectors(fwd.interest_set(), system.model.bundle, recs)


def _check_finite(loss_value, context):
    if not np.isfinite(loss_value):
        raise NonFiniteLoss(f"non-finite loss ({loss_value}) during {context}")


def _rec_epoch(system: System, examples, sessions_by_id, epoch: int) -> float:
    cfg = system.cfg
    rng = np.random.default_rng((cfg.seed, 1, epoch))
    order = rng.permutation(len(examples))
    total, batches = 0.0, 0
    for batch_idx in _batched(order, cfg.batch_size):
        batch = [examples[i] for i in batch_idx]
        tape = K.Tape()
        fwd = system.model.forward(tape)
        svv = _batch_svv(fwd, system, [ex.session_id for ex in batch])
        j_cl = total_cl_loss(svv, cfg.tau, cfg.cl_level_mean, cfg.symmetrize)
        item_matrix = fwd.item_matrix()
        mha = fwd.mha_weights("fuse")
        rows = []
        labels = np.zeros((len(batch), len(system.catalog)))
        for i, ex in enumerate(batch):
            rec = sessions_by_id[ex.session_id]
            ctx = fwd.session_context(rec, upto_turn=ex.turn_index)
            fr = fuse_fair(svv, ctx, ex.session_id, mha, cfg.heads)
            rows.append(score_items(fr, item_matrix))
            labels[i, system.model.item_rows[ex.item_id]] = 1.0
        j_r = rec_loss(rows, labels)
        loss = joint_rec_loss(j_cl, j_r, cfg.alpha)
        _check_finite(float(loss.value), f"recommendation epoch {epoch}")
        K.backward(tape, loss)
        K.adam_step(system.store, lr=cfg.lr)
        total += float(j_r.value)
        batches += 1
    return total / max(batches, 1)


def _target_token_ids(system: System, rec, turn_index: int):
    tokens = list(rec.turns[turn_index].tokens) + [EOS]
    ids = [system.vocab.lookup[tok] for tok in tokens if tok in system.vocab.lookup]
    return ids[: system.cfg.trunc_len]


def _copyable_items(system: System, rec, upto_turn):
    turns = rec.turns[:upto_turn]
    window = turns[-system.cfg.context_window :]
    return sorted({i for t in window for i in t.item_ids})


def _conv_epoch(system: System, examples, sessions_by_id, epoch: int) -> float:
    cfg = system.cfg
    rng = np.random.default_rng((cfg.seed, 2, epoch))
    order = rng.permutation(len(examples))
    bos_id = system.vocab.lookup[BOS]
    total, batches = 0.0, 0
    for batch_idx in _batched(order, cfg.batch_size):
        batch = [examples[i] for i in batch_idx]
        tape = K.Tape()
        fwd = system.model.forward(tape)
        svv = _batch_svv(fwd, system, [ex.session_id for ex in batch])
        j_cl = total_cl_loss(svv, cfg.tau, cfg.cl_level_mean, cfg.symmetrize)
        mha = fwd.mha_weights("fuse")
        dec_w = fwd.decoder_weights()
        heads_w = fwd.vocab_heads()
        token_emb = fwd.token_embedding()
        dists, targets = [], []
        for ex in batch:
            rec = sessions_by_id[ex.session_id]
            ctx = fwd.session_context(rec, upto_turn=ex.turn_index)
            fr = fuse_fair(svv, ctx, ex.session_id, mha, cfg.heads)
            copyable = _copyable_items(system, rec, ex.turn_index)
            target_ids = _target_token_ids(system, rec, ex.turn_index)
            prefix = [bos_id]
            for tgt in target_ids:
                t_prev = K.gather_rows(token_emb, prefix)
                t_next = decoder_block(
                    t_prev, fr.x_fair_conv, ctx.x_curr, ctx.x_hist, dec_w,
                    cfg.gamma, cfg.heads,
                )
                dists.append(
                    token_distribution(
                        t_next, fr.x_fair_conv, system.vocab, copyable, token_emb, heads_w
                    )
                )
                targets.append(tgt)
                prefix.append(tgt)
        if not targets:
            continue
        j_c = conv_loss(dists, targets, len(system.vocab))
        loss = joint_conv_loss(j_cl, j_c, cfg.beta)
        _check_finite(float(loss.value), f"conversation epoch {epoch}")
        K.backward(tape, loss)
        K.adam_step(system.store, lr=cfg.lr)
        total += float(j_c.value)
        batches += 1
    return total / max(batches, 1)


def train(cfg: RunConfig, ds: Dataset) -> System:
    """Alternating-task optimization of the two joint objectives."""
    cfg.validate(require_seed=True)
    system = build_system(cfg, ds)
    sessions_by_id = {rec.session_id: rec for rec in ds.sessions}
    train_ex, _eval_ex = split_examples(ds.sessions)
    if not train_ex and cfg.epochs > 0:
        raise DataError("no training examples (every session has a single ground truth)")
    for epoch in range(cfg.epochs):
        if cfg.tasks == "rec":
            task = "rec"
        elif cfg.tasks == "conv":
            task = "conv"
        else:
            task = "rec" if epoch % 2 == 0 else "conv"
        if task == "rec":
            mean_loss = _rec_epoch(system, train_ex, sessions_by_id, epoch)
        else:
            mean_loss = _conv_epoch(system, train_ex, sessions_by_id, epoch)
        system.epoch_log.append({"epoch": epoch, "task": task, "loss": mean_loss})
        log.info("epoch=%d task=%s loss=%.6f", epoch, task, mean_loss)
    return system


# ---------------------------------------------------------------------------
# scoring / evaluation


def score_examples(system: System, sessions, examples, k: int):
    """Top-k recommendation lists for (session, turn) prediction points."""
    sessions_by_id = {rec.session_id: rec for rec in sessions}
    tape = K.Tape()
    fwd = system.model.forward(tape)
    svv = _batch_svv(fwd, system, [ex.session_id for ex in examples])
    mha = fwd.mha_weights("fuse")
    item_matrix = fwd.item_matrix()
    lists = []
    for ex in examples:
        rec = sessions_by_id[ex.session_id]
        ctx = fwd.session_context(rec, upto_turn=ex.turn_index)
        fr = fuse_fair(svv, ctx, ex.session_id, mha, system.cfg.heads)
        probs = score_items(fr, item_matrix)
        lists.append(
            rank_topk(
                probs.value, k, system.catalog,
                session_id=ex.session_id, turn_index=ex.turn_index,
            )
        )
    return lists


def ranking_metrics(lists, truth: dict, k_list) -> dict:
    metrics = {}
    for k in k_list:
        metrics[f"R@{k}"] = recall_at_k(lists, truth, k)
        metrics[f"MRR@{k}"] = mrr_at_k(lists, truth, k)
        metrics[f"NDCG@{k}"] = ndcg_at_k(lists, truth, k)
    return metrics


def evaluate_system(system: System, ds: Dataset, k_list=None) -> dict:
    k_list = list(k_list or system.cfg.k_list)
    _train_ex, eval_ex = split_examples(ds.sessions)
    if not eval_ex:
        raise DataError("no evaluation examples")
    lists = score_examples(system, ds.sessions, eval_ex, max(k_list))
    return ranking_metrics(lists, truth_table(ds.sessions), k_list)


def respond_session(system: System, rec, max_len: int = 32):
    """Greedy decode for one session; per-step distribution entropy is
    reported as a debugging aid."""
    tape = K.Tape()
    fwd = system.model.forward(tape)
    svv = _batch_svv(fwd, system, [rec.session_id])
    mha = fwd.mha_weights("fuse")
    ctx = fwd.session_context(rec)
    fr = fuse_fair(svv, ctx, rec.session_id, mha, system.cfg.heads)
    dec_w = fwd.decoder_weights()
    heads_w = fwd.vocab_heads()
    token_emb = fwd.token_embedding()
    copyable = _copyable_items(system, rec, len(rec.turns))
    bos_id = system.vocab.lookup[BOS]
    eos_id = system.vocab.lookup[EOS]
    prefix = [bos_id]
    steps = []
    for step in range(max_len):
        t_prev = K.gather_rows(token_emb, prefix)
        t_next = decoder_block(
            t_prev, fr.x_fair_conv, ctx.x_curr, ctx.x_hist, dec_w,
            system.cfg.gamma, system.cfg.heads,
        )
        dist = token_distribution(
            t_next, fr.x_fair_conv, system.vocab, copyable, token_emb, heads_w
        ).value.ravel()
        token_id = int(np.argmax(dist))
        positive = dist[dist > 0]
        entropy = float(-(positive * np.log(positive)).sum())
        steps.append(
            {
                "step": step,
                "token_id": token_id,
                "token": system.vocab.tokens[token_id],
                "entropy": entropy,
            }
        )
        if token_id == eos_id:
            break
        prefix.append(token_id)
    return steps


# ---------------------------------------------------------------------------
# feedback-loop simulation


def _user_accepts(cfg: RunConfig, latents, sid, ranked_items):
    if cfg.user_model == "always-accept-top1":
        return [ranked_items[0]] if ranked_items else []
    users = latents["users"]
    items = latents["items"]
    threshold = float(latents.get("threshold", cfg.accept_threshold))
    if sid not in users:
        return []
    u = np.asarray(users[sid], dtype=np.float64)
    for item in ranked_items:
        q = items.get(str(item))
        if q is not None and float(u @ np.asarray(q)) > threshold:
            return [item]
    return []


def simulate_loop(
    cfg: RunConfig,
    ds: Dataset,
    store=None,
    ranker: str = "trained",
    full_rebuild: bool = False,
) -> dict:
    """Closed-loop simulation: rank, accept, append, rebuild, measure.

    ``ranker='popularity'`` ranks every session by current interaction
    counts (updated with accepted items); ``'trained'`` scores with the
    model in ``store`` over incrementally refreshed views.
    """
    cfg.validate(require_seed=True)
    if ranker not in ("trained", "popularity"):
        raise ConfigError(f"unknown ranker {ranker!r}")
    if ranker == "trained" and store is None:
        raise ConfigError("trained ranker requires a checkpoint")
    if cfg.user_model == "preference-threshold" and not ds.latents:
        raise ConfigError("preference-threshold user model requires a latents file")

    sessions = graph_sessions(ds.sessions)
    catalog = catalog_items(ds.sessions, ds.reviews)
    pop_frozen = PopularityTable.from_counts(popularity_counts(sessions), catalog)
    truth = truth_table(ds.sessions)
    eval_turn = {rec.session_id: rec.ground_truth[-1][0] for rec in ds.sessions if rec.ground_truth}

    system = build_system(cfg, ds, store=store) if ranker == "trained" else None
    if system is not None:
        system.gsessions = sessions

    counts = popularity_counts(sessions)
    k_rank = max(cfg.k_list)
    trace = {
        "ranker": ranker,
        "user_model": cfg.user_model,
        "turns": [],
        "seed": cfg.seed,
    }
    for turn in range(cfg.turns):
        if ranker == "popularity":
            scores = np.asarray([counts.get(i, 0) for i in catalog], dtype=np.float64)
            lists = [
                rank_topk(scores, k_rank, catalog, session_id=rec.session_id,
                          turn_index=eval_turn.get(rec.session_id, 0))
                for rec in sessions
            ]
        else:
            examples = [
                Example(rec.session_id, len(rec.turns), 0) for rec in sessions
            ]
            lists = [
                replace(rl, turn_index=eval_turn.get(rl.session_id, 0))
                for rl in score_examples(system, sessions, examples, k_rank)
            ]

        accepted = {}
        for rl in lists:
            taken = _user_accepts(cfg, ds.latents or {}, rl.session_id, list(rl.item_ids))
            if taken:
                accepted[rl.session_id] = taken

        eval_lists = [rl for rl in lists if (rl.session_id, rl.turn_index) in truth]
        record = {
            "turn": turn,
            "fairness": fairness_report(lists, pop_frozen, len(catalog), cfg.k_list),
            "ranking": ranking_metrics(eval_lists, truth, cfg.k_list) if eval_lists else {},
            "accepted": {sid: accepted[sid] for sid in sorted(accepted)},
        }
        trace["turns"].append(record)

        if accepted:
            sessions = [
                rec.with_extra_items(accepted[rec.session_id])
                if rec.session_id in accepted
                else rec
                for rec in sessions
            ]
            for items in accepted.values():
                for item in items:
                    counts[item] = counts.get(item, 0) + 1
            if system is not None:
                if full_rebuild:
                    system.model.bundle = build_view_bundle(
                        sessions, ds.kg_entities, ds.kg_concepts, ds.reviews,
                        ds.lexicon, k=cfg.khop, active_views=cfg.active_views,
                        threads=cfg.threads, turn_index=turn + 1,
                    )
                else:
                    system.model.bundle = refresh_view_bundle(
                        system.model.bundle, sessions, set(accepted),
                        ds.kg_entities, ds.kg_concepts, ds.reviews, ds.lexicon,
                        k=cfg.khop, threads=cfg.threads, turn_index=turn + 1,
                    )
                system.gsessions = sessions
    return trace


# ---------------------------------------------------------------------------
# reporting


def render_report(payload) -> tuple[str, str]:
    """(canonical JSON, plain-text table) for metrics or loop traces."""
    json_text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    lines = []
    if isinstance(payload, dict) and "turns" in payload:
        header = f"loop ranker={payload.get('ranker')} user_model={payload.get('user_model')}"
        lines.append(header)
        for record in payload["turns"]:
            flat = {**record.get("fairness", {}), **record.get("ranking", {})}
            cells = " ".join(f"{k}={flat[k]:.6f}" for k in sorted(flat))
            lines.append(f"turn={record['turn']:03d} {cells}")
    elif isinstance(payload, dict):
        width = max((len(str(k)) for k in payload), default=0)
        for key in sorted(payload):
            value = payload[key]
            shown = f"{value:.6f}" if isinstance(value, float) else str(value)
            lines.append(f"{str(key).ljust(width)}  {shown}")
    else:
        lines.append(str(payload))
    return json_text, "\n".join(lines) + "\n"
