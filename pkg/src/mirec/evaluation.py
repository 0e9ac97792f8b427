"""Retrieval and ranking metrics.

An item's relevance to a user is the max dot product over the user's interest
vectors. Retrieval scores the full catalog exactly (a blocked variant exists
for memory-bound runs and is result-identical). Metrics follow the
recalled-positives convention for NDCG: the ideal ranking places the h items
actually recalled at the top, so NDCG is 1 whenever the hits are consecutive
from rank 1.
"""

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor
from .model import BehaviorSequence, embed, extract_interests


@dataclass
class Ranking:
    item_ids: np.ndarray  # ordered by non-increasing score, ties by lower id
    scores: np.ndarray
    truncated: bool = False  # fewer than the requested n were available


@dataclass
class EvalReport:
    cutoffs: tuple
    recall: dict
    ndcg: dict
    hitrate: dict
    users_evaluated: int
    users_skipped: int
    averaged_over: str = "users"


def _values(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def max_interest_scores(interests, item_emb):
    """Per-item relevance: max over interests of the dot product."""
    z = _values(interests)
    emb = _values(item_emb)
    return (emb @ z.T).max(axis=1)


def _rank_all(scores):
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order


def retrieve_topn(interests, item_emb, n, exclude=()):
    """Top-n items by max-over-interests dot product.

    Excluded ids never appear. If fewer than n candidates exist the ranking
    holds all of them and is flagged truncated.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scores = max_interest_scores(interests, item_emb)
    exclude = np.unique(np.asarray(list(exclude), dtype=np.int64))
    if exclude.size:
        scores = scores.copy()
        scores[exclude] = -np.inf
    order = _rank_all(scores)
    available = scores.shape[0] - exclude.size
    take = min(n, available)
    top = order[:take]
    return Ranking(item_ids=top, scores=scores[top], truncated=take < n)


def retrieve_topn_blocked(interests, item_emb, n, exclude=(), block_size=4096):
    """Same result as retrieve_topn, scoring the catalog in blocks."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    z = _values(interests)
    emb = _values(item_emb)
    num_items = emb.shape[0]
    exclude_mask = np.zeros(num_items, dtype=bool)
    excl = np.asarray(list(exclude), dtype=np.int64)
    if excl.size:
        exclude_mask[excl] = True
    kept_ids, kept_scores = [], []
    for start in range(0, num_items, block_size):
        stop = min(start + block_size, num_items)
        block_scores = (emb[start:stop] @ z.T).max(axis=1)
        block_scores[exclude_mask[start:stop]] = -np.inf
        ids = np.arange(start, stop)
        take = min(n, stop - start)
        order = np.lexsort((ids, -block_scores))[:take]
        kept_ids.append(ids[order])
        kept_scores.append(block_scores[order])
    ids = np.concatenate(kept_ids)
    scores = np.concatenate(kept_scores)
    finite = scores > -np.inf
    ids, scores = ids[finite], scores[finite]
    order = np.lexsort((ids, -scores))
    available = num_items - int(exclude_mask.sum())
    take = min(n, available)
    top = order[:take]
    return Ranking(item_ids=ids[top], scores=scores[top], truncated=take < n)


def _hit_ranks(topn_ids, relevant):
    return [r for r, item in enumerate(topn_ids, start=1) if item in relevant]


def recall_at(topn_ids, relevant):
    if not relevant:
        raise ValueError("recall needs a non-empty relevant set")
    hits = sum(1 for item in topn_ids if item in relevant)
    return hits / len(relevant)


def ndcg_at(topn_ids, relevant):
    if not relevant:
        raise ValueError("ndcg needs a non-empty relevant set")
    ranks = _hit_ranks(topn_ids, relevant)
    if not ranks:
        return 0.0
    dcg = sum(1.0 / np.log2(r + 1) for r in ranks)
    idcg = sum(1.0 / np.log2(i + 1) for i in range(1, len(ranks) + 1))
    return dcg / idcg


def hit_at(topn_ids, relevant):
    if not relevant:
        raise ValueError("hit rate needs a non-empty relevant set")
    return 1.0 if any(item in relevant for item in topn_ids) else 0.0


def _averaged(per_user, rankings, relevants):
    vals, skipped = [], 0
    for ids, rel in zip(rankings, relevants):
        if not rel:
            skipped += 1
            continue
        vals.append(per_user(ids, rel))
    if not vals:
        raise ValueError("no users with a non-empty relevant set")
    return float(np.mean(vals)), skipped


def metric_recall(rankings, relevants):
    """Mean over users of |top ∩ relevant| / |relevant|; (value, skipped)."""
    return _averaged(recall_at, rankings, relevants)


def metric_ndcg(rankings, relevants):
    """Mean over users of recalled-positives NDCG; (value, skipped)."""
    return _averaged(ndcg_at, rankings, relevants)


def metric_hitrate(rankings, relevants):
    """Fraction of users with at least one hit; (value, skipped)."""
    return _averaged(hit_at, rankings, relevants)


def user_interests_for_profile(profile_items, params, max_seq_len):
    """Interest vectors for a profile, truncated to the last max_seq_len items."""
    seq = BehaviorSequence.from_items(0, profile_items, max_seq_len)
    x = embed(seq, params)
    return extract_interests(x, seq.mask, params).interests.value


def evaluate_split(params, part, hp, cutoffs=(20, 50), blocked=False):
    """Score every (profile, holdout) user in a split part.

    Candidates exclude all profile items; holdout items that also occur in
    the profile are dropped from the relevant set (they cannot be retrieved),
    and users left without relevant items are skipped and counted.
    """
    cutoffs = tuple(sorted(set(int(c) for c in cutoffs)))
    if not cutoffs or cutoffs[0] < 1:
        raise ValueError(f"cutoffs must be positive, got {cutoffs}")
    n_max = cutoffs[-1]
    retrieve = retrieve_topn_blocked if blocked else retrieve_topn
    rankings, relevants = [], []
    for user in sorted(part):
        profile, holdout = part[user]
        z = user_interests_for_profile(profile, params, hp.max_seq_len)
        ranking = retrieve(z, params.item_emb, n_max, exclude=set(profile))
        rankings.append(ranking.item_ids)
        relevants.append(set(holdout) - set(profile))
    recall, ndcg, hitrate = {}, {}, {}
    skipped = 0
    for n in cutoffs:
        clipped = [ids[:n] for ids in rankings]
        recall[n], skipped = metric_recall(clipped, relevants)
        ndcg[n], _ = metric_ndcg(clipped, relevants)
        hitrate[n], _ = metric_hitrate(clipped, relevants)
    return EvalReport(
        cutoffs=cutoffs, recall=recall, ndcg=ndcg, hitrate=hitrate,
        users_evaluated=len(rankings) - skipped, users_skipped=skipped,
    )


def report_text(report):
    """Human-readable key: value block; deterministic, no timestamps."""
    lines = [
        f"averaged_over: {report.averaged_over}",
        f"users_evaluated: {report.users_evaluated}",
        f"users_skipped: {report.users_skipped}",
    ]
    for n in report.cutoffs:
        lines.append(f"recall@{n}: {report.recall[n]:.6f}")
        lines.append(f"ndcg@{n}: {report.ndcg[n]:.6f}")
        lines.append(f"hitrate@{n}: {report.hitrate[n]:.6f}")
    return "\n".join(lines) + "\n"


def report_record(report, **meta):
    """One-line machine-readable record: space-separated key=value pairs."""
    parts = [f"{k}={v}" for k, v in meta.items()]
    parts.append("cutoffs=" + ",".join(str(n) for n in report.cutoffs))
    for n in report.cutoffs:
        parts.append(f"recall@{n}={report.recall[n]:.6f}")
        parts.append(f"ndcg@{n}={report.ndcg[n]:.6f}")
        parts.append(f"hitrate@{n}={report.hitrate[n]:.6f}")
    parts.append(f"users={report.users_evaluated}")
    parts.append(f"skipped={report.users_skipped}")
    return " ".join(parts)
