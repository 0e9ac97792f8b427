"""Interaction-log ingestion, splits, and a planted-interest synthetic generator.

Logs are (user, item, timestamp) triples with string tokens mapped to dense
indices by first appearance. Splits are user-level: train users keep full
sequences; validation and test users get a chronological (profile, holdout)
pair so retrieval is scored on unseen suffixes.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class InteractionLog:
    user_ids: np.ndarray  # (n,) dense user indices
    item_ids: np.ndarray  # (n,) dense item indices
    timestamps: np.ndarray  # (n,) int64 seconds
    user_tokens: list  # dense index -> original token
    item_tokens: list

    @property
    def num_users(self):
        return len(self.user_tokens)

    @property
    def num_items(self):
        return len(self.item_tokens)

    def __len__(self):
        return len(self.user_ids)


@dataclass
class DatasetSplit:
    train: dict  # user -> full chronological item list
    valid: dict  # user -> (profile items, holdout items)
    test: dict  # user -> (profile items, holdout items)
    dropped_users: int


@dataclass
class SyntheticSpec:
    n_clusters: int = 4
    items_per_cluster: int = 50
    users: int = 500
    interests_per_user: int = 2
    seq_len: int = 20
    noise_rate: float = 0.05
    seed: int = 7
    popularity_decay: float = 0.7

    def __post_init__(self):
        if self.interests_per_user > self.n_clusters:
            raise ValueError(
                f"interests_per_user {self.interests_per_user} exceeds "
                f"n_clusters {self.n_clusters}"
            )
        if not (0.0 <= self.noise_rate < 1.0):
            raise ValueError(f"noise_rate must be in [0,1), got {self.noise_rate}")
        if not (0.0 < self.popularity_decay <= 1.0):
            raise ValueError(f"popularity_decay must be in (0,1], got {self.popularity_decay}")
        if self.seq_len > self.n_clusters * self.items_per_cluster:
            raise ValueError("seq_len larger than the item catalog")


def _delimiter_for(path, fmt):
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "tsv"
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unsupported format {fmt!r}, expected tsv or csv")
    return "\t" if fmt == "tsv" else ","


def ingest(path, fmt=None):
    """Parse a user/item/timestamp log file into an InteractionLog.

    Exact duplicate triples are dropped (first occurrence wins); tokens get
    dense indices in first-appearance order.
    """
    delim = _delimiter_for(path, fmt)
    user_index, item_index = {}, {}
    user_tokens, item_tokens = [], []
    users, items, stamps = [], [], []
    seen = set()
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter=delim), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 columns, got {len(row)}")
            user_tok, item_tok, ts_tok = row[0].strip(), row[1].strip(), row[2].strip()
            if not user_tok or not item_tok:
                raise ValueError(f"{path}: line {lineno}: empty user or item token")
            try:
                ts = int(ts_tok)
            except ValueError:
                raise ValueError(
                    f"{path}: line {lineno}: timestamp {ts_tok!r} is not an integer"
                ) from None
            triple = (user_tok, item_tok, ts)
            if triple in seen:
                continue
            seen.add(triple)
            if user_tok not in user_index:
                user_index[user_tok] = len(user_tokens)
                user_tokens.append(user_tok)
            if item_tok not in item_index:
                item_index[item_tok] = len(item_tokens)
                item_tokens.append(item_tok)
            users.append(user_index[user_tok])
            items.append(item_index[item_tok])
            stamps.append(ts)
    if not users:
        raise ValueError(f"{path}: no interactions found")
    return InteractionLog(
        user_ids=np.array(users, dtype=np.int64),
        item_ids=np.array(items, dtype=np.int64),
        timestamps=np.array(stamps, dtype=np.int64),
        user_tokens=user_tokens,
        item_tokens=item_tokens,
    )


def write_interactions(log, path, fmt=None):
    """Write a log back to disk in token form; ingest() of the result round-trips."""
    delim = _delimiter_for(path, fmt)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter=delim, lineterminator="\n")
        for u, i, t in zip(log.user_ids, log.item_ids, log.timestamps):
            writer.writerow([log.user_tokens[u], log.item_tokens[i], int(t)])


def write_index_maps(log, prefix):
    """Persist token -> dense index maps as two-column text files."""
    for kind, tokens in (("users", log.user_tokens), ("items", log.item_tokens)):
        with open(f"{prefix}.{kind}.map", "w") as f:
            for idx, tok in enumerate(tokens):
                f.write(f"{tok}\t{idx}\n")


def read_index_map(path):
    mapping = {}
    with open(path) as f:
        for line in f:
            tok, idx = line.rstrip("\n").split("\t")
            mapping[tok] = int(idx)
    return mapping


def user_sequences(log):
    """Per-user chronological item lists (timestamp order, input order on ties)."""
    order = np.argsort(log.timestamps, kind="stable")
    seqs = {}
    for pos in order:
        seqs.setdefault(int(log.user_ids[pos]), []).append(int(log.item_ids[pos]))
    return seqs


def split(log, ratios=(0.8, 0.1, 0.1), seed=0, min_interactions=5, holdout_frac=0.2):
    """User-level split with seeded shuffling.

    Users with fewer than min_interactions interactions are dropped (counted).
    Validation/test users' sequences are cut chronologically into a profile
    prefix and a holdout suffix of about holdout_frac of the sequence.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    seqs = user_sequences(log)
    kept = [u for u in sorted(seqs) if len(seqs[u]) >= min_interactions]
    dropped = len(seqs) - len(kept)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kept))
    shuffled = [kept[i] for i in order]
    n = len(shuffled)
    n_train = int(n * ratios[0])
    n_valid = int(n * ratios[1])
    train_users = shuffled[:n_train]
    valid_users = shuffled[n_train:n_train + n_valid]
    test_users = shuffled[n_train + n_valid:]

    def profile_holdout(items):
        n_profile = max(1, int(len(items) * (1.0 - holdout_frac)))
        return items[:n_profile], items[n_profile:]

    return DatasetSplit(
        train={u: seqs[u] for u in train_users},
        valid={u: profile_holdout(seqs[u]) for u in valid_users},
        test={u: profile_holdout(seqs[u]) for u in test_users},
        dropped_users=dropped,
    )


def write_split_manifest(split_result, path):
    """One `user<TAB>tag` line per user, tags in {train, valid, test}."""
    with open(path, "w") as f:
        for tag, users in (("train", split_result.train), ("valid", split_result.valid),
                           ("test", split_result.test)):
            for u in users:
                f.write(f"{u}\t{tag}\n")


def kcore_filter(log, k=10):
    """Iteratively drop users and items with fewer than k interactions.

    Returns a re-indexed InteractionLog (tokens preserved, dense ids reassigned
    by first appearance among surviving rows).
    """
    users, items, stamps = log.user_ids, log.item_ids, log.timestamps
    keep = np.ones(len(users), dtype=bool)
    while True:
        u_counts = np.bincount(users[keep], minlength=log.num_users)
        i_counts = np.bincount(items[keep], minlength=log.num_items)
        bad = keep & ((u_counts[users] < k) | (i_counts[items] < k))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise ValueError(f"{k}-core filtering removed every interaction")
    user_index, item_index = {}, {}
    user_tokens, item_tokens = [], []
    new_users, new_items = [], []
    for pos in np.flatnonzero(keep):
        ut = log.user_tokens[users[pos]]
        it = log.item_tokens[items[pos]]
        if ut not in user_index:
            user_index[ut] = len(user_tokens)
            user_tokens.append(ut)
        if it not in item_index:
            item_index[it] = len(item_tokens)
            item_tokens.append(it)
        new_users.append(user_index[ut])
        new_items.append(item_index[it])
    return InteractionLog(
        user_ids=np.array(new_users, dtype=np.int64),
        item_ids=np.array(new_items, dtype=np.int64),
        timestamps=stamps[keep].copy(),
        user_tokens=user_tokens,
        item_tokens=item_tokens,
    )


def generate_synthetic(spec):
    """Planted-interest log: items live in clusters, users sample from their
    own clusters with a skewed within-cluster popularity.

    Each user draws interests_per_user distinct clusters. Sequence positions
    pick one of the user's clusters uniformly, then an item with popularity
    weight popularity_decay**local_rank among that cluster's items the user
    has not taken yet; with probability noise_rate the position instead takes
    a uniform unused item from the whole catalog. Sampling never repeats an
    item within a user, so holdout suffixes are disjoint from profiles and
    carry real signal (the next-most-popular items of the user's clusters).
    Timestamps are the position index, so generation order is chronological.

    Returns (InteractionLog, labels) where labels[i] is item i's cluster.
    """
    rng = np.random.default_rng(spec.seed)
    num_items = spec.n_clusters * spec.items_per_cluster
    labels = np.repeat(np.arange(spec.n_clusters), spec.items_per_cluster)
    local_rank = np.tile(np.arange(spec.items_per_cluster), spec.n_clusters)
    popularity = spec.popularity_decay ** local_rank
    users, items, stamps = [], [], []
    for u in range(spec.users):
        clusters = rng.choice(spec.n_clusters, size=spec.interests_per_user, replace=False)
        used = np.zeros(num_items, dtype=bool)
        for t in range(spec.seq_len):
            if rng.random() < spec.noise_rate:
                pool = np.flatnonzero(~used)
                item = int(rng.choice(pool))
            else:
                c = int(clusters[rng.integers(len(clusters))])
                in_cluster = (labels == c) & ~used
                if not in_cluster.any():
                    in_cluster = ~used
                w = popularity * in_cluster
                item = int(rng.choice(num_items, p=w / w.sum()))
            used[item] = True
            users.append(u)
            items.append(item)
            stamps.append(t)
    log = InteractionLog(
        user_ids=np.array(users, dtype=np.int64),
        item_ids=np.array(items, dtype=np.int64),
        timestamps=np.array(stamps, dtype=np.int64),
        user_tokens=[f"u{u}" for u in range(spec.users)],
        item_tokens=[f"i{i}" for i in range(num_items)],
    )
    return log, labels


def write_labels(labels, item_tokens, path):
    """Ground-truth cluster per item, `item_token<TAB>cluster` lines.

    Keyed by token so the labels survive re-ingestion, which reassigns dense
    indices by first appearance.
    """
    with open(path, "w") as f:
        for tok, c in zip(item_tokens, labels):
            f.write(f"{tok}\t{int(c)}\n")


def read_labels(path):
    """Token -> cluster dict from a write_labels file."""
    mapping = {}
    with open(path) as f:
        for line in f:
            tok, c = line.rstrip("\n").split("\t")
            mapping[tok] = int(c)
    return mapping
