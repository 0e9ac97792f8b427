"""Clustering diagnostics for interest and item embeddings.

Distance is the negative dot product, so assignment picks the centroid with
the largest dot product. Centroids update to cluster means; because a mean
update is not guaranteed to lower this objective, an iteration that would
raise it is reverted and the loop stops, keeping the objective non-increasing.

INTER: one global clustering over every selected user's interests plus their
profile and holdout items; the score is the fraction of (interest, positive
item) pairs sharing a cluster, where positives are the profile items whose
attention weight clears the threshold. INTRA: one clustering per user with
k = the interest count; the score is the fraction of users whose interests
land in pairwise-distinct clusters.
"""

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor
from .losses import select_positives
from .model import BehaviorSequence, embed, extract_interests


@dataclass
class ClusterAssignment:
    centroids: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,)
    n_clusters: int
    objective: float  # sum of negative dots to assigned centroids
    iterations: int
    reseeded: int  # empty-cluster repairs


@dataclass
class DiagnosticsReport:
    inter: float
    intra: float
    k_global: int
    init_mode: str
    users: int
    skipped_interests: int


def _values(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _assign(vectors, centroids):
    return np.argmax(vectors @ centroids.T, axis=1)


def _objective(vectors, labels, centroids):
    return float(-(vectors * centroids[labels]).sum())


def _repair_empties(vectors, labels, centroids):
    """Reseed each empty cluster at the point farthest from its centroid."""
    reseeded = 0
    for _ in range(centroids.shape[0]):
        counts = np.bincount(labels, minlength=centroids.shape[0])
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        dots = (vectors * centroids[labels]).sum(axis=1)
        for c in empty:
            far = int(np.argmin(dots))
            centroids[c] = vectors[far]
            dots[far] = np.inf  # one reseed point per empty cluster
            reseeded += 1
        labels = _assign(vectors, centroids)
    return labels, centroids, reseeded


def _init_kmeanspp(vectors, k, rng):
    n = vectors.shape[0]
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        dist = -(vectors @ vectors[chosen].T)  # negative dot to each chosen
        nearest = dist.min(axis=1)
        w = nearest - nearest.min()
        w = w * w
        w[chosen] = 0.0
        if w.sum() == 0.0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=w / w.sum())))
    return vectors[chosen].copy()


def kmeans(vectors, k, init_mode="kmeanspp", seed=0, max_iter=100,
           init_centroids=None):
    """Lloyd iterations with dot-product assignment and mean updates.

    init_mode "kmeanspp" adapts the usual seeding by shifting negative-dot
    distances to be non-negative before squaring; "user_interests" seeds the
    centroids with the given vectors (typically a user's interest vectors).
    """
    v = np.asarray(_values(vectors), dtype=np.float64)
    n = v.shape[0]
    if k < 2:
        raise ValueError(f"need at least 2 clusters, got k={k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available vectors")
    rng = np.random.default_rng(seed)
    if init_mode == "kmeanspp":
        centroids = _init_kmeanspp(v, k, rng)
    elif init_mode == "user_interests":
        if init_centroids is None:
            raise ValueError("user_interests init requires init_centroids")
        centroids = np.asarray(_values(init_centroids), dtype=np.float64).copy()
        if centroids.shape != (k, v.shape[1]):
            raise ValueError(f"init_centroids shape {centroids.shape} does not "
                             f"match (k={k}, d={v.shape[1]})")
    else:
        raise ValueError(f"unknown init_mode {init_mode!r}")

    labels = _assign(v, centroids)
    labels, centroids, reseeded = _repair_empties(v, labels, centroids)
    obj = _objective(v, labels, centroids)
    iterations = 0
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = v[members].mean(axis=0)
        new_labels = _assign(v, new_centroids)
        new_labels, new_centroids, r = _repair_empties(v, new_labels, new_centroids)
        new_obj = _objective(v, new_labels, new_centroids)
        if new_obj > obj:
            break  # mean update would raise the dot-product objective; keep previous
        moved = not np.array_equal(new_labels, labels)
        labels, centroids, obj = new_labels, new_centroids, new_obj
        reseeded += r
        iterations += 1
        if not moved:
            break
    return ClusterAssignment(centroids=centroids, labels=labels, n_clusters=k,
                             objective=obj, iterations=iterations,
                             reseeded=reseeded)


def inter_score(assignment, interest_items):
    """Fraction of (interest, positive item) pairs sharing a cluster.

    interest_items maps an interest row index (into the clustered matrix) to
    the row indices of its positive items. Interests with no positives are
    skipped and counted. Returns (score, skipped).
    """
    labels = assignment.labels
    hits = total = skipped = 0
    for interest_row in sorted(interest_items):
        item_rows = interest_items[interest_row]
        if len(item_rows) == 0:
            skipped += 1
            continue
        for row in item_rows:
            hits += int(labels[interest_row] == labels[row])
            total += 1
    if total == 0:
        raise ValueError("no (interest, positive item) pairs to score")
    return hits / total, skipped


def intra_score(per_user_labels, num_interests):
    """Fraction of users whose interests land in pairwise-distinct clusters.

    per_user_labels: per user, the cluster labels of that user's interest
    vectors. Degenerate clusterings with fewer than num_interests distinct
    labels count as not-distinct by construction.
    """
    if not per_user_labels:
        raise ValueError("no users to score")
    distinct = sum(1 for labels in per_user_labels
                   if len(set(int(l) for l in labels)) == num_interests)
    return distinct / len(per_user_labels)


def _user_vectors(params, profile, holdout, hp):
    """Interests, attention positives, and the distinct item ids to cluster."""
    seq = BehaviorSequence.from_items(0, profile, hp.max_seq_len)
    x = embed(seq, params)
    iset = extract_interests(x, seq.mask, params)
    sets = select_positives(iset.attention, seq.mask, hp.pos_threshold)
    window = seq.item_ids[seq.mask]
    pos_items = [np.unique(window[pos]).tolist() for pos in sets.positives]
    item_ids = sorted(set(profile) | set(holdout))
    return iset.interests.value, pos_items, item_ids


def diagnose(params, part, hp, k_global=None, init_mode="kmeanspp", seed=0):
    """INTER and INTRA scores over a (profile, holdout) split part."""
    if not part:
        raise ValueError("empty split part")
    users = sorted(part)
    n_z = hp.num_interests
    emb = params.item_emb.value

    per_user = []
    for user in users:
        profile, holdout = part[user]
        per_user.append(_user_vectors(params, profile, holdout, hp))
    # global matrix: all interests first, then the distinct items
    interest_blocks = [u[0] for u in per_user]
    item_rows = {}
    for _, _, item_ids in per_user:
        for item in item_ids:
            if item not in item_rows:
                item_rows[item] = len(item_rows)
    item_blocks = [emb[i] for i in sorted(item_rows, key=item_rows.get)]
    n_interest_rows = n_z * len(users)
    matrix = np.vstack([np.vstack(interest_blocks), np.vstack(item_blocks)])

    interest_items = {}
    for u, (_, pos_items, _) in enumerate(per_user):
        for kk in range(n_z):
            rows = [n_interest_rows + item_rows[i] for i in pos_items[kk]]
            interest_items[u * n_z + kk] = rows
    if k_global is None:
        k_global = min(n_z * len(users), 64)
    k_global = min(k_global, matrix.shape[0])
    if init_mode == "user_interests":
        # seed the global clustering with a sample of the interest rows
        chosen = np.random.default_rng(seed).choice(
            n_interest_rows, size=k_global, replace=False)
        assignment = kmeans(matrix, k_global, init_mode=init_mode, seed=seed,
                            init_centroids=matrix[np.sort(chosen)])
    else:
        assignment = kmeans(matrix, k_global, init_mode=init_mode, seed=seed)
    inter, skipped = inter_score(assignment, interest_items)

    per_user_labels = []
    for interests, _, item_ids in per_user:
        local = np.vstack([interests, emb[item_ids]])
        if init_mode == "user_interests":
            local_assign = kmeans(local, n_z, init_mode=init_mode, seed=seed,
                                  init_centroids=interests)
        else:
            local_assign = kmeans(local, n_z, init_mode=init_mode, seed=seed)
        per_user_labels.append(local_assign.labels[:n_z])
    intra = intra_score(per_user_labels, n_z)
    return DiagnosticsReport(inter=inter, intra=intra, k_global=k_global,
                             init_mode=init_mode, users=len(users),
                             skipped_interests=skipped)


def export_embeddings(params, user_interests, item_ids, path):
    """TSV rows: kind, owner id, index, then the vector columns.

    user_interests maps user id to an (n_z, d) matrix; item rows follow with
    index 0. Floats use repr precision so a read round-trips exactly.
    """
    emb = params.item_emb.value
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(user_interests):
            z = _values(user_interests[user])
            for k in range(z.shape[0]):
                vec = "\t".join(f"{x:.17g}" for x in z[k])
                fh.write(f"interest\t{user}\t{k}\t{vec}\n")
                rows += 1
        for item in sorted(set(int(i) for i in item_ids)):
            vec = "\t".join(f"{x:.17g}" for x in emb[item])
            fh.write(f"item\t{item}\t0\t{vec}\n")
            rows += 1
    return rows


def read_embeddings(path):
    """Parse an export_embeddings file; returns list of (kind, owner, index, vector)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            kind, owner, index = parts[0], int(parts[1]), int(parts[2])
            vec = np.array([float(x) for x in parts[3:]])
            out.append((kind, owner, index, vec))
    return out


def report_record(report):
    """Single-line machine-readable diagnostics record."""
    return (f"inter={report.inter:.6f} intra={report.intra:.6f} "
            f"k_global={report.k_global} init={report.init_mode} "
            f"users={report.users} skipped_interests={report.skipped_interests}")
