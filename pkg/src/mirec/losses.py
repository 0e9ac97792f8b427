"""The four training objectives.

loss_rec is a sampled-softmax next-item likelihood on the interest closest to
the target. The three regularizers run "backward" from extracted interests to
the sequence: loss_recontrast pulls each interest toward its high-attention
items and away from everything else (InfoNCE), loss_reattend aligns
dot-product relevance with the extractor's attention map, and
loss_reconstruct decodes each interest back into its positive items.

Per-example functions return per-example sums; compute_batch_losses runs the
batched graph and returns batch means. Discrete selectors (positive sets, the
argmax interest, sampled negative ids) are chosen from current values and
treated as constants by the gradient.
"""

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .model import interest_forward


@dataclass
class ContrastSets:
    """Per-interest index sets for the contrastive loss.

    positives[k] and seq_negatives[k] partition the valid sequence positions;
    out_seq_items rows (one per interest) are sampled item ids that never
    appear in the sequence. Other interests are implicit negatives.
    """

    positives: list
    seq_negatives: list
    out_seq_items: np.ndarray | None = None


@dataclass
class LossBundle:
    rec: float
    contrast: float
    attend: float
    reconstruct: float
    total: float


def resolve_pos_threshold(pos_threshold, valid_len):
    """Fixed value pass-through; "adaptive" means 1/L for the example's valid length."""
    if pos_threshold == "adaptive":
        if valid_len < 1:
            raise ValueError("adaptive threshold needs at least one valid position")
        return 1.0 / float(valid_len)
    return float(pos_threshold)


def select_positives_batch(att_values, mask, pos_threshold):
    """Boolean (pos_mask, neg_mask) of shape (B, num_interests, max_seq_len)."""
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ValueError("every example needs at least one valid position")
    if pos_threshold == "adaptive":
        thr = (1.0 / lengths)[:, None, None]
    else:
        thr = float(pos_threshold)
    valid = mask[:, None, :]
    pos_mask = (att_values > thr) & valid
    neg_mask = valid & ~pos_mask
    return pos_mask, neg_mask


def select_positives(attention, mask, pos_threshold):
    """Split one example's valid positions into positives (weight above the
    threshold, strictly) and in-sequence negatives, per interest."""
    att = attention.value if isinstance(attention, Tensor) else np.asarray(attention)
    pos_mask, neg_mask = select_positives_batch(att[None], np.asarray(mask, bool)[None],
                                                pos_threshold)
    positives = [np.flatnonzero(pos_mask[0, k]) for k in range(att.shape[0])]
    seq_negatives = [np.flatnonzero(neg_mask[0, k]) for k in range(att.shape[0])]
    return ContrastSets(positives=positives, seq_negatives=seq_negatives)


def sample_out_of_seq_batch(item_ids, mask, num_items, num_interests, sizes, rng,
                            max_rounds=1000):
    """Sample per-interest negative item ids outside each example's sequence.

    sizes is per-example; rows are padded to max(sizes) with sample_mask
    marking real draws. Items are drawn uniformly with replacement from the
    complement of the sequence, resampled on collision.
    """
    item_ids = np.asarray(item_ids)
    mask = np.asarray(mask, dtype=bool)
    sizes = np.asarray(sizes, dtype=np.int64)
    b = item_ids.shape[0]
    s_max = int(sizes.max()) if b else 0
    out = np.zeros((b, num_interests, s_max), dtype=np.int64)
    sample_mask = np.zeros((b, num_interests, s_max), dtype=bool)
    for i in range(b):
        forbidden = np.unique(item_ids[i, mask[i]])
        if num_items - forbidden.size < 1:
            raise ValueError(
                f"example {i}: sequence covers all {num_items} items, "
                "no out-of-sequence negatives exist"
            )
        s = int(sizes[i])
        if s == 0:
            continue
        draw = rng.integers(0, num_items, size=(num_interests, s))
        for _ in range(max_rounds):
            bad = np.isin(draw, forbidden)
            if not bad.any():
                break
            draw[bad] = rng.integers(0, num_items, size=int(bad.sum()))
        else:
            raise RuntimeError(f"example {i}: out-of-sequence sampling did not converge")
        out[i, :, :s] = draw
        sample_mask[i, :, :s] = True
    return out, sample_mask


def _l2_normalize(t):
    """Row-normalize the last axis on the tape.

    Rows with exactly zero norm come out zero (padded rows); callers must
    have already rejected zero-norm rows that actually participate.
    """
    sq = gc.tsum(t * t, axis=-1, keepdims=True)
    guard = (sq.value == 0.0).astype(np.float64)
    norm = gc.sqrt(gc.add(sq, guard))
    return t / norm


def _check_nonzero_norms(values, what, axis=-1, where=None):
    norms = np.linalg.norm(values, axis=axis)
    zero = norms == 0.0
    if where is not None:
        zero = zero & where
    if zero.any():
        idx = tuple(int(v) for v in np.argwhere(zero)[0])
        raise ValueError(f"zero-norm vector before normalization: {what} at index {idx}")


def recontrast_batch(interests, x_emb, pos_mask, neg_mask, sampled_emb, sampled_mask,
                     temperature):
    """Sum over the batch of the InfoNCE loss; empty positive sets contribute 0.

    For each interest k and positive position i, the negatives are the
    interest's in-sequence negatives, the other interests, and its sampled
    out-of-sequence items; every vector is L2-normalized first.
    """
    b, n_z, n_x = pos_mask.shape
    valid = pos_mask | neg_mask
    _check_nonzero_norms(interests.value, "interest (example, interest)")
    _check_nonzero_norms(x_emb.value, "sequence item (example, position)",
                         where=valid.any(axis=1))
    z_bar = _l2_normalize(interests)  # (B, n_z, d)
    x_bar = _l2_normalize(x_emb)  # (B, n_x, d)
    sims = gc.matmul(z_bar, gc.swapaxes(x_bar, 1, 2)) / temperature  # (B, n_z, n_x)
    inter = gc.matmul(z_bar, gc.swapaxes(z_bar, 1, 2)) / temperature  # (B, n_z, n_z)
    off_diag = np.broadcast_to(~np.eye(n_z, dtype=bool), (b, n_z, n_z))
    log_mass = gc.logaddexp(
        gc.masked_logsumexp(sims, neg_mask, axis=-1),
        gc.masked_logsumexp(inter, off_diag, axis=-1),
    )
    if sampled_emb is not None and sampled_emb.value.shape[2] > 0:
        _check_nonzero_norms(sampled_emb.value, "sampled negative (example, interest, slot)",
                             where=sampled_mask)
        n_bar = _l2_normalize(sampled_emb)  # (B, n_z, S, d)
        d = z_bar.value.shape[-1]
        z_col = gc.reshape(z_bar, (b, n_z, d, 1))
        samp_sims = gc.reshape(gc.matmul(n_bar, z_col),
                               sampled_mask.shape) / temperature  # (B, n_z, S)
        log_mass = gc.logaddexp(
            log_mass, gc.masked_logsumexp(samp_sims, sampled_mask, axis=-1)
        )
    per_pos = gc.softplus(gc.reshape(log_mass, (b, n_z, 1)) - sims)
    return gc.tsum(per_pos * pos_mask.astype(np.float64))


def loss_recontrast(interests, x_emb, sets, sampled_emb, temperature):
    """Per-example contrastive loss from explicit index sets."""
    n_z, d = interests.value.shape
    n_x = x_emb.value.shape[0]
    pos_mask = np.zeros((1, n_z, n_x), dtype=bool)
    neg_mask = np.zeros((1, n_z, n_x), dtype=bool)
    for k in range(n_z):
        pos_mask[0, k, np.asarray(sets.positives[k], dtype=np.int64)] = True
        neg_mask[0, k, np.asarray(sets.seq_negatives[k], dtype=np.int64)] = True
    if sampled_emb is None:
        samp, smask = None, None
    else:
        s = sampled_emb.value.shape[1]
        samp = gc.reshape(sampled_emb, (1, n_z, s, d))
        smask = np.ones((1, n_z, s), dtype=bool)
    return recontrast_batch(
        gc.reshape(interests, (1, n_z, d)), gc.reshape(x_emb, (1, n_x, d)),
        pos_mask, neg_mask, samp, smask, temperature,
    )


def reattend_batch(attention, interests, x_emb, mask):
    """Sum over the batch of cross-entropy between the attention map (fixed
    target) and softmaxed dot-product relevance over valid positions."""
    b, n_z, n_x = attention.value.shape
    logits = gc.matmul(interests, gc.swapaxes(x_emb, 1, 2))  # (B, n_z, n_x)
    valid = np.broadcast_to(np.asarray(mask, bool)[:, None, :], (b, n_z, n_x))
    log_probs = logits - gc.masked_logsumexp(logits, valid, axis=-1, keepdims=True)
    target = gc.stop_grad(attention)
    return gc.neg(gc.tsum(target * (log_probs * valid.astype(np.float64))))


def loss_reattend(attention, interests, x_emb, mask):
    """Per-example attention-consistency loss."""
    n_z, n_x = attention.value.shape
    d = x_emb.value.shape[1]
    return reattend_batch(
        gc.reshape(attention, (1, n_z, n_x)), gc.reshape(interests, (1, n_z, d)),
        gc.reshape(x_emb, (1, n_x, d)), np.asarray(mask, bool)[None, :],
    )


def reconstruct_batch(interests, x_emb, pos_mask, params):
    """Sum over the batch of squared reconstruction error on positive items.

    Each interest is expanded into max_seq_len slot codes; a per-position
    query attends over the slots and the attended slot codes are projected
    back to embedding space and compared to the positive items.
    """
    b, n_z, d = interests.value.shape
    n_x = pos_mask.shape[2]
    d_b = params.recon_hidden.value.shape[0]
    flat = gc.matmul(interests, gc.swapaxes(params.recon_expand, 0, 1))  # (B, n_z, n_x*d_b)
    codes = gc.reshape(flat, (b, n_z, n_x, d_b))
    hidden = gc.tanh(gc.matmul(codes, gc.swapaxes(params.recon_hidden, 0, 1)))
    slot_logits = gc.matmul(hidden, gc.swapaxes(params.recon_query, 0, 1))  # (B,n_z,slot,pos)
    beta = gc.softmax(slot_logits, axis=2)  # softmax over slots for each position
    vals = gc.matmul(codes, gc.swapaxes(params.recon_out, 0, 1))  # (B, n_z, slot, d)
    rebuilt = gc.matmul(gc.swapaxes(beta, 2, 3), vals)  # (B, n_z, pos, d)
    diff = rebuilt - gc.reshape(x_emb, (b, 1, n_x, d))
    sq_err = gc.tsum(diff * diff, axis=-1)  # (B, n_z, pos)
    return gc.tsum(sq_err * pos_mask.astype(np.float64))


def loss_reconstruct(interests, x_emb, sets, params):
    """Per-example reconstruction loss on the positive sets."""
    n_z, d = interests.value.shape
    n_x = x_emb.value.shape[0]
    pos_mask = np.zeros((1, n_z, n_x), dtype=bool)
    for k in range(n_z):
        pos_mask[0, k, np.asarray(sets.positives[k], dtype=np.int64)] = True
    return reconstruct_batch(
        gc.reshape(interests, (1, n_z, d)), gc.reshape(x_emb, (1, n_x, d)),
        pos_mask, params,
    )


def select_interest_batch(interest_values, target_values):
    """Index of the interest with max dot product to the target; ties take the
    lowest index. Plain values, no gradient."""
    scores = np.einsum("bkd,bd->bk", interest_values, target_values)
    return np.argmax(scores, axis=1)


def select_interest(interests, target):
    iv = interests.value if isinstance(interests, Tensor) else np.asarray(interests)
    tv = target.value if isinstance(target, Tensor) else np.asarray(target)
    return int(select_interest_batch(iv[None], tv[None])[0])


def rec_batch(interests, target_emb, neg_emb, selected=None, logq_num_items=None):
    """Sum over the batch of sampled-softmax NLL on the selected interest.

    Gradient flows only through the winning interest; pass `selected` to fix
    the winner externally (otherwise it is the current argmax). With
    logq_num_items set, uniform-sampling log-frequency is subtracted from
    negative logits.
    """
    b, n_z, d = interests.value.shape
    if selected is None:
        selected = select_interest_batch(interests.value, target_emb.value)
    z_hat = gc.take_per_row(interests, selected)  # (B, d)
    pos_logit = gc.tsum(z_hat * target_emb, axis=-1)  # (B,)
    s = neg_emb.value.shape[1]
    if s < 1:
        raise ValueError("loss_rec needs at least one sampled negative")
    neg_logits = gc.reshape(gc.matmul(neg_emb, gc.reshape(z_hat, (b, d, 1))), (b, s))
    if logq_num_items is not None:
        neg_logits = neg_logits - np.log(s / float(logq_num_items))
    all_logits = gc.concat([gc.reshape(pos_logit, (b, 1)), neg_logits], axis=1)
    return gc.tsum(gc.logsumexp(all_logits, axis=1) - pos_logit)


def loss_rec(interests, target_emb, neg_emb, selected=None, logq_num_items=None):
    """Per-example sampled-softmax loss."""
    n_z, d = interests.value.shape
    s = neg_emb.value.shape[0]
    sel = None if selected is None else np.array([selected])
    return rec_batch(
        gc.reshape(interests, (1, n_z, d)), gc.reshape(target_emb, (1, d)),
        gc.reshape(neg_emb, (1, s, d)), selected=sel, logq_num_items=logq_num_items,
    )


def combine(rec, contrast, attend, reconstruct, hp):
    """Weight the four losses into the training total; None means inactive (0)."""
    total = rec
    for term, lam in ((contrast, hp.lambda_contrast), (attend, hp.lambda_attend),
                      (reconstruct, hp.lambda_reconstruct)):
        if term is not None and lam != 0.0:
            total = total + term * lam

    def val(t):
        return float(t.value) if t is not None else 0.0

    bundle = LossBundle(rec=val(rec), contrast=val(contrast), attend=val(attend),
                        reconstruct=val(reconstruct), total=float(total.value))
    for name in ("rec", "contrast", "attend", "reconstruct", "total"):
        if not np.isfinite(getattr(bundle, name)):
            raise ValueError(f"non-finite loss component {name}")
    return total, bundle


def compute_batch_losses(item_ids, mask, target_ids, params, hp, rng):
    """Full training objective for one batch; returns (total Tensor, LossBundle).

    All four components are batch means. Losses with a zero coefficient are
    skipped and reported as 0. RNG order is fixed: out-of-sequence negatives
    first, then sampled-softmax negatives.
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    b = item_ids.shape[0]
    num_items = params.num_items
    mask_f = mask.astype(np.float64)

    x_emb = gc.gather_rows(params.item_emb, item_ids) * mask_f[:, :, None]
    interests, attention = interest_forward(x_emb, mask, params)

    need_sets = hp.lambda_contrast != 0.0 or hp.lambda_reconstruct != 0.0
    contrast_sum = attend_sum = reconstruct_sum = None
    if need_sets:
        pos_mask, neg_mask = select_positives_batch(attention.value, mask, hp.pos_threshold)
    if hp.lambda_contrast != 0.0:
        sizes = (np.full(b, hp.num_seq_negatives, dtype=np.int64)
                 if hp.num_seq_negatives is not None else mask.sum(axis=1))
        samp_ids, samp_mask = sample_out_of_seq_batch(
            item_ids, mask, num_items, hp.num_interests, sizes, rng)
        samp_emb = gc.gather_rows(params.item_emb, samp_ids)
        contrast_sum = recontrast_batch(interests, x_emb, pos_mask, neg_mask,
                                        samp_emb, samp_mask, hp.temperature)
    if hp.lambda_attend != 0.0:
        attend_sum = reattend_batch(attention, interests, x_emb, mask)
    if hp.lambda_reconstruct != 0.0:
        reconstruct_sum = reconstruct_batch(interests, x_emb, pos_mask, params)

    neg_ids = rng.integers(0, num_items, size=(b, hp.num_rec_negatives))
    target_emb = gc.gather_rows(params.item_emb, target_ids)
    neg_emb = gc.gather_rows(params.item_emb, neg_ids)
    logq = num_items if hp.logq_correction else None
    rec_sum = rec_batch(interests, target_emb, neg_emb, logq_num_items=logq)

    inv_b = 1.0 / float(b)

    def mean(t):
        return None if t is None else t * inv_b

    return combine(rec_sum * inv_b, mean(contrast_sum), mean(attend_sum),
                   mean(reconstruct_sum), hp)
