import numpy as np
import pytest

from mirec import gradcore as gc
from mirec import losses as ls
from mirec import model as m
from mirec.gradcore import Tensor


def tiny_hp(**kw):
    base = dict(embed_dim=4, att_hidden_dim=5, recon_hidden_dim=3,
                num_interests=2, max_seq_len=4, temperature=0.5)
    base.update(kw)
    return m.HyperParams(**base)


def make_instance(seed, num_items=20, hp=None, min_len=2):
    hp = hp or tiny_hp()
    rng = np.random.default_rng(seed)
    params = m.ModelParams.init(num_items, hp, rng)
    length = int(rng.integers(min_len, hp.max_seq_len + 1))
    items = rng.choice(num_items, size=length, replace=False)
    seq = m.BehaviorSequence.from_items(0, items, hp.max_seq_len)
    return rng, hp, params, seq


def forward(seq, params):
    x = m.embed(seq, params)
    iset = m.extract_interests(x, seq.mask, params)
    return x, iset


# ---------------------------------------------------------------- positives


def test_uniform_attention_with_adaptive_threshold_gives_empty_positives():
    a = np.full((2, 3), 1.0 / 3.0)
    sets = ls.select_positives(a, np.ones(3, bool), "adaptive")
    for k in range(2):
        assert sets.positives[k].size == 0
        np.testing.assert_array_equal(sets.seq_negatives[k], [0, 1, 2])


def test_select_positives_direct_comparison():
    a = np.array([[0.7, 0.2, 0.1]])
    sets = ls.select_positives(a, np.ones(3, bool), 1.0 / 3.0)
    np.testing.assert_array_equal(sets.positives[0], [0])
    np.testing.assert_array_equal(sets.seq_negatives[0], [1, 2])


def test_low_threshold_makes_every_position_positive():
    a = np.full((1, 4), 0.25)
    sets = ls.select_positives(a, np.ones(4, bool), 1.0 / 32.0)
    np.testing.assert_array_equal(sets.positives[0], [0, 1, 2, 3])
    assert sets.seq_negatives[0].size == 0


def test_adaptive_threshold_uses_valid_length_not_padded_length():
    a = np.array([[0.6, 0.4, 0.0, 0.0]])
    mask = np.array([True, True, False, False])
    sets = ls.select_positives(a, mask, "adaptive")  # threshold 1/2
    np.testing.assert_array_equal(sets.positives[0], [0])
    np.testing.assert_array_equal(sets.seq_negatives[0], [1])


def test_positives_and_negatives_partition_valid_positions():
    for seed in range(20):
        rng, hp, params, seq = make_instance(seed)
        _, iset = forward(seq, params)
        sets = ls.select_positives(iset.attention, seq.mask, "adaptive")
        valid = set(np.flatnonzero(seq.mask))
        for k in range(hp.num_interests):
            p, n = set(sets.positives[k]), set(sets.seq_negatives[k])
            assert p | n == valid
            assert not (p & n)


# ----------------------------------------------------------------- sampler


def test_out_of_seq_samples_avoid_the_sequence():
    rng = np.random.default_rng(0)
    for seed in range(20):
        r = np.random.default_rng(seed)
        ids = r.integers(0, 15, size=(3, 4))
        mask = r.random((3, 4)) < 0.8
        mask[:, 0] = True
        sizes = mask.sum(axis=1)
        out, smask = ls.sample_out_of_seq_batch(ids, mask, 15, 2, sizes, rng)
        for b in range(3):
            seq_items = set(ids[b, mask[b]])
            assert not (set(out[b][smask[b]].ravel()) & seq_items)
            assert smask[b].sum() == 2 * sizes[b]


def test_out_of_seq_sampling_errors_when_no_complement_exists():
    ids = np.arange(5)[None, :]
    mask = np.ones((1, 5), bool)
    with pytest.raises(ValueError, match="no out-of-sequence"):
        ls.sample_out_of_seq_batch(ids, mask, 5, 2, np.array([3]), np.random.default_rng(0))


def test_out_of_seq_sampling_is_deterministic():
    ids = np.array([[1, 2, 3]])
    mask = np.ones((1, 3), bool)
    draws = [
        ls.sample_out_of_seq_batch(ids, mask, 50, 2, np.array([5]),
                                   np.random.default_rng(7))[0]
        for _ in range(2)
    ]
    np.testing.assert_array_equal(draws[0], draws[1])


# -------------------------------------------------------------- recontrast


def test_recontrast_closed_form_one_positive_one_negative():
    z = Tensor([[1.0, 0.0]])
    x = Tensor([[2.0, 0.0]])  # cosine 1 to z
    sampled = Tensor([[[0.0, 3.0]]])  # cosine 0 to z
    sets = ls.ContrastSets(positives=[np.array([0])], seq_negatives=[np.array([], int)])
    loss = ls.loss_recontrast(z, x, sets, sampled, temperature=1.0)
    np.testing.assert_allclose(loss.value, -np.log(np.e / (np.e + 1.0)), atol=1e-12)


def test_recontrast_matches_enumeration_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_z, n_x, s, d, tau = 3, 5, 4, 6, 0.7
        z = rng.normal(size=(n_z, d))
        x = rng.normal(size=(n_x, d))
        samp = rng.normal(size=(n_z, s, d))
        split = rng.random((n_z, n_x)) < 0.5
        sets = ls.ContrastSets(
            positives=[np.flatnonzero(split[k]) for k in range(n_z)],
            seq_negatives=[np.flatnonzero(~split[k]) for k in range(n_z)],
        )
        loss = ls.loss_recontrast(Tensor(z), Tensor(x), sets, Tensor(samp), tau)

        def unit(v):
            return v / np.linalg.norm(v)

        expected = 0.0
        for k in range(n_z):
            negs = [unit(x[j]) for j in sets.seq_negatives[k]]
            negs += [unit(z[kk]) for kk in range(n_z) if kk != k]
            negs += [unit(samp[k, t]) for t in range(s)]
            neg_exp = sum(np.exp(unit(z[k]) @ n / tau) for n in negs)
            for i in sets.positives[k]:
                pos_exp = np.exp(unit(z[k]) @ unit(x[i]) / tau)
                expected += -np.log(pos_exp / (pos_exp + neg_exp))
        np.testing.assert_allclose(loss.value, expected, rtol=0, atol=1e-10)


def test_recontrast_duplicated_negative_increases_loss():
    z = Tensor([[1.0, 0.0]])
    x = Tensor([[1.0, 0.2]])
    sets = ls.ContrastSets(positives=[np.array([0])], seq_negatives=[np.array([], int)])
    one = ls.loss_recontrast(z, x, sets, Tensor([[[0.3, 1.0]]]), 1.0)
    two = ls.loss_recontrast(z, x, sets, Tensor([[[0.3, 1.0], [0.3, 1.0]]]), 1.0)
    assert two.value > one.value


def test_recontrast_decreases_as_positive_aligns_with_interest():
    sets = ls.ContrastSets(positives=[np.array([0])], seq_negatives=[np.array([1])])
    z = Tensor([[1.0, 0.0]])
    prev = np.inf
    for angle in (1.2, 0.8, 0.4, 0.1):
        x = Tensor([[np.cos(angle), np.sin(angle)], [-0.5, 0.8]])
        val = float(ls.loss_recontrast(z, x, sets, None, 0.5).value)
        assert val < prev
        prev = val


def test_recontrast_zero_norm_vector_is_error():
    z = Tensor([[0.0, 0.0]])
    x = Tensor([[1.0, 0.0]])
    sets = ls.ContrastSets(positives=[np.array([0])], seq_negatives=[np.array([], int)])
    with pytest.raises(ValueError, match="zero-norm.*interest"):
        ls.loss_recontrast(z, x, sets, None, 1.0)


def test_recontrast_empty_positives_give_exactly_zero():
    rng, hp, params, seq = make_instance(1)
    x, iset = forward(seq, params)
    empty = [np.array([], int)] * hp.num_interests
    all_neg = [np.flatnonzero(seq.mask)] * hp.num_interests
    sets = ls.ContrastSets(positives=empty, seq_negatives=all_neg)
    loss = ls.loss_recontrast(iset.interests, x, sets, None, hp.temperature)
    assert loss.value == 0.0


# ---------------------------------------------------------------- reattend


def test_reattend_closed_form_ln2():
    attention = Tensor([[1.0, 0.0]])
    interests = Tensor([[0.7, 0.1]])
    x = Tensor([[1.0, 1.0], [1.0, 1.0]])  # equal dots -> uniform relevance
    loss = ls.loss_reattend(attention, interests, x, np.ones(2, bool))
    np.testing.assert_allclose(loss.value, np.log(2.0), atol=1e-12)


def test_reattend_equality_case_equals_entropy():
    a_row = np.array([0.7, 0.2, 0.1])
    x = Tensor(np.eye(3))
    interests = Tensor(np.log(a_row)[None, :])
    loss = ls.loss_reattend(Tensor(a_row[None, :]), interests, x, np.ones(3, bool))
    entropy = -np.sum(a_row * np.log(a_row))
    np.testing.assert_allclose(loss.value, entropy, atol=1e-10)


def test_reattend_uniform_target_constant_relevance():
    n_z, length = 3, 4
    attention = Tensor(np.full((n_z, length), 1.0 / length))
    interests = Tensor(np.zeros((n_z, 2)))
    x = Tensor(np.random.default_rng(0).normal(size=(length, 2)))
    loss = ls.loss_reattend(attention, interests, x, np.ones(length, bool))
    np.testing.assert_allclose(loss.value, n_z * np.log(length), atol=1e-12)


def test_reattend_gibbs_lower_bound():
    for seed in range(20):
        rng, hp, params, seq = make_instance(seed)
        x, iset = forward(seq, params)
        loss = ls.loss_reattend(iset.attention, iset.interests, x, seq.mask)
        a = iset.attention.value
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(a > 0, a * np.log(a), 0.0))
        assert loss.value >= ent - 1e-10


def test_reattend_ignores_padded_positions():
    attention = Tensor([[0.9, 0.1, 0.0]])
    interests = Tensor([[1.0, 0.0]])
    x = Tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    mask = np.array([True, True, False])
    loss = ls.loss_reattend(attention, interests, x, mask)
    logits = np.array([1.0, 0.0])
    logp = logits - np.log(np.exp(logits).sum())
    expected = -(0.9 * logp[0] + 0.1 * logp[1])
    np.testing.assert_allclose(loss.value, expected, atol=1e-12)


# ------------------------------------------------------------- reconstruct


def test_reconstruct_empty_positives_is_exactly_zero():
    rng, hp, params, seq = make_instance(2)
    x, iset = forward(seq, params)
    sets = ls.ContrastSets(positives=[np.array([], int)] * hp.num_interests,
                           seq_negatives=[np.flatnonzero(seq.mask)] * hp.num_interests)
    loss = ls.loss_reconstruct(iset.interests, x, sets, params)
    assert loss.value == 0.0


def test_reconstruct_scalar_chain_hand_computation():
    hp = tiny_hp(embed_dim=3, recon_hidden_dim=1, max_seq_len=1, num_interests=1)
    rng = np.random.default_rng(5)
    params = m.ModelParams.init(7, hp, rng)
    z = rng.normal(size=(1, 3))
    x0 = rng.normal(size=(1, 3))
    sets = ls.ContrastSets(positives=[np.array([0])], seq_negatives=[np.array([], int)])
    loss = ls.loss_reconstruct(Tensor(z), Tensor(x0), sets, params)
    code = params.recon_expand.value @ z[0]  # single slot code, d_b=1
    rebuilt = params.recon_out.value @ code
    expected = np.sum((rebuilt - x0[0]) ** 2)
    np.testing.assert_allclose(loss.value, expected, atol=1e-12)


def test_reconstruct_matches_naive_loop_oracle():
    for seed in range(10):
        rng, hp, params, seq = make_instance(seed)
        x, iset = forward(seq, params)
        sets = ls.select_positives(iset.attention, seq.mask, 1.0 / 32.0)
        loss = ls.loss_reconstruct(iset.interests, x, sets, params)
        n_x, d_b = hp.max_seq_len, hp.recon_hidden_dim
        expected = 0.0
        for k in range(hp.num_interests):
            code = (params.recon_expand.value @ iset.interests.value[k]).reshape(n_x, d_b)
            logits = np.zeros((n_x, n_x))
            for i in range(n_x):
                for j in range(n_x):
                    logits[i, j] = params.recon_query.value[j] @ np.tanh(
                        params.recon_hidden.value @ code[i])
            beta = np.exp(logits - logits.max(axis=0, keepdims=True))
            beta /= beta.sum(axis=0, keepdims=True)
            for j in sets.positives[k]:
                xhat = np.zeros(hp.embed_dim)
                for i in range(n_x):
                    xhat += beta[i, j] * (params.recon_out.value @ code[i])
                expected += np.sum((xhat - x.value[j]) ** 2)
        np.testing.assert_allclose(loss.value, expected, rtol=0, atol=1e-10)


# ------------------------------------------------------------------- rec


def test_rec_symmetric_pair_is_ln2():
    interests = Tensor([[1.0, 0.0]])
    target = Tensor([0.5, 0.5])
    neg = Tensor([[0.5, -0.5]])  # same dot with the interest as the target
    loss = ls.loss_rec(interests, target, neg)
    np.testing.assert_allclose(loss.value, np.log(2.0), atol=1e-12)


def test_rec_loss_vanishes_when_target_dominates():
    interests = Tensor([[10.0, 0.0]])
    target = Tensor([10.0, 0.0])
    neg = Tensor([[-10.0, 0.0]])
    loss = ls.loss_rec(interests, target, neg)
    assert 0.0 <= loss.value <= 1e-10


def test_interest_selection_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = rng.normal(size=(4, 6))
        y = rng.normal(size=6)
        assert ls.select_interest(z, y) == int(np.argmax(z @ y))


def test_interest_selection_prefers_closer_interest():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0.1, 0.9])
    assert ls.select_interest(z, y) == 1


def test_interest_selection_is_scale_invariant():
    rng = np.random.default_rng(4)
    for _ in range(20):
        z = rng.normal(size=(3, 5))
        y = rng.normal(size=5)
        base = ls.select_interest(z, y)
        for c in (0.01, 0.5, 3.0, 100.0):
            assert ls.select_interest(z, c * y) == base


def test_interest_selection_tie_takes_lowest_index():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    y = np.array([1.0, 0.0])
    assert ls.select_interest(z, y) == 0


def test_rec_gradient_only_reaches_selected_interest():
    rng = np.random.default_rng(6)
    interests = Tensor(rng.normal(size=(1, 3, 4)))
    target = Tensor(rng.normal(size=(1, 4)))
    neg = Tensor(rng.normal(size=(1, 5, 4)))
    with gc.Tape() as tape:
        loss = ls.rec_batch(interests, target, neg)
    tape.backward(loss)
    sel = ls.select_interest_batch(interests.value, target.value)[0]
    for k in range(3):
        if k == sel:
            assert np.any(interests.grad[0, k] != 0.0)
        else:
            np.testing.assert_array_equal(interests.grad[0, k], 0.0)


# ----------------------------------------------------------------- combine


def test_combine_with_zero_lambdas_is_pure_rec():
    hp = tiny_hp()
    rec = Tensor(np.array(1.25))
    total, bundle = ls.combine(rec, None, None, None, hp)
    assert total is rec
    assert bundle.total == 1.25
    assert bundle.contrast == 0.0


def test_combine_adds_weighted_terms():
    hp = tiny_hp(lambda_contrast=1.0)
    total, bundle = ls.combine(Tensor(np.array(1.0)), Tensor(np.array(0.5)),
                               None, None, hp)
    np.testing.assert_allclose(total.value, 1.5)
    hp = tiny_hp(lambda_contrast=0.1, lambda_attend=10.0, lambda_reconstruct=0.01)
    total, _ = ls.combine(Tensor(np.array(1.0)), Tensor(np.array(2.0)),
                          Tensor(np.array(3.0)), Tensor(np.array(4.0)), hp)
    np.testing.assert_allclose(total.value, 1.0 + 0.2 + 30.0 + 0.04)


def test_combine_rejects_non_finite_losses():
    hp = tiny_hp(lambda_contrast=1.0)
    with pytest.raises(ValueError, match="non-finite"):
        ls.combine(Tensor(np.array(np.nan)), Tensor(np.array(0.5)), None, None, hp)


# ------------------------------------------------------- gradient contract


def _frozen_pieces(rng, hp, params, seq):
    """Selector state fixed at the base parameters, as the gradient treats it."""
    x, iset = forward(seq, params)
    sets = ls.select_positives(iset.attention, seq.mask, "adaptive")
    attention_target = Tensor(iset.attention.value.copy())
    complement = np.setdiff1d(np.arange(params.num_items), seq.item_ids[seq.mask])
    samp_ids = rng.choice(complement, size=(hp.num_interests, 3), replace=True)
    target_id = int(rng.integers(0, params.num_items))
    neg_ids = rng.integers(0, params.num_items, size=4)
    selected = np.array([
        ls.select_interest(iset.interests, Tensor(params.item_emb.value[target_id]))
    ])
    return sets, attention_target, samp_ids, target_id, neg_ids, selected


def _fd_case(name, seed):
    rng, hp, params, seq = make_instance(seed)
    sets, att_target, samp_ids, target_id, neg_ids, selected = _frozen_pieces(
        rng, hp, params, seq)

    def f(_):
        x = m.embed(seq, params)
        iset = m.extract_interests(x, seq.mask, params)
        if name == "contrast":
            samp = gc.gather_rows(params.item_emb, samp_ids)
            return ls.loss_recontrast(iset.interests, x, sets, samp, hp.temperature)
        if name == "attend":
            return ls.loss_reattend(att_target, iset.interests, x, seq.mask)
        if name == "reconstruct":
            return ls.loss_reconstruct(iset.interests, x, sets, params)
        target_emb = gc.reshape(gc.gather_rows(params.item_emb, np.array([target_id])),
                                (hp.embed_dim,))
        neg_emb = gc.gather_rows(params.item_emb, neg_ids)
        rec = ls.loss_rec(iset.interests, target_emb, neg_emb, selected=selected[0])
        if name == "rec":
            return rec
        samp = gc.gather_rows(params.item_emb, samp_ids)
        cl = ls.loss_recontrast(iset.interests, x, sets, samp, hp.temperature)
        att = ls.loss_reattend(att_target, iset.interests, x, seq.mask)
        ct = ls.loss_reconstruct(iset.interests, x, sets, params)
        total, _ = ls.combine(rec, cl, att, ct, combined_hp(hp))
        return total

    return f, params


def combined_hp(hp):
    return m.HyperParams(
        embed_dim=hp.embed_dim, att_hidden_dim=hp.att_hidden_dim,
        recon_hidden_dim=hp.recon_hidden_dim, num_interests=hp.num_interests,
        max_seq_len=hp.max_seq_len, temperature=hp.temperature,
        lambda_contrast=0.1, lambda_attend=1.0, lambda_reconstruct=0.1,
    )


@pytest.mark.parametrize("name", ["rec", "contrast", "attend", "reconstruct", "combined"])
def test_loss_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(20):
        f, params = _fd_case(name, seed)
        worst = max(worst, gc.check_gradient(f, params.tensors(), h=1e-4))
    assert worst <= 1e-4, f"{name}: max rel err {worst:.3e}"


# ------------------------------------------------------------- batch glue


def test_compute_batch_losses_runs_and_reports_means():
    hp = tiny_hp(lambda_contrast=0.1, lambda_attend=1.0, lambda_reconstruct=0.1,
                 num_rec_negatives=6)
    rng = np.random.default_rng(0)
    params = m.ModelParams.init(30, hp, rng)
    ids = rng.integers(0, 30, size=(5, hp.max_seq_len))
    mask = np.ones((5, hp.max_seq_len), bool)
    mask[0, 2:] = False
    targets = rng.integers(0, 30, size=5)
    total, bundle = ls.compute_batch_losses(ids, mask, targets, params, hp, rng)
    assert np.isfinite(total.value)
    for name in ("rec", "contrast", "attend", "reconstruct"):
        assert getattr(bundle, name) >= 0.0
    np.testing.assert_allclose(
        bundle.total,
        bundle.rec + 0.1 * bundle.contrast + 1.0 * bundle.attend + 0.1 * bundle.reconstruct,
        atol=1e-12,
    )


def test_compute_batch_losses_skips_inactive_components():
    hp = tiny_hp(num_rec_negatives=6)
    rng = np.random.default_rng(1)
    params = m.ModelParams.init(30, hp, rng)
    ids = rng.integers(0, 30, size=(4, hp.max_seq_len))
    mask = np.ones((4, hp.max_seq_len), bool)
    targets = rng.integers(0, 30, size=4)
    total, bundle = ls.compute_batch_losses(ids, mask, targets, params, hp, rng)
    assert bundle.contrast == bundle.attend == bundle.reconstruct == 0.0
    np.testing.assert_allclose(bundle.total, bundle.rec)
