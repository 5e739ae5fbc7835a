import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebaker.alignment import (AlignmentError, BankKind, EliminationSchedule, Scheme, SimilarityBank,
                              SimilarityPair, Thresholds, combine, derive_threshold, eliminate,
                              global_similarity, local_similarity, local_similarity_matrix)
from ebaker.tensorlab import Tensor


def test_global_similarity_hand_case():
    fv = np.array([[1.0, 0.0], [0.0, 1.0]])
    ft = np.array([[1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(global_similarity(fv, ft).data, [[1, 1 / math.sqrt(2)], [0, 1 / math.sqrt(2)]],
                               atol=1e-12)


def test_global_similarity_identical_unit_rows():
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(np.diag(global_similarity(x, x).data), 1.0)


def test_local_similarity_frobenius_example():
    # one visual local against two text locals: cosine block [[0.6, 1.0]]
    fv = np.array([[1.0, 0.0]])
    ft = np.array([[3.0, 4.0], [1.0, 0.0]])
    assert local_similarity(fv, ft) == pytest.approx(math.sqrt(0.6 ** 2 + 1.0))


def test_local_similarity_all_orthogonal():
    assert local_similarity(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])) == 0.0


def _naive_local(fv, ft):
    total = 0.0
    for a in fv:
        for b in ft:
            c = float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))
            total += c * c
    return math.sqrt(total)


def test_local_similarity_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, w, d = rng.integers(1, 7, size=3)
        fv, ft = rng.normal(size=(n, d)), rng.normal(size=(w, d))
        assert local_similarity(fv, ft) == pytest.approx(_naive_local(fv, ft), abs=1e-12)


def test_local_similarity_matrix_matches_pairwise():
    rng = np.random.default_rng(2)
    fv, ft = rng.normal(size=(3, 5, 4)), rng.normal(size=(4, 6, 4))
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    got = local_similarity_matrix(Tensor(fv), Tensor(ft), mask).data
    for i in range(3):
        for j in range(4):
            assert got[i, j] == pytest.approx(_naive_local(fv[i], ft[j][mask[j]]), abs=1e-12)


def test_combine():
    assert combine(SimilarityPair(0.8, 0.5), 0.6, 0.4) == pytest.approx(0.68)
    g = np.array([[0.3, 0.9, 0.1]])
    l = np.array([[5.0, 0.0, 2.0]])
    assert np.argmax(combine((g, l), 1.0, 0.0)) == np.argmax(g)
    assert np.argmax(combine((g, l), 0.0, 1.0)) == np.argmax(l)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_beta_zero_preserves_global_argmax(seed, alpha):
    rng = np.random.default_rng(seed)
    g, l = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    np.testing.assert_array_equal(np.argmax(combine((g, l), alpha, 0.0), axis=1), np.argmax(g, axis=1))


# banks ---------------------------------------------------------------------------

def test_bank_write_once_and_completion():
    bank = SimilarityBank(3)
    bank.record(0, 0.5)
    bank.record_batch([2, 1], [0.1, 0.2])
    assert bank.complete
    with pytest.raises(AlignmentError):
        bank.record(1, 0.3)
    with pytest.raises(AlignmentError):
        SimilarityBank(3).record_batch([0, 0], [1.0, 2.0])


def test_bank_order_independent():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=20)
    a, b = SimilarityBank(20), SimilarityBank(20)
    a.record_batch(np.arange(20), scores)
    perm = rng.permutation(20)
    for chunk in np.array_split(perm, 4):
        b.record_batch(chunk, scores[chunk])
    np.testing.assert_array_equal(a.scores, b.scores)


def test_bank_file_roundtrip(tmp_path):
    bank = SimilarityBank(5, BankKind.LOCAL, epoch=7)
    bank.record_batch(range(5), [0.5, 0.1, 0.9, 0.3, 0.7])
    bank.save(tmp_path / "b.ebkb")
    back = SimilarityBank.load(tmp_path / "b.ebkb")
    assert (back.epoch, back.kind) == (7, BankKind.LOCAL)
    np.testing.assert_array_equal(back.scores, bank.scores)
    with pytest.raises(AlignmentError):
        SimilarityBank(5).dumps()


def test_threshold_examples():
    bank = SimilarityBank(10)
    bank.record_batch(range(10), np.arange(1, 11) / 10)
    th = derive_threshold(bank, 0.1)
    assert th == pytest.approx(0.1)
    assert int((bank.scores <= th).sum()) == 1
    assert derive_threshold(bank, 0.0) == -math.inf
    with pytest.raises(AlignmentError):
        derive_threshold(SimilarityBank(3), 0.1)


def test_threshold_small_ratio_still_drops_one():
    bank = SimilarityBank(10)
    bank.record_batch(range(10), np.arange(10.0))
    assert derive_threshold(bank, 0.01) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 200), st.floats(0.001, 0.5))
def test_threshold_permutation_invariant(seed, n, ratio):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=n)
    a, b = SimilarityBank(n), SimilarityBank(n)
    a.record_batch(range(n), scores)
    b.record_batch(range(n), rng.permutation(scores))
    assert derive_threshold(a, ratio) == derive_threshold(b, ratio)
    k = max(1, math.floor(ratio * n))
    assert int((scores <= derive_threshold(a, ratio)).sum()) >= k


# elimination ---------------------------------------------------------------------

def test_split_and_joint_example():
    g, l = [0.6, 0.4], [0.2, 0.9]
    split = eliminate(g, l, Thresholds(Scheme.SPLIT, th_global=0.5, th_local=0.3), Scheme.SPLIT)
    assert split.keep_global.tolist() == [True, False]
    assert split.keep_local.tolist() == [False, True]
    joint = eliminate(g, l, Thresholds(Scheme.JOINT, th_joint=0.45), Scheme.JOINT, alpha=0.5, beta=0.5)
    assert joint.keep_global.tolist() == [False, True] == joint.keep_local.tolist()
    assert (joint.r_global, joint.r_local) == (1, 1)


def test_eliminate_nothing_when_above_or_unset():
    m = eliminate([0.1, 0.2], [1.0, 2.0], Thresholds(Scheme.SPLIT), Scheme.SPLIT)
    assert m.keep_global.all() and m.keep_local.all() and m.r_global == 0


def test_eliminate_scheme_mismatch():
    with pytest.raises(AlignmentError):
        eliminate([0.1], [0.2], Thresholds(Scheme.SPLIT), Scheme.JOINT)


def test_threshold_value_itself_is_eliminated():
    m = eliminate([0.5], [0.5], Thresholds(Scheme.SPLIT, th_global=0.5, th_local=0.4), Scheme.SPLIT)
    assert m.keep_global.tolist() == [False] and m.keep_local.tolist() == [True]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_joint_flags_always_equal(seed):
    rng = np.random.default_rng(seed)
    g, l = rng.normal(size=16), rng.normal(size=16)
    m = eliminate(g, l, Thresholds(Scheme.JOINT, th_joint=float(rng.normal())), Scheme.JOINT)
    np.testing.assert_array_equal(m.keep_global, m.keep_local)


def _run_epoch(sched, scores_g, scores_l, batch=50, rng=None):
    n = scores_g.size
    order = rng.permutation(n) if rng is not None else np.arange(n)
    dropped = 0
    sched.begin_epoch(sched.epoch + 1)
    for idx in np.array_split(order, n // batch):
        sched.record(idx, scores_g[idx], scores_l[idx])
        dropped += sched.mask(scores_g[idx], scores_l[idx]).r_global
    sched.end_epoch()
    return dropped


def test_schedule_lags_one_epoch_and_waits_for_drop_epoch():
    n = 1000
    rng = np.random.default_rng(4)
    sched = EliminationSchedule(n, Scheme.SPLIT, drop_ratio=0.01, drop_epoch=2)
    base = rng.normal(size=n)
    drops = [_run_epoch(sched, base + 0.01 * rng.normal(size=n), base, rng=rng) for _ in range(4)]
    assert drops[:2] == [0, 0]
    lo, hi = 0.01 - 2 / math.sqrt(n), 0.01 + 2 / math.sqrt(n)
    for d in drops[2:]:
        assert lo <= d / n <= hi
    assert sched.history[-1].source_epoch == 3


def test_schedule_none_never_drops():
    sched = EliminationSchedule(100, Scheme.NONE, drop_ratio=0.5, drop_epoch=0)
    rng = np.random.default_rng(5)
    s = rng.normal(size=100)
    assert [_run_epoch(sched, s, s) for _ in range(3)] == [0, 0, 0]
