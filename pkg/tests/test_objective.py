import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebaker.alignment import BatchEliminationMask
from ebaker.objective import LossConfig, ObjectiveError, info_nce, info_nce_eliminated, mlm_loss, total_loss
from ebaker.tensorlab import Tensor


def naive_nce(sim, temp, keep=None):
    """Explicit-loop reference: rows and columns of dropped pairs contribute no term."""
    b = len(sim)
    keep = [True] * b if keep is None else list(keep)
    total = 0.0
    for j in range(b):
        if not keep[j]:
            continue
        row = sum(math.exp(sim[j][k] / temp) for k in range(b))
        col = sum(math.exp(sim[k][j] / temp) for k in range(b))
        total += -math.log(math.exp(sim[j][j] / temp) / row) - math.log(math.exp(sim[j][j] / temp) / col)
    return total / b


def naive_ce(logits, targets):
    out = 0.0
    for row, t in zip(logits, targets):
        z = sum(math.exp(v) for v in row)
        out += -math.log(math.exp(row[t]) / z)
    return out / len(targets)


def test_saturated_diagonal_gives_zero():
    sim = np.where(np.eye(4, dtype=bool), 50.0, 0.0)
    assert float(info_nce(sim, 1.0).data) == pytest.approx(0.0, abs=1e-12)


def test_uniform_gives_two_ln_b():
    assert float(info_nce(np.full((4, 4), 0.3), 1.0).data) == pytest.approx(2 * math.log(4), abs=1e-12)


def test_two_by_two_oracle():
    sim = [[1.0, 0.2], [0.2, 1.0]]
    assert float(info_nce(np.array(sim), 1.0).data) == pytest.approx(naive_nce(sim, 1.0), abs=1e-12)


def test_random_oracle_and_temperature_tensor():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b = int(rng.integers(2, 9))
        sim = rng.uniform(-1, 1, size=(b, b))
        temp = float(rng.uniform(0.05, 2.0))
        assert float(info_nce(sim, temp).data) == pytest.approx(naive_nce(sim.tolist(), temp), abs=1e-9)
        t = Tensor(np.array(temp), requires_grad=True)
        assert float(info_nce(sim, t).data) == pytest.approx(naive_nce(sim.tolist(), temp), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_shift_invariance_and_nonnegative(seed, c):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(-1, 1, size=(5, 5))
    a = float(info_nce(sim, 0.5).data)
    assert a >= 0
    assert float(info_nce(sim + c, 0.5).data) == pytest.approx(a, abs=1e-9)


def test_info_nce_errors():
    with pytest.raises(ObjectiveError):
        info_nce(np.ones((1, 1)), 1.0)
    with pytest.raises(ObjectiveError):
        info_nce(np.ones((2, 3)), 1.0)


def test_eliminated_reduced_matrix_oracle():
    sim = np.array([[0.9, 0.1, 0.4], [0.3, 0.8, 0.2], [0.5, 0.6, 0.1]])
    loss, r = info_nce_eliminated(sim, [True, True, False], 1.0)
    assert r == 1
    # rows 0,1 of the 2x3 row-reduced matrix, columns 0,1 of the 3x2 column-reduced matrix
    rows = sim[:2]
    cols = sim[:, :2]
    expect = 0.0
    for j in range(2):
        expect -= rows[j, j] - math.log(np.exp(rows[j]).sum())
        expect -= cols[j, j] - math.log(np.exp(cols[:, j]).sum())
    assert float(loss.data) == pytest.approx(expect / 3, abs=1e-12)


def test_eliminated_random_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        b = int(rng.integers(2, 9))
        sim = rng.uniform(-1, 1, size=(b, b))
        keep = rng.random(b) < 0.6
        keep[rng.integers(b)] = True
        loss, r = info_nce_eliminated(sim, keep, 0.3)
        assert r == int((~keep).sum())
        assert float(loss.data) == pytest.approx(naive_nce(sim.tolist(), 0.3, keep), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_keep_all_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(-1, 1, size=(6, 6))
    loss, r = info_nce_eliminated(sim, np.ones(6, dtype=bool), 0.07)
    assert r == 0
    assert float(loss.data) == float(info_nce(sim, 0.07).data)


def test_single_kept_row_is_finite_and_all_dropped_raises():
    sim = np.random.default_rng(2).normal(size=(4, 4))
    loss, r = info_nce_eliminated(sim, [False, False, True, False], 1.0)
    assert r == 3 and math.isfinite(float(loss.data))
    with pytest.raises(ObjectiveError):
        info_nce_eliminated(sim, [False] * 4, 1.0)


def test_mlm_examples():
    assert float(mlm_loss(np.zeros((3, 5)), [0, 1, 4]).data) == pytest.approx(math.log(5))
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    assert float(mlm_loss(logits, [2]).data) == pytest.approx(0.0, abs=1e-12)
    hand = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]
    assert float(mlm_loss(np.array(hand), [1, 0]).data) == pytest.approx(naive_ce(hand, [1, 0]), abs=1e-12)
    assert float(mlm_loss(np.zeros((0, 5)), []).data) == 0.0


def test_mlm_monotone_in_target_logit():
    base = np.random.default_rng(3).normal(size=(1, 6))
    vals = []
    for bump in np.linspace(-3, 3, 13):
        x = base.copy()
        x[0, 2] += bump
        vals.append(float(mlm_loss(x, [2]).data))
    assert all(a > b for a, b in zip(vals, vals[1:]))


# scheduled total ------------------------------------------------------------------

def _sims(seed=4, b=4):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(b, b)), rng.uniform(0, 3, size=(b, b))


def test_total_before_drop_epoch_ignores_mask(caplog):
    sg, sl = _sims()
    mask = BatchEliminationMask(np.array([True, False, True, True]), np.ones(4, dtype=bool))
    with caplog.at_level(logging.WARNING):
        _, parts = total_loss(sg, sl, 0.1, 0, LossConfig(drop_epoch=4), mask=mask)
    assert (parts.r_global, parts.r_local) == (0, 0)
    assert "ignored" in caplog.text
    assert parts.info_global == pytest.approx(float(info_nce(sg, 0.1).data))


def test_total_after_drop_epoch_applies_mask():
    sg, sl = _sims()
    mask = BatchEliminationMask(np.array([True, False, True, True]), np.array([False, True, True, True]))
    _, parts = total_loss(sg, sl, 0.1, 4, LossConfig(drop_epoch=4), mask=mask)
    assert (parts.r_global, parts.r_local) == (1, 1)
    assert parts.info_global == pytest.approx(naive_nce(sg.tolist(), 0.1, mask.keep_global), abs=1e-9)


def test_total_combines_terms_with_mlm_weight():
    sg, sl = _sims()
    logits = np.random.default_rng(5).normal(size=(3, 7))
    total, parts = total_loss(sg, sl, 0.2, 1, LossConfig(mlm_weight=0.5), logits, [1, 2, 3])
    assert parts.total == pytest.approx(parts.info_global + parts.info_local + 0.5 * parts.mlm)
    assert float(total.data) == parts.total
    assert set(parts.as_log()) == {"info_g", "info_l", "mlm", "total", "R_g", "R_l"}


def test_zero_mlm_weight_blocks_gradient_to_logits():
    sg, sl = _sims()
    logits = Tensor(np.random.default_rng(6).normal(size=(3, 7)), requires_grad=True)
    total, _ = total_loss(sg, sl, 0.2, 1, LossConfig(mlm_weight=0.0), logits, [1, 2, 3])
    total.backward()
    np.testing.assert_array_equal(logits.grad, 0.0)


def test_negative_epoch_rejected():
    sg, sl = _sims()
    with pytest.raises(ObjectiveError):
        total_loss(sg, sl, 0.2, -1, LossConfig())
