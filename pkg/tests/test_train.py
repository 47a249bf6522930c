import numpy as np
import pytest

from conftest import TINY, TINY_GRID, make_bank, make_model, make_plan
from subnetkit import tensor as tn
from subnetkit.shapes import ShapeGrid
from subnetkit.tensor import Rng, Tensor
from subnetkit.train import (
    AdamW,
    NumericsError,
    adamw_update,
    balance_scales,
    balanced_loss,
    train_step,
)

MASKS = {2: (1, 0, 0, 1), 3: (1, 1, 0, 1), 4: (1, 1, 1, 1)}


def grid_shapes():
    return {k: TINY_GRID.shape(k[0], k[1], MASKS[TINY_GRID.depths[k[0]]]) for k in TINY_GRID.keys}


def elastic(noise=True):
    m = make_model()
    m.attach_width_plan(make_plan(m))
    m.attach_bank(make_bank(noise=noise))
    m.freeze_base()
    return m


def batch(seed=0, b=2):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, TINY.vocab_size, (b, TINY.max_seq_len))
    return x, np.roll(x, -1, axis=1)


def test_adamw_first_step_is_minus_lr():
    p = np.array([0.5])
    m, v = np.zeros(1), np.zeros(1)
    adamw_update(p, np.array([1.0]), m, v, 1, lr=0.01, eps=0.0)
    assert p[0] == pytest.approx(0.49, abs=1e-15)


def test_adamw_zero_grad_unchanged():
    p = np.array([0.5, -2.0])
    adamw_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1)
    np.testing.assert_array_equal(p, [0.5, -2.0])


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        adamw_update(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1)


def test_balanced_loss_examples():
    l1 = Tensor(np.array(2.0))
    total = balanced_loss(l1, [Tensor(np.array(8.0)), Tensor(np.array(0.5))], eps=0.0)
    assert total.item() == pytest.approx(6.0, abs=1e-12)
    c = 1.7
    total = balanced_loss(Tensor(np.array(c)), [Tensor(np.array(c))] * 3, eps=0.0)
    assert total.item() == pytest.approx(4 * c, abs=1e-12)


def test_balancing_disabled_is_plain_sum():
    assert balance_scales(2.0, [8.0, 0.5], enabled=False) == [1.0, 1.0]


def test_balance_scale_non_finite():
    with pytest.raises(NumericsError):
        balance_scales(float("inf"), [1.0])
    with pytest.raises(NumericsError):
        balanced_loss(Tensor(np.array(np.nan)), [Tensor(np.array(1.0))])


def test_scales_are_constants_in_gradient():
    x = Tensor(np.array(3.0), requires_grad=True, dtype=np.float64)
    l1 = x * 2.0
    li = x * x
    balanced_loss(l1, [li], eps=0.0).backward()
    # d/dx [2x + (6/9) x^2] at x=3 with the scale frozen
    assert x.grad == pytest.approx(2.0 + (6.0 / 9.0) * 6.0, rel=1e-12)


def test_sandwich_sample():
    g = ShapeGrid(depths=(5, 6, 7, 8), ratios=(1.0, 0.75, 0.5), k_sample=4)
    assert g.sandwich_sample(Rng(0), 2) == [g.largest, g.smallest]
    for seed in range(20):
        s = g.sandwich_sample(Rng(seed))
        assert s[:2] == [g.largest, g.smallest] and len(set(s)) == 4
    with pytest.raises(ValueError):
        g.sandwich_sample(Rng(0), 13)


def test_sandwich_coverage():
    g = ShapeGrid()
    seen = set()
    rng = Rng(1)
    for _ in range(1000):
        seen.update(g.sandwich_sample(rng))
    assert seen == set(g.keys)


def test_train_step_freezes_base_and_updates_bank():
    m = elastic()
    bank_before = {k: v.data.copy() for k, v in m.bank.parameters().items()}
    base_before = {k: v.copy() for k, v in m.state_arrays().items()}
    opt = AdamW(m.bank.parameters(), lr=1e-2)
    sl = train_step(m, TINY_GRID, grid_shapes(), batch(), opt, Rng(0))
    assert all(t.grad is None for t in m.params.values())
    for k, v in m.state_arrays().items():
        np.testing.assert_array_equal(v, base_before[k])
    assert any(not np.array_equal(v.data, bank_before[k]) for k, v in m.bank.parameters().items())
    assert sl.shapes[0] == TINY_GRID.largest and sl.shapes[1] == TINY_GRID.smallest
    assert len(sl.distill) == TINY_GRID.k_sample - 1


def test_teacher_equals_student_distill_is_entropy():
    x, y = batch()
    key = TINY_GRID.largest
    with tn.no_grad():
        q = tn.softmax(elastic(noise=False).forward(x, grid_shapes()[key])).data
    entropy = float(-(q * np.log(q)).sum(-1).mean())
    m = elastic(noise=False)
    sl = train_step(m, TINY_GRID, grid_shapes(), (x, y), AdamW(m.bank.parameters()), Rng(0), keys=[key, key])
    assert sl.distill[0] == pytest.approx(entropy, rel=1e-10)
    assert sl.scales[0] == pytest.approx(sl.l1 / (entropy + 1e-8))


def test_train_step_deterministic():
    def run():
        m = elastic()
        opt = AdamW(m.bank.parameters(), lr=1e-2)
        rng = Rng(7)
        out = [train_step(m, TINY_GRID, grid_shapes(), batch(s), opt, rng).total for s in range(3)]
        return out, {k: v.data.copy() for k, v in m.bank.parameters().items()}

    (a, pa), (b, pb) = run(), run()
    assert a == b
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_train_step_reports_shape_on_nan():
    m = elastic()
    m.bank.B["layers.0.q"].data[:] = np.nan
    opt = AdamW(m.bank.parameters())
    with pytest.raises(NumericsError, match=r"shape d\d-w"):
        train_step(m, TINY_GRID, grid_shapes(), batch(), opt, Rng(0))
