import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetkit import tensor as tn
from subnetkit.smol import SMoLBank, composite, gate, merge
from subnetkit.tensor import Rng, Tensor

SHAPES = {"m": (5, 4), "n": (3, 5)}


def bank(T=3, k=2, noise=False, seed=0, mask_dim=3):
    b = SMoLBank(SHAPES, mask_dim, n_loras=T, rank=2, top_k=k, noise=noise, rng=Rng(seed), dtype=np.float64)
    return b


def test_hand_case_top2():
    b = bank()
    b.w_gate.data = np.array([[1.0, 2.0, 0.0], [0, 0, 0], [0, 0, 0]])
    g = gate(b, (1, 0, 0))
    np.testing.assert_allclose(g.values(), [0.2689, 0.7311, 0.0], atol=1e-4)
    np.testing.assert_array_equal(g.active, [0, 1])


def test_k_equals_t_is_softmax():
    b = bank(k=3)
    h = np.array([0.3, -1.0, 2.0])
    b.w_gate.data = np.array([h, np.zeros(3), np.zeros(3)])
    e = np.exp(h - h.max())
    np.testing.assert_allclose(gate(b, (1, 0, 0)).values(), e / e.sum(), rtol=1e-12)


def test_k_one_is_onehot():
    b = bank(k=1)
    b.w_gate.data = np.array([[0.3, -1.0, 2.0], [0, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(gate(b, (1, 0, 0)).values(), [0.0, 0.0, 1.0])


def test_ties_prefer_lower_index():
    b = bank(k=1)
    b.w_gate.data[:] = 0.0
    np.testing.assert_array_equal(gate(b, (1, 0, 0)).active, [0])


def test_mask_dimension_checked():
    with pytest.raises(ValueError, match="dimension"):
        gate(bank(), (1, 0))


def test_noise_needs_rng_and_is_seeded():
    b = bank(noise=True)
    b.w_noise.data[:] = 1.0
    with pytest.raises(ValueError, match="rng"):
        gate(b, (1, 0, 1), training=True)
    a = gate(b, (1, 0, 1), Rng(5), training=True).values()
    c = gate(b, (1, 0, 1), Rng(5), training=True).values()
    np.testing.assert_array_equal(a, c)
    # eval mode ignores noise
    np.testing.assert_array_equal(gate(b, (1, 0, 1)).values(), gate(b, (1, 0, 1), Rng(9)).values())


@settings(max_examples=1000, deadline=None)
@given(
    st.integers(0, 2**31),
    st.integers(2, 8),
    st.data(),
)
def test_gate_contract_property(seed, T, data):
    k = data.draw(st.integers(1, T))
    dim = data.draw(st.integers(2, 9))
    rng = np.random.default_rng(seed)
    b = SMoLBank({"m": (2, 2)}, dim, n_loras=T, rank=1, top_k=k, noise=True, rng=Rng(seed), dtype=np.float64)
    b.w_gate.data = rng.normal(size=(dim, T))
    b.w_noise.data = rng.normal(size=(dim, T))
    mask = (rng.random(dim) < 0.5).astype(float)
    v = gate(b, mask, Rng(seed), training=True).values()
    assert np.count_nonzero(v) == min(k, T)
    assert abs(v.sum() - 1.0) < 1e-6
    v1, v2 = gate(b, mask).values(), gate(b, mask).values()
    np.testing.assert_array_equal(v1, v2)


def test_composite_examples():
    b = bank()
    for t in b.B.values():
        t.data = np.random.default_rng(1).normal(size=t.shape)
    base = Tensor(np.ones(SHAPES["m"]))
    g = gate(b, (1, 0, 0))
    zero = type(g)(Tensor(np.zeros(3)), g.active)
    np.testing.assert_array_equal(composite(b, "m", zero, base).data, base.data)
    one = type(g)(Tensor(np.array([0.0, 1.0, 0.0])), np.array([1]))
    np.testing.assert_allclose(composite(b, "m", one, base).data, 1.0 + b.B["m"].data[1] @ b.A["m"].data[1])


def test_apply_matches_composite_and_merge():
    b = bank(T=4)
    rng = np.random.default_rng(2)
    for t in b.B.values():
        t.data = rng.normal(size=t.shape)
    b.w_gate.data = rng.normal(size=b.w_gate.shape)
    base = rng.normal(size=SHAPES["m"])
    x = rng.normal(size=(3, 4))
    g = gate(b, (0, 1, 1))
    via_apply = x @ base.T + b.apply("m", Tensor(x), g).data
    via_comp = x @ composite(b, "m", g, Tensor(base)).data.T
    via_merge = x @ (base + merge(b, (0, 1, 1))["m"]).T
    np.testing.assert_allclose(via_apply, via_comp, rtol=1e-12)
    np.testing.assert_allclose(via_apply, via_merge, rtol=1e-12)


def test_apply_restricted_rows_and_cols():
    b = bank(T=3)
    rng = np.random.default_rng(3)
    for t in b.B.values():
        t.data = rng.normal(size=t.shape)
    g = gate(b, (1, 0, 1))
    rows, cols = np.array([0, 3]), np.array([1, 2, 3])
    x = rng.normal(size=(2, 3))
    full = merge(b, (1, 0, 1))["m"]
    got = b.apply("m", Tensor(x), g, rows, cols).data
    np.testing.assert_allclose(got, x @ full[np.ix_(rows, cols)].T, rtol=1e-12)
    sliced = merge(b, (1, 0, 1), {"m": (rows, cols)})["m"]
    np.testing.assert_array_equal(sliced, full[np.ix_(rows, cols)])


def test_merge_zero_b_and_noise_guard():
    b = bank()
    assert all(np.all(d == 0) for d in merge(b, (1, 0, 1)).values())
    with pytest.raises(ValueError, match="noise"):
        merge(b, (1, 0, 1), noise=True)


def test_inactive_experts_get_no_gradient():
    b = bank(T=4, k=2)
    rng = np.random.default_rng(4)
    for t in b.B.values():
        t.data = rng.normal(size=t.shape)
    b.w_gate.data = rng.normal(size=b.w_gate.shape)
    g = gate(b, (1, 1, 0))
    loss = tn.sum_(b.apply("m", Tensor(rng.normal(size=(2, 4))), g))
    loss.backward()
    inactive = sorted(set(range(4)) - set(g.active.tolist()))
    assert np.all(b.A["m"].grad[inactive] == 0) and np.all(b.B["m"].grad[inactive] == 0)
    assert np.any(b.B["m"].grad[g.active] != 0)
    assert b.A["n"].grad is None or np.all(b.A["n"].grad == 0)


def test_different_masks_can_route_differently():
    b = bank(T=4, k=2, mask_dim=4)
    b.w_gate.data = np.array([[5.0, 4.0, 0, 0], [0, 0, 0, 0], [0, 0, 4.0, 5.0], [0, 0, 0, 0]])
    assert gate(b, (1, 1, 0, 0)).active.tolist() == [0, 1]
    assert gate(b, (0, 0, 1, 1)).active.tolist() == [2, 3]


def test_gradcheck_gate_and_bank():
    b = bank(T=3, k=2, noise=True)
    rng = np.random.default_rng(5)
    for t in b.parameters().values():
        t.data = rng.normal(size=t.shape)
    x = Tensor(rng.normal(size=(2, 4)))

    def loss():
        g = gate(b, (1, 0, 1), Rng(3), training=True)
        return tn.sum_(b.apply("m", x, g) * b.apply("m", x, g))

    assert tn.gradcheck(loss, list(b.parameters().values())) < 1e-4
