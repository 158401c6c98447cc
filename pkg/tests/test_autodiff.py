from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmoetrack import autodiff as ad
from dmoetrack.autodiff import Tensor, gradient_check
from dmoetrack.errors import ConfigError, NumericError, ShapeError


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


# -- matmul ---------------------------------------------------------------------

def naive_matmul(a, b):
    m, p = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for k in range(p):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_examples():
    b = np.array([[5.0], [6.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), b).data, b)
    np.testing.assert_array_equal(ad.matmul(np.array([[1.0, 2], [3, 4]]), b).data, [[17.0], [39.0]])
    np.testing.assert_array_equal(ad.matmul(np.zeros((3, 2)), b).data, np.zeros((3, 1)))


def test_matmul_matches_loop_oracle(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(ad.matmul(a, b).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_rules(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    (ad.matmul(a, b) * g).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


# -- conv2d ---------------------------------------------------------------------

def naive_conv(x, w, b):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i + u - ph, j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += w[o, c, u, v] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def test_conv_identity_kernel_is_exact(rng):
    x = rng.normal(size=(2, 1, 5, 6))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel():
    out = ad.conv2d(np.ones((1, 2, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4, 4)))


def test_conv_box_filter_borders():
    x = np.full((1, 1, 5, 5), 2.0)
    out = ad.conv2d(x, np.full((1, 1, 3, 3), 1.0 / 9), np.zeros(1)).data[0, 0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 2.0, atol=1e-14)
    np.testing.assert_allclose(out[0, 0], 2.0 * 4 / 9, atol=1e-14)
    np.testing.assert_allclose(out[0, 2], 2.0 * 6 / 9, atol=1e-14)
    np.testing.assert_allclose(out, naive_conv(x, np.full((1, 1, 3, 3), 1.0 / 9), np.zeros(1))[0, 0], atol=1e-14)


def test_conv_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    np.testing.assert_allclose(ad.conv2d(x, w, b).data, naive_conv(x, w, b), atol=1e-12)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))


# -- softmax --------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(np.full(8, 3.7)).data, np.full(8, 1 / 8), atol=1e-15)
    np.testing.assert_allclose(ad.softmax(np.array([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        ad.softmax(np.array([0.0, np.nan]))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_sums_to_one_and_shift_invariant(values):
    x = np.array(values)
    p = ad.softmax(x).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    np.testing.assert_allclose(ad.softmax(x + 7).data, p, atol=1e-12)


def test_softmax_cross_entropy_gradient_closed_form(rng):
    z = leaf(rng.normal(size=5))
    onehot = np.eye(5)[3]
    loss = -(ad.log_softmax(z) * onehot).sum()
    loss.backward()
    np.testing.assert_allclose(z.grad, ad.softmax(z.data).data - onehot, atol=1e-12)


# -- topk -----------------------------------------------------------------------

def test_topk_examples():
    idx, _ = ad.topk(np.array([0.1, 0.5, 0.4]), 2)
    assert set(idx.tolist()) == {1, 2}
    idx, _ = ad.topk(np.array([0.3, 0.3, 0.2]), 1)
    assert idx.tolist() == [0]
    idx, vals = ad.topk(np.array([0.2, 0.9, 0.1, 0.4]), 4)
    assert sorted(idx.tolist()) == [0, 1, 2, 3]


def test_topk_bad_k():
    with pytest.raises(ConfigError):
        ad.topk(np.ones(3), 4)
    with pytest.raises(ConfigError):
        ad.topk(np.ones(3), 0)


@given(st.lists(st.integers(0, 3), min_size=2, max_size=10), st.data())
def test_topk_tie_rule_and_determinism(values, data):
    v = np.array(values, dtype=float)
    k = data.draw(st.integers(1, len(v)))
    idx, vals = ad.topk(v, k)
    idx2, _ = ad.topk(v, k)
    assert idx.tolist() == idx2.tolist()
    # oracle: sort by (-value, index)
    expected = sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]
    assert idx.tolist() == expected
    np.testing.assert_array_equal(vals.data, v[expected])


# -- backward -------------------------------------------------------------------

def test_backward_square():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        (leaf([1.0, 2.0]) * 2).backward()


def test_unused_leaf_has_no_gradient_and_off_path_zero():
    x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    used = x * 2
    _ = y * 3
    used.sum().backward()
    assert y.grad is None or np.all(y.grad == 0)


def test_tape_topological_and_visits_once():
    x = leaf(2.0)
    a = x * x
    b = a + a  # a reused
    c = b * a
    tape = ad.build_tape(c)
    ids = [id(t) for t in tape]
    assert len(ids) == len(set(ids))
    pos = {id(t): i for i, t in enumerate(tape)}
    for t in tape:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]
    c.backward()
    # c = 2 x^4 -> dc/dx = 8 x^3
    assert x.grad == pytest.approx(64.0)


def test_gradient_check_sum_is_exact(rng):
    x = leaf(rng.normal(size=(3, 4)))
    assert gradient_check(lambda t: t.sum(), x) < 1e-10


def test_seeded_replay_bitwise(rng):
    def run():
        r = np.random.default_rng(5)
        a = Tensor(r.normal(size=(4, 6)))
        w = Tensor(r.normal(size=(6, 3)))
        return ad.layer_norm(ad.gelu(a @ w), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert run().tobytes() == run().tobytes()


# -- finite-difference checks over every primitive -----------------------------

def _unary_cases():
    return {
        "exp": lambda t: ad.exp(t),
        "log": lambda t: ad.log(ad.abs_(t) + 0.5),
        "sqrt": lambda t: ad.sqrt(t * t + 0.3),
        "sigmoid": ad.sigmoid,
        "softplus": ad.softplus,
        "tanh": ad.tanh,
        "relu": lambda t: ad.relu(t + 0.05),
        "gelu": ad.gelu,
        "power": lambda t: ad.power(t * t + 1.0, 1.5),
        "clamp": lambda t: ad.clamp(t, -0.5, 0.5),
        "abs": lambda t: ad.abs_(t + 0.05),
        "softmax": lambda t: ad.softmax(t, axis=-1),
        "log_softmax": lambda t: ad.log_softmax(t, axis=0),
        "sum_axis": lambda t: t.sum(axis=0),
        "mean_axis": lambda t: t.mean(axis=-1, keepdims=True),
        "max_axis": lambda t: t.max(axis=-1),
        "transpose": lambda t: t.transpose(),
        "reshape": lambda t: t.reshape(-1),
        "getitem": lambda t: t[np.array([0, 0, 1])],
        "concat": lambda t: ad.concat([t, t * 2], axis=-1),
        "stack": lambda t: ad.stack([t, ad.exp(t)], axis=0),
        "div": lambda t: t / (t * t + 1.0),
        "maximum": lambda t: ad.maximum(t, 0.1 * t + 0.03),
        "minimum": lambda t: ad.minimum(t, 0.2),
        "broadcast_add": lambda t: t + t.sum(axis=0, keepdims=True),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_primitive_gradients_random_shapes(name):
    fn = _unary_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(5):
        shape = tuple(int(s) for s in rng.integers(2, 5, size=2))
        x = leaf(rng.normal(size=shape))
        w = rng.normal(size=fn(Tensor(x.data)).shape)
        err = gradient_check(lambda t: (fn(t) * w).sum(), x)
        assert err < 1e-4, f"{name}: {err}"


def test_binary_and_structured_gradients(rng):
    cases = []
    for _ in range(10):
        m, p, n = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = leaf(rng.normal(size=(m, p))), leaf(rng.normal(size=(p, n)))
        cases.append(([a, b], lambda a=a, b=b: (ad.matmul(a, b) ** 2).sum()))
        x = leaf(rng.normal(size=(2, 2, 4, 3)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)) * 0.3)
        bias = leaf(rng.normal(size=3))
        cases.append(([x, w, bias], lambda x=x, w=w, bias=bias: (ad.conv2d(x, w, bias) ** 2).sum()))
        z = leaf(rng.normal(size=(3, 5)))
        g = leaf(1.0 + 0.1 * rng.normal(size=5))
        beta = leaf(rng.normal(size=5))
        target = rng.normal(size=(3, 5))
        cases.append(([z, g, beta], lambda z=z, g=g, beta=beta: (ad.layer_norm(z, g, beta) * target).sum()))
        v = leaf(rng.normal(size=(4, 6)))
        idx = np.argsort(-v.data, axis=-1, kind="stable")[:, :2]
        cases.append(([v], lambda v=v, idx=idx: (ad.take_along_axis(v, idx, axis=-1) ** 2).sum()))
        rows = rng.integers(0, 3, size=5)
        vals = leaf(rng.normal(size=(5, 2)))
        cases.append(([vals], lambda vals=vals, rows=rows: (ad.index_add(vals, rows, 3) ** 2).sum()))
    assert len(cases) >= 50
    for params, f in cases:
        assert gradient_check(f, params) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_composite_graph_gradients(m, n, seed):
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(m, n)))
    b = leaf(r.normal(size=(n, m)))
    f = lambda: (ad.softmax(ad.gelu(a @ b), axis=-1) * ad.sigmoid(a @ b)).sum() + ad.tanh(a).mean()
    assert gradient_check(f, [a, b]) < 1e-4


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad and y._parents == ()
