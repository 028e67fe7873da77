import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.autodiff import Tape, Tensor, backward, gradient_check, no_grad, ops, strict
from bevocc.errors import NumericsError, ShapeError


def test_add_elementwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_softplus_zero_is_ln2():
    assert ops.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_conv2d_all_ones_center():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, w, padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    # corners only see a 2x2 window
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_exp():
    x = Tensor([0.0], requires_grad=True)
    backward(ops.exp(x).sum())
    np.testing.assert_array_equal(x.grad, [1.0])


def test_cross_entropy_uniform_gradient():
    logits = Tensor(np.zeros((1, 4)), requires_grad=True)
    loss = ops.cross_entropy(logits, [0])
    assert loss.item() == pytest.approx(math.log(4.0))
    backward(loss)
    np.testing.assert_allclose(logits.grad, [[-0.75, 0.25, 0.25, 0.25]], atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_strict_mode_rejects_nonfinite():
    ops.exp(Tensor([np.nan]))  # allowed outside strict mode
    with strict(), pytest.raises(NumericsError):
        ops.exp(Tensor([np.nan]))


def test_leaf_grad_populated_once_with_shared_use():
    # x feeds two branches; its grad must be the sum, written once
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    backward((y * y + y).sum())
    np.testing.assert_allclose(x.grad, [2 * 2 * 6.0 + 2.0])


def test_tape_order_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = x * 2.0
    b = ops.exp(a)
    loss = (a + b).sum()
    tape = Tape.build(loss)
    pos = {id(t): i for i, t in enumerate(tape.entries)}
    for t in tape.entries:
        for inp in t._node.inputs:
            if inp._node is not None:
                assert pos[id(inp)] < pos[id(t)]
    assert tape.ops[-1] == "reduce_sum"


def test_tape_discarded_after_backward():
    x = Tensor([1.0], requires_grad=True)
    y = ops.exp(x)
    backward(y.sum())
    assert y._node is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_gradient_check_examples():
    x = Tensor([1.0, 2.0, 3.0])
    assert gradient_check(lambda t: (t * t).sum(), x, 1e-4) < 1e-6
    assert gradient_check(lambda t: Tensor(5.0) + 0.0 * t.sum(), x, 1e-4) == 0.0
    x = Tensor([-1.0, 0.0, 1.0])
    assert gradient_check(lambda t: ops.softplus(t).sum(), x, 1e-4) < 1e-6


def test_gradient_check_flags_nonfinite():
    with pytest.raises(NumericsError), np.errstate(invalid="ignore"):
        gradient_check(lambda t: ops.log(t).sum(), Tensor([-1.0]), 1e-4)


def test_gradient_check_detects_wrong_gradient():
    from bevocc.autodiff import record

    def bad_square(t):
        return record("bad", t.data**2, (t,), lambda g: (g * t.data,)).sum()

    assert gradient_check(bad_square, Tensor([1.0, 2.0]), 1e-4) > 0.4


def _weights(rng, shape):
    return rng.normal(size=shape)


def _primitive_cases():
    # (name, builder(rng) -> (f, inputs))
    def elementwise(op):
        def build(rng):
            a = Tensor(rng.normal(size=(3, 4)))
            b = Tensor(rng.normal(size=(4,)))
            w = _weights(rng, (3, 4))
            return (lambda a, b: (op(a, b) * w).sum()), [a, b]

        return build

    def unary(op, positive=False):
        def build(rng):
            data = rng.normal(size=(2, 5))
            if positive:
                data = np.abs(data) + 0.5
            w = _weights(rng, (2, 5))
            return (lambda a: (op(a) * w).sum()), [Tensor(data)]

        return build

    def matmul(rng):
        a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 2)))
        w = _weights(rng, (2, 3, 2))
        return (lambda a, b: (ops.matmul(a, b) * w).sum()), [a, b]

    def conv(rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 4)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        w = _weights(rng, (1, 3, 3, 2))
        return (lambda x, k, b: (ops.conv2d(x, k, b, stride=2, padding=1) * w).sum()), [x, k, b]

    def softmax(rng):
        w = _weights(rng, (3, 4))
        return (lambda a: (ops.softmax(a, axis=0) * w).sum()), [Tensor(rng.normal(size=(3, 4)))]

    def layer_norm(rng):
        w = _weights(rng, (4, 3))
        return (lambda a: (ops.layer_norm(a, axis=0) * w).sum()), [Tensor(rng.normal(size=(4, 3)))]

    def bilinear(rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 5)))
        # keep samples away from integer coordinates, where the map has kinks
        py = Tensor(rng.integers(0, 3, size=(2, 6)) + rng.uniform(0.1, 0.9, size=(2, 6)))
        px = Tensor(rng.integers(-1, 4, size=(2, 6)) + rng.uniform(0.1, 0.9, size=(2, 6)))
        w = _weights(rng, (2, 2, 6))
        pad = "zeros" if rng.integers(2) else "border"
        return (lambda x, py, px: (ops.gather_bilinear(x, py, px, pad) * w).sum()), [x, py, px]

    def scatter(rng):
        idx = rng.integers(0, 4, size=7)
        w = _weights(rng, (2, 4))
        return (lambda s: (ops.scatter_add(s, idx, 4) * w).sum()), [Tensor(rng.normal(size=(2, 7)))]

    def reshape_permute(rng):
        w = _weights(rng, (4, 2, 3))
        return (lambda a: (a.reshape(2, 3, 4).permute(2, 0, 1) * w).sum()), [
            Tensor(rng.normal(size=(6, 4)))
        ]

    def reduce(rng):
        w = _weights(rng, (3,))
        return (lambda a: (a.sum(axis=1) * w).sum()), [Tensor(rng.normal(size=(3, 5)))]

    def cross_entropy(rng):
        target = rng.integers(0, 4, size=5)
        weight = rng.uniform(0.2, 1.0, size=5)
        return (lambda a: ops.cross_entropy(a, target, weight)), [Tensor(rng.normal(size=(5, 4)))]

    def getitem_concat(rng):
        idx = rng.integers(0, 5, size=(3,))
        w = _weights(rng, (2, 6))
        return (lambda a, b: (ops.concat([a[:, idx], b], axis=1) * w).sum()), [
            Tensor(rng.normal(size=(2, 5))),
            Tensor(rng.normal(size=(2, 3))),
        ]

    return {
        "add": elementwise(ops.add),
        "sub": elementwise(ops.sub),
        "mul": elementwise(ops.mul),
        "div": elementwise(lambda a, b: ops.div(a, ops.exp(b))),
        "exp": unary(ops.exp),
        "log": unary(ops.log, positive=True),
        "softplus": unary(ops.softplus),
        "silu": unary(ops.silu),
        "expm1_ratio": unary(ops.expm1_ratio),
        "matmul": matmul,
        "conv2d": conv,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "gather_bilinear": bilinear,
        "scatter_add": scatter,
        "reshape_permute": reshape_permute,
        "reduce_sum": reduce,
        "cross_entropy": cross_entropy,
        "getitem_concat": getitem_concat,
    }


CASES = _primitive_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        f, inputs = CASES[name](np.random.default_rng(seed))
        worst = max(worst, gradient_check(f, inputs, 1e-4))
    assert worst < 1e-5, f"{name}: {worst:.2e}"


def test_expm1_ratio_small_arguments():
    z = np.array([0.0, 1e-8, -1e-7, 1e-4, -0.3, 2.0])
    got = ops.expm1_ratio(Tensor(z)).data
    ref = np.array([1.0, 1.0, 1.0] + [math.expm1(v) / v for v in z[3:]])
    np.testing.assert_allclose(got, ref, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=2, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_reshape_permute_roundtrip_bit_exact(shape, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=shape)
    axes = tuple(rng.permutation(len(shape)))
    inv = tuple(np.argsort(axes))
    back = Tensor(data).permute(axes).permute(inv).reshape(-1).reshape(shape)
    assert np.array_equal(back.data, data)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 30))
def test_scatter_add_is_order_independent(seed, n):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, size=n)
    src = rng.integers(-50, 50, size=n).astype(float)  # integers: exact sums in any order
    perm = rng.permutation(n)
    a = ops.scatter_add(Tensor(src), idx, 5).data
    b = ops.scatter_add(Tensor(src[perm]), idx[perm], 5).data
    ref = np.array([src[idx == k].sum() for k in range(5)])
    np.testing.assert_array_equal(a, ref)
    np.testing.assert_array_equal(b, ref)
