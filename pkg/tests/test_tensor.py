import math
import zlib

import numpy as np
import pytest

from gref import tensor as T
from gref.errors import InvalidArgumentError, ShapeError
from gref.tensor import Tensor, finite_diff_check


def leaf(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class TestSoftmax:
    def test_symmetric_pair(self):
        out = T.softmax(Tensor(np.zeros(2)), axis=-1).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_ln2(self):
        out = T.softmax(Tensor(np.array([math.log(2), 0.0])), axis=-1).data
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_random_normalisation_and_shift(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            x = rng.normal(scale=5, size=n)
            c = float(rng.normal(scale=50))
            p32 = T.softmax(Tensor(x.astype(np.float32))).data
            assert abs(float(p32.sum(dtype=np.float64)) - 1) < 1e-6
            assert np.all(p32 >= 0)
            # shift in float64 so the input itself is not rounded by the shift
            p = T.softmax(Tensor(x)).data
            q = T.softmax(Tensor(x + c)).data
            np.testing.assert_allclose(p, q, atol=1e-6)

    def test_large_logits_do_not_overflow(self):
        p = T.softmax(Tensor(np.array([1000.0, 0.0]))).data
        np.testing.assert_allclose(p, [1.0, 0.0])

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.zeros((3, 0))), axis=-1)


class TestCrossEntropy:
    def test_uniform(self):
        p = Tensor(np.full(4, 0.25))
        for target in range(4):
            assert T.cross_entropy(p, target).item() == pytest.approx(math.log(4))

    def test_certain_target(self):
        assert T.cross_entropy(Tensor(np.array([0.0, 1.0, 0.0])), 1).item() == 0.0

    def test_quarter(self):
        p = Tensor(np.array([0.25, 0.5, 0.25]))
        assert T.cross_entropy(p, 0).item() == pytest.approx(1.3862944, abs=1e-6)

    def test_zero_probability_is_clamped(self):
        before = T.ce_floor_hits
        loss = T.cross_entropy(Tensor(np.array([1.0, 0.0])), 1).item()
        assert loss == pytest.approx(-math.log(T.CE_FLOOR))
        assert math.isfinite(loss)
        assert T.ce_floor_hits == before + 1

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            T.cross_entropy(Tensor(np.full(3, 1 / 3)), 3)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_reuse_accumulates(self):
        x = leaf(2.0)
        y = x * x + x * 3.0 + x
        y.backward()
        assert x.grad == pytest.approx(2 * 2 + 3 + 1)

    def test_softmax_ce_gradient_is_p_minus_onehot(self):
        rng = np.random.default_rng(1)
        z = leaf(rng.normal(size=6))
        loss = T.cross_entropy(T.softmax(z), 2)
        loss.backward()
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        expect = p - np.eye(6)[2]
        np.testing.assert_allclose(z.grad, expect, atol=1e-10)
        # and against central differences
        num = np.zeros(6)
        for i in range(6):
            zp, zm = z.data.copy(), z.data.copy()
            zp[i] += 1e-6
            zm[i] -= 1e-6
            num[i] = (-np.log(np.exp(zp[2]) / np.exp(zp).sum()) + np.log(np.exp(zm[2]) / np.exp(zm).sum())) / 2e-6
        np.testing.assert_allclose(z.grad, num, atol=1e-8)

    def test_sum_of_softmax_has_zero_gradient(self):
        z = leaf(np.random.default_rng(2).normal(size=7))
        T.softmax(z).sum().backward()
        np.testing.assert_allclose(z.grad, 0.0, atol=1e-12)

    def test_non_scalar_root(self):
        x = leaf(np.ones(3))
        with pytest.raises(InvalidArgumentError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = leaf(np.ones(3))
        with T.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_broadcast_gradient_reduces(self):
        x = leaf(np.ones((4, 3)))
        b = leaf(np.zeros(3))
        ((x + b) * 2.0).sum().backward()
        np.testing.assert_allclose(b.grad, [8.0, 8.0, 8.0])


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 5))
        a = a @ a.T
        x = leaf(rng.normal(size=(5, 1)))
        at = Tensor(a)

        def f():
            return T.reshape(T.matmul(T.swap_last(x), T.matmul(at, x)), ())

        assert finite_diff_check(f, [x], 1e-4) < 1e-8

    def test_zero_epsilon_rejected(self):
        x = leaf(1.0)
        with pytest.raises(InvalidArgumentError):
            finite_diff_check(lambda: x * x, [x], 0.0)


def _prim_cases():
    """(name, builder) where builder(rng) -> (fn, leaves)."""

    def unary(op, positive=False, shape=(3, 4)):
        def build(rng):
            data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
            x = leaf(data)
            w = Tensor(rng.normal(size=shape))
            return (lambda: (op(x) * w).sum()), [x]
        return build

    def binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
        def build(rng):
            a = leaf(rng.normal(size=shape_a))
            b = leaf(rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.normal(size=shape_b))
            out_shape = np.broadcast_shapes(shape_a, shape_b)
            w = Tensor(rng.normal(size=out_shape))
            return (lambda: (op(a, b) * w).sum()), [a, b]
        return build

    def matmul(rng):
        a = leaf(rng.normal(size=(2, 3, 4)))
        b = leaf(rng.normal(size=(4, 5)))
        c = leaf(rng.normal(size=(2, 5, 3)))
        w = Tensor(rng.normal(size=(2, 3, 3)))
        return (lambda: (T.matmul(T.matmul(a, b), c) * w).sum()), [a, b, c]

    def layer_norm(rng):
        x = leaf(rng.normal(size=(3, 6)))
        g = leaf(rng.normal(size=6))
        bb = leaf(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        return (lambda: (T.layer_norm(x, g, bb) * w).sum()), [x, g, bb]

    def embedding(rng):
        table = leaf(rng.normal(size=(5, 3)))
        idx = rng.integers(0, 5, size=(2, 4))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        return (lambda: (T.embedding(table, idx) * w).sum()), [table]

    def gather_rows(rng):
        x = leaf(rng.normal(size=(2, 5, 3)))
        idx = rng.integers(0, 5, size=(2, 4))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        return (lambda: (T.gather_rows(x, idx) * w).sum()), [x]

    def take_along(rng):
        x = leaf(rng.normal(size=(3, 6)))
        idx = rng.integers(0, 6, size=(3, 4))
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.take_along(x, idx, axis=-1) * w).sum()), [x]

    def concat(rng):
        a = leaf(rng.normal(size=(2, 3)))
        b = leaf(rng.normal(size=(2, 2)))
        w = Tensor(rng.normal(size=(2, 5)))
        return (lambda: (T.concat([a, b], axis=1) * w).sum()), [a, b]

    def mask_fill(rng):
        x = leaf(rng.normal(size=(3, 4)))
        mask = rng.random((3, 4)) < 0.4
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.softmax(T.masked_fill(x, mask | (np.arange(4) == 5), -1e9)) * w).sum()), [x]

    def attention(rng):
        q = leaf(rng.normal(size=(2, 3, 4)))
        k = leaf(rng.normal(size=(2, 5, 4)))
        v = leaf(rng.normal(size=(2, 5, 4)))
        w = Tensor(rng.normal(size=(2, 3, 4)))
        return (lambda: (T.matmul(T.softmax(T.matmul(q, T.swap_last(k)) * 0.5), v) * w).sum()), [q, k, v]

    def reductions(rng):
        x = leaf(rng.normal(size=(3, 4, 2)))
        w = Tensor(rng.normal(size=(3, 2)))
        return (lambda: (T.mean(x, axis=1) * w).sum() + T.tsum(x * x)), [x]

    def shape_ops(rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(4, 6)))
        return (lambda: (T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)) * w).sum() + x[:, 1:, ::2].sum()), [x]

    return [
        ("add", binary(T.add, (3, 4), (4,))),
        ("sub", binary(T.sub)),
        ("mul", binary(T.mul, (3, 1), (3, 4))),
        ("div", binary(T.div, positive_b=True)),
        ("exp", unary(T.exp)),
        ("log", unary(T.log, positive=True)),
        ("tanh", unary(T.tanh)),
        ("sigmoid", unary(T.sigmoid)),
        ("log_sigmoid", unary(T.log_sigmoid)),
        ("gelu", unary(T.gelu)),
        ("softmax", unary(lambda x: T.softmax(x, axis=-1))),
        ("log_softmax", unary(lambda x: T.log_softmax(x, axis=0))),
        ("power", unary(lambda x: T.power(x, 3.0))),
        ("matmul", matmul),
        ("layer_norm", layer_norm),
        ("embedding", embedding),
        ("gather_rows", gather_rows),
        ("take_along", take_along),
        ("concat", concat),
        ("mask_fill", mask_fill),
        ("attention", attention),
        ("reductions", reductions),
        ("shape_ops", shape_ops),
    ]


@pytest.mark.parametrize("name,build", _prim_cases(), ids=[c[0] for c in _prim_cases()])
def test_primitive_gradients_match_central_differences(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with T.default_dtype(np.float64):
        worst = 0.0
        for _ in range(100):
            fn, leaves = build(rng)
            worst = max(worst, finite_diff_check(fn, leaves, 1e-5))
    assert worst < 1e-5, f"{name}: relative error {worst:.2e}"


def test_replay_is_bit_identical():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)

    def run():
        a = Tensor(x, requires_grad=True)
        b = Tensor(w, requires_grad=True)
        h = T.layer_norm(T.gelu(T.matmul(a, b)), Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32)))
        loss = T.log_softmax(h).sum()
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_float64_mode_switch():
    with T.default_dtype(np.float64):
        p = T.parameter(np.ones(2))
        assert p.dtype == np.float64
    assert T.parameter(np.ones(2)).dtype == np.float32
