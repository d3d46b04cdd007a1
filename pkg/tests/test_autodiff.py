"""Reverse-mode gradients checked against central finite differences.

Each primitive gets >= 100 random draws; the comparator below is written
against the raw op, independent of the tape's own numeric_gradient helper.
"""

import numpy as np
import pytest

from ltof import autodiff as ad


def central_diff(f, x, step=1e-6):
    g = np.empty_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f(x)
        flat[i] = keep - step
        dn = f(x)
        flat[i] = keep
        gf[i] = (up - dn) / (2.0 * step)
    return g


def grad_via_tape(op, arrays, wrt, reduce_all=True):
    tape = ad.Tape()
    vs = [ad.constant(tape, a) for a in arrays]
    out = op(tape, *vs)
    loss = ad.reduce_sum(out) if reduce_all else out
    grads = ad.backward(tape, loss)
    return ad.grad_of(grads, vs[wrt])


def assert_matches(op, arrays, wrt, rtol=1e-6):
    got = grad_via_tape(op, arrays, wrt)

    def scalar(x):
        args = [a.copy() for a in arrays]
        args[wrt] = x
        tape = ad.Tape()
        vs = [ad.constant(tape, a) for a in args]
        return float(ad.reduce_sum(op(tape, *vs)).value)

    want = central_diff(scalar, arrays[wrt].copy())
    denom = np.maximum(np.abs(want), 1.0)
    np.testing.assert_allclose(got, want, rtol=0, atol=rtol * denom.max())


CASES = [
    ("add", lambda t, a, b: ad.add(a, b), 2),
    ("sub", lambda t, a, b: ad.sub(a, b), 2),
    ("mul", lambda t, a, b: ad.mul(a, b), 2),
    ("neg", lambda t, a: ad.neg(a), 1),
    ("relu", lambda t, a: ad.relu(a), 1),
    ("sin", lambda t, a: ad.sin(a), 1),
    ("square", lambda t, a: ad.square(a), 1),
    ("reduce_sum", lambda t, a: ad.reduce_sum(a, axis=1), 1),
    ("reduce_mean", lambda t, a: ad.reduce_mean(a, axis=0), 1),
]


@pytest.mark.parametrize("name,op,nargs", CASES, ids=[c[0] for c in CASES])
def test_elementwise_ops_match_finite_differences(name, op, nargs):
    rng = np.random.default_rng(7)
    draws = 0
    while draws < 100:
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        arrays = [rng.normal(size=shape) for _ in range(nargs)]
        if name == "relu":           # keep away from the kink
            arrays = [np.where(np.abs(a) < 1e-3, a + 0.01, a) for a in arrays]
        for w in range(nargs):
            assert_matches(op, arrays, w)
        draws += 1


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, m, p = rng.integers(1, 5, size=3)
        a = rng.normal(size=(int(n), int(m)))
        b = rng.normal(size=(int(m), int(p)))
        op = lambda t, x, y: ad.matmul(x, y)
        assert_matches(op, [a, b], 0)
        assert_matches(op, [a, b], 1)


def test_broadcast_add_and_mul_gradients():
    rng = np.random.default_rng(13)
    for _ in range(100):
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3,))       # row-broadcast operand
        assert_matches(lambda t, x, y: ad.add(x, y), [a, b], 1)
        assert_matches(lambda t, x, y: ad.mul(x, y), [a, b], 1)


def test_dropout_gradient_masks_and_scales():
    rng = np.random.default_rng(17)
    for _ in range(100):
        a = rng.normal(size=(5, 4))
        mask = (rng.uniform(size=a.shape) < 0.8).astype(np.float64)
        keep = 0.8
        tape = ad.Tape()
        v = ad.constant(tape, a)
        out = ad.dropout(v, mask, keep)
        grads = ad.backward(tape, ad.reduce_sum(out))
        got = ad.grad_of(grads, v)
        np.testing.assert_allclose(got, mask / keep, rtol=0, atol=1e-12)


def test_batch_norm_train_matches_finite_differences():
    rng = np.random.default_rng(19)
    for _ in range(100):
        x = rng.normal(size=(6, 3))
        gamma = rng.uniform(0.5, 1.5, size=3)
        beta = rng.normal(size=3)

        def op(t, xv, gv, bv):
            out, _, _ = ad.batch_norm_train(xv, gv, bv)
            return out

        for w in range(3):
            assert_matches(op, [x, gamma, beta], w, rtol=5e-5)


def test_batch_norm_infer_matches_finite_differences():
    rng = np.random.default_rng(23)
    for _ in range(100):
        x = rng.normal(size=(4, 3))
        gamma = rng.uniform(0.5, 1.5, size=3)
        beta = rng.normal(size=3)
        mean = rng.normal(size=3)
        var = rng.uniform(0.5, 2.0, size=3)

        def op(t, xv, gv, bv):
            return ad.batch_norm_infer(xv, gv, bv, mean, var)

        for w in range(3):
            assert_matches(op, [x, gamma, beta], w)


def test_backward_accumulates_through_shared_subexpressions():
    # d/dx sum((x*x) + (x*x)) = 4x: the tape must add both paths
    x = np.array([[1.5, -2.0, 0.5]])
    tape = ad.Tape()
    v = ad.constant(tape, x)
    sq = ad.mul(v, v)
    out = ad.add(sq, sq)
    grads = ad.backward(tape, ad.reduce_sum(out))
    np.testing.assert_allclose(ad.grad_of(grads, v), 4.0 * x, atol=1e-12)


def test_numeric_gradient_helper_agrees_on_quadratic():
    f = lambda x: float((x ** 2).sum())
    x = np.array([1.0, -3.0, 0.25])
    got = ad.numeric_gradient(f, x)
    np.testing.assert_allclose(got, 2.0 * x, atol=1e-6)
