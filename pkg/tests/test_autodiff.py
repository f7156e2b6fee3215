"""Reverse-mode engine: per-primitive VJPs against finite differences,
graph bookkeeping, and the double-backward path the trainer relies on."""

from __future__ import annotations

import numpy as np
import pytest

from sphattn import autodiff as ad
from conftest import central_diff, relative_close


def _gradcheck(build, x, rtol=1e-6, step=1e-5, frac=1.0):
    """Compare reverse-mode gradient of build(leaf) against central differences."""
    x = np.asarray(x, dtype=float)
    lx = ad.leaf(x)
    out = build(lx)
    (g,) = ad.grad(out, [lx])
    fd = central_diff(lambda v: float(build(ad.constant(v)).value), x, step=step)
    assert relative_close(g.value, fd, rtol) >= frac, (g.value, fd)


rng = np.random.default_rng(7)


def test_square_gradient_exact():
    x = rng.normal(size=6)
    lx = ad.leaf(x)
    (g,) = ad.grad(ad.sum_(ad.mul(lx, lx)), [lx])
    assert np.array_equal(g.value, 2.0 * x)


def test_elementwise_primitives_match_fd():
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    _gradcheck(lambda v: ad.sum_(ad.exp(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.log(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.sqrt(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.sin(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.cos(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.tanh(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.sigmoid(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.pow_const(v, 3.0)), x)
    _gradcheck(lambda v: ad.sum_(ad.div(ad.constant(1.0), v)), x)


def test_broadcast_arithmetic_matches_fd():
    x = rng.normal(size=(4, 1, 3))
    other = ad.constant(rng.normal(size=(2, 3)))
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.add(v, other), ad.sub(v, other))), x)


def test_matmul_matches_fd():
    x = rng.normal(size=(3, 4))
    w = ad.constant(rng.normal(size=(4, 2)))
    _gradcheck(lambda v: ad.sum_(ad.matmul(v, w)), x)
    # broadcast batch dimension on the left operand
    wb = ad.constant(rng.normal(size=(5, 4, 2)))
    _gradcheck(lambda v: ad.sum_(ad.matmul(ad.reshape(v, (1, 3, 4)), wb)), x)
    # and on the right operand
    xb = rng.normal(size=(4, 2))
    lhs = ad.constant(rng.normal(size=(5, 3, 4)))
    _gradcheck(lambda v: ad.sum_(ad.matmul(lhs, ad.reshape(v, (1, 4, 2)))), xb)


def test_matmul_requires_2d():
    with pytest.raises(ValueError):
        ad.matmul(ad.leaf(np.ones(3)), ad.leaf(np.ones((3, 2))))


def test_reductions_and_shape_ops_match_fd():
    x = rng.normal(size=(3, 4))
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.sum_(v, axis=0, keepdims=True), 3.0)), x)
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.mean(v, axis=1), ad.constant(np.arange(3.0)))), x)
    _gradcheck(lambda v: ad.sum_(ad.transpose(v)), x)
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.reshape(v, (12,)), ad.constant(np.arange(12.0)))), x)
    _gradcheck(lambda v: ad.sum_(ad.concat([v, ad.mul(v, 2.0)], axis=1)), x)
    _gradcheck(lambda v: ad.sum_exact(ad.mul(v, v)), x)


def test_gather_scatter_match_fd():
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    w = ad.constant(rng.normal(size=(4, 3)))
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.take(v, (idx,)), w)), x)
    seg = np.array([0, 0, 1, 2, 2])
    _gradcheck(lambda v: ad.sum_(ad.pow_const(ad.segment_sum(v, seg, 3), 2.0)), x)
    _gradcheck(lambda v: ad.sum_exact(ad.pow_const(ad.segment_sum(ad.sum_(v, axis=1), seg, 3, exact=True), 2.0)), x)
    first4 = np.arange(4)
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.scatter_add((7, 3), (idx + 1,), ad.take(v, (first4,))), 1.5)), x)


def test_norm_matches_fd_away_from_zero():
    x = rng.normal(size=(4, 3)) + 0.5
    _gradcheck(lambda v: ad.sum_(ad.norm(v, axis=-1)), x)
    _gradcheck(lambda v: ad.sum_(ad.mul(ad.norm(v, axis=0, keepdims=True), 2.0)), x)


def test_norm_zero_vector_gradient_is_zero():
    x = ad.leaf(np.zeros((2, 3)))
    (g,) = ad.grad(ad.sum_(ad.norm(x, axis=-1)), [x])
    assert np.array_equal(g.value, np.zeros((2, 3)))
    assert np.all(np.isfinite(g.value))


def test_weighted_softmax_constant_values_zero_gradient():
    # convex combination of a constant is constant
    x = rng.normal(size=8)
    w = np.abs(rng.normal(size=8)) + 0.1
    lx = ad.leaf(x)
    e = ad.exp(ad.sub(lx, ad.constant(x.max())))
    num = ad.sum_(ad.mul(ad.mul(e, ad.constant(w)), 3.7))
    den = ad.sum_(ad.mul(e, ad.constant(w)))
    (g,) = ad.grad(ad.div(num, den), [lx])
    assert np.max(np.abs(g.value)) < 1e-12


def test_three_layer_composition_matches_fd():
    x = rng.normal(size=(4, 5))
    w1 = ad.constant(rng.normal(size=(5, 6)))
    w2 = ad.constant(rng.normal(size=(6, 3)))

    def f(v):
        h = ad.tanh(ad.matmul(v, w1))
        h = ad.sigmoid(ad.matmul(h, w2))
        return ad.sum_(ad.mul(h, h))

    _gradcheck(f, x, rtol=1e-6, frac=0.99)


def test_grad_requires_scalar_output():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.grad(ad.mul(x, x), [x])


def test_grad_detached_node_raises():
    x = ad.leaf(np.ones(3))
    y = ad.leaf(np.ones(3))
    out = ad.sum_(ad.mul(x, x))
    with pytest.raises(ad.MissingDependencyError):
        ad.grad(out, [y])
    (gy,) = ad.grad(out, [y], allow_unused=True)
    assert np.array_equal(gy.value, np.zeros(3))


def test_double_precision_end_to_end():
    x = ad.leaf(np.ones(4, dtype=np.float32))
    out = ad.sum_(ad.mul(x, x))
    assert x.value.dtype == np.float64
    assert out.value.dtype == np.float64


def test_tape_is_topologically_ordered():
    x = ad.leaf(rng.normal(size=3))
    y = ad.sum_(ad.exp(ad.mul(x, 2.0)))
    tape = ad.Tape.from_output(y)
    tape.validate()
    ids = [e.node_id for e in tape.entries]
    assert ids == sorted(ids)
    # every node except the output feeds a later entry
    consumed = {p for e in tape.entries for p in e.parent_ids}
    assert {e.node_id for e in tape.entries} - {y.tid} <= consumed
    assert tape.entries[-1].node_id == y.tid


def test_tape_validate_rejects_forward_reference():
    e1 = ad.TapeEntry("mul", 10, (11,), (3,))
    e2 = ad.TapeEntry("leaf", 11, (), (3,))
    with pytest.raises(ValueError):
        ad.Tape([e1, e2]).validate()


def test_second_order_force_style_gradient():
    # L(theta) = sum((dE/dx - f0)^2) with E = sum(sin(theta * x));
    # checks the reverse-over-reverse path used for force-matching losses.
    theta0 = np.array([0.7, -1.3])
    x0 = rng.normal(size=(3, 2))
    f0 = rng.normal(size=(3, 2))

    def loss_value(tv):
        th = ad.leaf(tv)
        x = ad.leaf(x0)
        e = ad.sum_(ad.sin(ad.mul(x, ad.reshape(th, (1, 2)))))
        (gx,) = ad.grad(e, [x])
        r = ad.sub(gx, ad.constant(f0))
        return ad.sum_(ad.mul(r, r)), th

    loss, th = loss_value(theta0)
    (gth,) = ad.grad(loss, [th])
    fd = central_diff(lambda tv: float(loss_value(tv)[0].value), theta0, step=1e-6)
    assert relative_close(gth.value, fd, 1e-5) == 1.0


def test_gradients_are_reproducible():
    x = rng.normal(size=(6, 3))

    def run():
        lx = ad.leaf(x)
        h = ad.sigmoid(ad.matmul(lx, ad.constant(np.eye(3) * 0.5)))
        (g,) = ad.grad(ad.sum_(ad.norm(h, axis=-1)), [lx])
        return g.value

    assert np.array_equal(run(), run())


def test_release_breaks_closure_cycles():
    import weakref

    a = ad.leaf(np.arange(3.0))
    mid = ad.exp(a)  # exp's backward references its own output node
    out = ad.sum_(ad.mul(mid, mid))
    ref = weakref.ref(mid)
    del mid
    assert ref() is not None  # kept alive through out.parents
    ad.release(out)
    assert out.parents == () and out.vjp is None
    del out
    assert ref() is None  # cycle snapped, refcount freed it
    assert np.array_equal(a.value, np.arange(3.0))


def test_release_tolerates_plain_values_and_sharing():
    a = ad.leaf(np.ones(2))
    b = ad.mul(a, 2.0)
    c = ad.add(b, b)
    ad.release(c, 3.5, None)
    assert c.parents == ()
    ad.release(c)  # releasing twice is harmless
