import itertools

import numpy as np
import pytest
from scipy.special import expit

from minkgeom import autodiff as ad

H = 1e-6


def numeric_grad(f, xs, h=H):
    """Central differences of scalar ``f(*arrays)`` with respect to each array."""
    out = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            up = [a.copy() for a in xs]
            dn = [a.copy() for a in xs]
            up[k][idx] += h
            dn[k][idx] -= h
            g[idx] = (f(*up) - f(*dn)) / (2 * h)
        out.append(g)
    return out


def check(op, *inputs, tol=1e-6):
    """Compare adjoints of ``sum(op(...) * w)`` with central differences."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = ad.Tape()
    shape = op(*[probe.const(x) for x in inputs]).shape
    w = np.random.default_rng(99).uniform(0.5, 1.5, shape)

    def value(*arrays):
        t = ad.Tape()
        return float(ad.sum(op(*[t.const(a) for a in arrays]) * w).value)

    t = ad.Tape()
    vs = [t.var(x) for x in inputs]
    grads = t.backward(ad.sum(op(*vs) * w))
    for g, fd in zip([grads[v] for v in vs], numeric_grad(value, inputs)):
        err = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        assert err < tol, (g, fd)


rng = np.random.default_rng(0)
A = rng.uniform(0.5, 2.0, (3, 4))
B = rng.uniform(0.5, 2.0, (3, 4)) + 2.5  # strictly above A: no min/max ties
SIGNED = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4))

UNARY = {
    "neg": ad.neg, "abs": ad.abs, "log1p": ad.log1p, "exp": ad.exp, "sqrt": ad.sqrt,
    "sigmoid": ad.sigmoid, "softplus": ad.softplus, "gelu": ad.gelu, "tanh": ad.tanh,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives(name):
    x = A if name in ("log1p", "sqrt") else SIGNED
    check(UNARY[name], x)


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div, ad.min2, ad.max2])
def test_binary_primitives(op):
    check(op, A, B)
    check(op, B, A)


def test_scalar_operand():
    check(lambda x, s: x * ad.reshape(s, ()), A, np.array([1.7]))
    check(lambda x: 2.0 - x / 3.0, A)


def test_structural_primitives():
    check(lambda x: ad.sum(x), A)
    check(lambda x: ad.sum(x, axis=0), A)
    check(lambda x: ad.shift(x, 1, -1), A)
    check(lambda x: ad.shift(x, -2, 0), A)
    check(lambda x: ad.slice_(x, (slice(None), [2, 0, 2])), A)
    check(lambda x, y: ad.concat([x, y], axis=0), A, B)
    check(lambda x: ad.softmax(x), A)
    check(lambda x: ad.cumsum(x), A)
    check(lambda x: ad.cumsum(x, reverse=True), A)
    check(lambda x, y: ad.dot(x, y), A, B)
    check(lambda x: ad.reshape(x, (2, 6)), A)
    check(lambda x, y: ad.stack([x, y], axis=-1), A, B)


def test_matvec_and_scale():
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    check(lambda w, x, b: ad.matvec(w, x, b), w, A, b)
    check(lambda w, x: ad.matvec(w, x), w, A[0])
    check(lambda x, s: ad.scale(x, s), A, rng.uniform(1, 2, 3))
    check(lambda x, s: ad.scale(x, s), A, np.array(1.3))


def test_primitive_registry_complete():
    spec_set = {
        "add", "sub", "mul", "div", "neg", "sum", "abs", "log1p", "exp", "sqrt", "sigmoid",
        "softplus", "gelu", "tanh", "min2", "max2", "shift", "slice", "concat", "softmax",
        "cumsum", "dot", "matvec", "scale",
    }
    assert spec_set <= set(ad.PRIMITIVES)


def test_sigmoid_slope_at_zero():
    t = ad.Tape()
    x = t.var(0.0)
    assert t.backward(ad.sigmoid(x))[x] == 0.25


@pytest.mark.parametrize("x0", [-2.0, 0.0, 3.0])
def test_softplus_slope_is_sigmoid(x0):
    t = ad.Tape()
    x = t.var(x0)
    assert t.backward(ad.softplus(x))[x] == pytest.approx(expit(x0), rel=1e-15)


def test_gelu_close_to_exact():
    from scipy.special import erf

    x = np.linspace(-6, 6, 2001)
    t = ad.Tape()
    approx = ad.gelu(t.const(x)).value
    exact = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    assert np.abs(approx - exact).max() < 1e-3


def test_identity_and_square():
    t = ad.Tape()
    x = t.var(3.0)
    assert t.backward(x * 1.0)[x] == 1.0
    t = ad.Tape()
    x = t.var(A)
    np.testing.assert_allclose(t.backward(ad.sum(x * x))[x], 2 * A)


def test_unused_leaf_gets_zeros():
    t = ad.Tape()
    x, y = t.var(A), t.var(B)
    g = t.backward(ad.sum(x))
    assert np.all(g[y] == 0) and g[y].shape == B.shape


def test_min2_conventions():
    t = ad.Tape()
    a, b = t.var(1.0), t.var(2.0)
    g = t.backward(ad.min2(a, b))
    assert (g[a], g[b]) == (1.0, 0.0)
    t = ad.Tape()
    x = t.var(1.5)
    assert t.backward(ad.min2(x, x))[x] == 1.0


def test_chained_min_matches_nary_min():
    for vals in itertools.permutations([0.3, 1.1, 2.0, 5.5]):
        t = ad.Tape()
        xs = [t.var(v) for v in vals]
        m = ad.min2(ad.min2(xs[0], xs[1]), ad.min2(xs[2], xs[3]))
        assert float(m.value) == min(vals)
        g = t.backward(m)
        onehot = [float(v == min(vals)) for v in vals]
        assert [float(g[x]) for x in xs] == onehot


def test_min_tie_split_total():
    t = ad.Tape()
    xs = [t.var(1.0) for _ in range(4)]
    m = ad.min2(ad.min2(xs[0], xs[1]), ad.min2(xs[2], xs[3]))
    g = t.backward(m)
    assert sum(float(g[x]) for x in xs) == pytest.approx(1.0)


def test_shape_errors():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.add(t.var(np.ones(3)), t.var(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.add(t.var(np.ones((3, 1))), t.var(np.ones((3, 4))))
    with pytest.raises(ad.ShapeError):
        t.backward(t.var(np.ones(2)))
    with pytest.raises(ad.ShapeError):
        ad.matvec(t.var(np.ones((2, 3))), t.var(np.ones(4)))


def test_domain_errors():
    t = ad.Tape()
    with pytest.raises(ad.DomainError):
        ad.log1p(t.var(-1.0))
    with pytest.raises(ad.DomainError):
        ad.sqrt(t.var(-0.1))
    with pytest.raises(ad.DomainError):
        ad.div(t.var(1.0), t.var(0.0))


def test_tapes_do_not_mix():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        ad.add(t1.var(1.0), t2.var(1.0))


def test_composite_soft_area_graph():
    from minkgeom.analytic_surrogate import soft_area, soft_indicator

    x = rng.uniform(0, 1, (6, 6))
    check(lambda z: soft_area(soft_indicator(z, 0.5, 0.1), 2.0), x, tol=1e-5)


def test_reverse_cumsum_tail():
    t = ad.Tape()
    out = ad.cumsum(t.const([1.0, 2.0, 3.0]), reverse=True).value
    assert out.tolist() == [6.0, 5.0, 3.0]
