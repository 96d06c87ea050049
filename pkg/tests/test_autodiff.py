import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccotta import autodiff as ad
from conftest import check_grads, numeric_grad


def test_softmax_of_zero_is_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros((1, 4))).values, [[0.25] * 4])


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).values, [0, 0, 2])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    brute = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                brute[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(a, b).values, brute, rtol=0, atol=1e-14)


def test_backward_square():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    grads = ad.backward(ad.mul(x, x))
    assert grads[x] == pytest.approx(6.0)


def test_backward_sum_of_softmax_is_flat():
    tape = ad.Tape()
    z = tape.leaf(np.random.default_rng(1).normal(size=(3, 5)))
    grads = ad.backward(ad.total(ad.softmax(z)))
    np.testing.assert_allclose(grads[z], 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.scale(x, 2.0))


def test_unreached_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x, unused = tape.leaf(np.ones(2)), tape.leaf(np.ones(4))
    grads = ad.backward(ad.total(x))
    np.testing.assert_array_equal(grads[unused], np.zeros(4))


def test_shape_errors_are_descriptive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones(2))


def test_log_clamps_instead_of_failing():
    out = ad.log(np.array([0.0, 1.0]))
    assert out.values[0] == pytest.approx(np.log(1e-12))
    tape = ad.Tape()
    x = tape.leaf(np.array([0.0, 2.0]))
    g = ad.backward(ad.total(ad.log(x)))[x]
    assert g[0] == 0.0 and g[1] == pytest.approx(0.5)


def test_non_finite_values_raise():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.scale(ad.Tensor([1e308]), 10.0)


def test_constants_are_not_recorded():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    c = ad.constant(x)
    assert c.tape is None
    y = ad.add(ad.scale(c, 2.0), x)
    assert ad.backward(ad.total(y))[x].tolist() == [1.0, 1.0, 1.0]


# Finite-difference oracles, one per op, on random inputs.

UNARY = {
    "relu": lambda t: ad.total(ad.mul(ad.relu(t["a"]), t["a"])),
    "absolute": lambda t: ad.total(ad.absolute(t["a"])),
    "softmax": lambda t: ad.total(ad.mul(ad.softmax(t["a"]), ad.Tensor(np.arange(12.0).reshape(3, 4)))),
    "log": lambda t: ad.total(ad.log(ad.mul(t["a"], t["a"]))),
    "sqrt": lambda t: ad.total(ad.sqrt(ad.mul(t["a"], t["a"]))),
    "standardize": lambda t: ad.total(ad.mul(ad.standardize(t["a"]), ad.Tensor(np.arange(12.0).reshape(3, 4)))),
    "mean_axis0": lambda t: ad.total(ad.mul(ad.mean(t["a"], axis=0), ad.mean(t["a"], axis=0))),
    "total_axis1": lambda t: ad.total(ad.mul(ad.total(t["a"], axis=1), ad.Tensor([1.0, -2.0, 3.0]))),
    "take_rows": lambda t: ad.total(ad.mul(ad.take_rows(t["a"], [2, 0, 2]), ad.take_rows(t["a"], [1, 1, 0]))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_ops_match_finite_differences(name, seed):
    a = np.random.default_rng(seed).normal(size=(3, 4)) + 0.1
    check_grads(UNARY[name], {"a": a})


@pytest.mark.parametrize("seed", range(5))
def test_binary_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    inputs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)),
              "r": rng.normal(size=4), "s": np.array(1.5 + rng.random())}

    def build(t):
        m = ad.matmul(ad.add(ad.mul(t["a"], t["r"]), t["r"]), t["b"])
        v = ad.sub(ad.total(m, axis=1), ad.Tensor(np.ones(3)))
        return ad.add(ad.div(ad.dot(v, v), t["s"]), ad.norm(ad.mean(ad.sub(t["a"], t["r"]), axis=0)))

    check_grads(build, inputs)


def _two_layer(rng):
    d, h, c, n = rng.integers(2, 6), rng.integers(2, 8), rng.integers(2, 5), rng.integers(3, 7)
    params = {"w1": rng.normal(size=(d, h)), "b1": rng.normal(size=h) * 0.1,
              "w2": rng.normal(size=(h, c)), "b2": rng.normal(size=c) * 0.1}
    x = rng.normal(size=(n, d))
    target = rng.dirichlet(np.ones(c), size=n)
    return params, x, target


@pytest.mark.parametrize("seed", range(50))
def test_random_two_layer_network_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    params, x, target = _two_layer(rng)

    def build(t):
        h = ad.relu(ad.standardize(ad.add(ad.matmul(ad.Tensor(x), t["w1"]), t["b1"])))
        p = ad.softmax(ad.add(ad.matmul(h, t["w2"]), t["b2"]))
        return ad.scale(ad.total(ad.mul(ad.Tensor(target), ad.log(p))), -1.0 / len(x))

    check_grads(build, params)


def test_tape_is_deterministic():
    rng = np.random.default_rng(7)
    params, x, _ = _two_layer(rng)

    def run():
        tape = ad.Tape()
        t = {k: tape.leaf(v) for k, v in params.items()}
        loss = ad.total(ad.relu(ad.add(ad.matmul(ad.Tensor(x), t["w1"]), t["b1"])))
        return [g.tobytes() for g in ad.backward(loss, t.values()).values()], len(tape)

    assert run() == run()


# jvp_probe

def test_jvp_linear_head_is_exact_for_any_epsilon():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])  # h(z) = W z, i.e. z @ W.T
    for eps in (1e-6, 1e-3, 1.0, 10.0):
        out = ad.jvp_probe(lambda z: ad.matmul(z, ad.Tensor(w.T)), np.array([[0.3, -0.7]]),
                           np.array([1.0, 0.0]), eps)
        np.testing.assert_allclose(out.values, [[1.0, 3.0]], atol=1e-9)


def test_jvp_zero_direction():
    out = ad.jvp_probe(lambda z: ad.relu(z), np.ones((2, 3)), np.zeros(3))
    np.testing.assert_array_equal(out.values, np.zeros((2, 3)))


def test_jvp_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.jvp_probe(lambda z: z, np.ones((2, 3)), np.ones(2))


def test_jvp_relu_head_converges_linearly_in_epsilon():
    rng = np.random.default_rng(4)
    w1, w2 = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    z, v = rng.normal(size=(4, 5)), rng.normal(size=5)

    def head(t):
        return ad.matmul(ad.relu(ad.matmul(t, ad.Tensor(w1))), ad.Tensor(w2))

    # analytic forward-mode: relu'(z W1) * (v W1), then W2
    analytic = (((z @ w1) > 0) * (v @ w1)) @ w2
    errs = [np.abs(ad.jvp_probe(head, z, v, eps).values - analytic).max() for eps in (1e-2, 1e-3, 1e-4)]
    # piecewise linear head: the error shrinks with eps until no kink is crossed
    assert errs[0] < 0.5
    assert errs[1] <= max(errs[0] * 0.2, 1e-9)
    assert errs[2] <= max(errs[1] * 0.2, 1e-9)


def test_jvp_gradient_with_respect_to_head_and_features():
    rng = np.random.default_rng(5)
    inputs = {"w": rng.normal(size=(4, 3)), "z": rng.normal(size=(5, 4))}
    v = rng.normal(size=4)

    def build(t):
        j = ad.jvp_probe(lambda f: ad.matmul(f, t["w"]), t["z"], v, 1e-3)
        return ad.total(ad.mul(j, j))

    check_grads(build, inputs, tol=1e-5)


def test_jvp_attached_direction_receives_gradient():
    rng = np.random.default_rng(6)
    inputs = {"w": rng.normal(size=(4, 3)), "v": rng.normal(size=4)}
    z = rng.normal(size=(5, 4))

    def build(t):
        j = ad.jvp_probe(lambda f: ad.matmul(f, t["w"]), z, t["v"], 1e-3)
        return ad.total(ad.mul(j, j))

    check_grads(build, inputs, tol=1e-5)


def test_jvp_constant_direction_gets_zero_gradient():
    tape = ad.Tape()
    w = tape.leaf(np.ones((3, 2)))
    v = ad.Tensor(np.array([1.0, -1.0, 2.0]))  # constant
    loss = ad.total(ad.jvp_probe(lambda f: ad.matmul(f, w), np.ones((2, 3)), v))
    assert v.tape is None
    assert ad.backward(loss, [v])[v].tolist() == [0.0, 0.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_rows_are_distributions(a):
    s = ad.softmax(a).values
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_standardize_zero_mean_unit_scale(a):
    y = ad.standardize(a).values
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-9)
    sd = a.std(axis=0)
    live = sd > 1e-3
    np.testing.assert_allclose(y.std(axis=0)[live], (sd / (sd + 1e-5))[live], rtol=1e-9)


def test_numeric_grad_helper_on_quadratic():
    np.testing.assert_allclose(numeric_grad(lambda x: float(x @ x), np.array([1.0, -2.0])),
                               [2.0, -4.0], atol=1e-8)
