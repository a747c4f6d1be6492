"""Graph engine: forward values against numpy oracles, every backward rule
against central finite differences, and the error-handling contract."""

import numpy as np
import pytest

from raamil.autodiff import (Graph, GraphError, NonFiniteError, ShapeError,
                             backward, finite_diff_grad, forward)
from raamil.rng import stream


def rand(shape, tag="x"):
    return stream(42, "autodiff", tag).normal_array(shape)


def check_grad(build, shapes, tol=1e-6, eps=1e-6):
    """Gradient of sum(f(x...)) for each input against finite differences.

    `build` appends ops to a graph given the input nodes and returns the
    output node; the comparison normalizes by the largest finite-difference
    entry so near-zero coordinates do not amplify FD roundoff.
    """
    values = {f"x{i}": rand(s, f"in{i}") for i, s in enumerate(shapes)}
    g = Graph()
    nodes = [g.input(f"x{i}", s, requires_grad=True) for i, s in enumerate(shapes)]
    g.output("y", g.sum(build(g, *nodes)))
    forward(g, values)
    grads = backward(g, "y")
    for i, s in enumerate(shapes):
        name = f"x{i}"

        def fn(x, name=name):
            probe = dict(values)
            probe[name] = x
            return forward(g, probe)["y"]

        fd = finite_diff_grad(fn, values[name], eps=eps)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        err = float(np.max(np.abs(grads[name] - fd))) / scale
        assert err < tol, f"{name}: rel err {err}"


class TestForwardValues:
    def test_matmul_all_transpose_flags(self):
        a, b = rand((3, 4)), rand((4, 5))
        for ta in (False, True):
            for tb in (False, True):
                g = Graph()
                na = g.input("a", (a.T if ta else a).shape)
                nb = g.input("b", (b.T if tb else b).shape)
                g.output("y", g.matmul(na, nb, transpose_a=ta, transpose_b=tb))
                out = forward(g, {"a": a.T if ta else a, "b": b.T if tb else b})
                assert np.allclose(out["y"], a @ b, atol=1e-14)

    def test_elementwise_broadcasting(self):
        a, b = rand((4, 3)), rand((3,))
        g = Graph()
        na, nb = g.input("a", (4, 3)), g.input("b", (3,))
        g.output("add", g.add(na, nb))
        g.output("sub", g.sub(na, nb))
        g.output("mul", g.mul(na, nb))
        out = forward(g, {"a": a, "b": b})
        assert np.array_equal(out["add"], a + b)
        assert np.array_equal(out["sub"], a - b)
        assert np.array_equal(out["mul"], a * b)

    def test_unary_ops_match_numpy(self):
        x = rand((6,))
        g = Graph()
        n = g.input("x", (6,))
        g.output("tanh", g.tanh(n))
        g.output("sigmoid", g.sigmoid(n))
        g.output("relu", g.relu(n))
        g.output("exp", g.exp(n))
        out = forward(g, {"x": x})
        assert np.allclose(out["tanh"], np.tanh(x), atol=1e-15)
        assert np.allclose(out["sigmoid"], 1 / (1 + np.exp(-x)), atol=1e-15)
        assert np.array_equal(out["relu"], np.maximum(x, 0))
        assert np.array_equal(out["exp"], np.exp(x))

    def test_softmax_rows_sum_to_one(self):
        x = rand((5, 7)) * 10
        g = Graph()
        n = g.input("x", (5, 7))
        g.output("y", g.softmax(n, axis=-1))
        y = forward(g, {"x": x})["y"]
        assert np.max(np.abs(y.sum(axis=-1) - 1)) < 1e-12
        assert np.all(y > 0)

    def test_softmax_extreme_logits_stay_finite(self):
        """Max subtraction keeps huge logits from overflowing."""
        g = Graph()
        n = g.input("x", (3,))
        g.output("y", g.softmax(n))
        y = forward(g, {"x": np.array([1000.0, 999.0, -1000.0])})["y"]
        assert np.all(np.isfinite(y))
        assert abs(y.sum() - 1) < 1e-12

    def test_masked_softmax_zeroes_invalid_slots(self):
        mask = np.array([[True, True, False], [True, False, False]])
        g = Graph()
        n = g.input("x", (2, 3))
        g.output("y", g.softmax(n, axis=1, mask=mask))
        y = forward(g, {"x": rand((2, 3))})["y"]
        assert y[0, 2] == 0.0 and y[1, 1] == 0.0 and y[1, 2] == 0.0
        assert y[1, 0] == 1.0
        assert np.max(np.abs(y.sum(axis=1) - 1)) < 1e-12

    def test_layernorm_normalizes_last_axis(self):
        x = rand((4, 6)) * 3 + 2
        g = Graph()
        n = g.input("x", (4, 6))
        g.output("y", g.layernorm(n, g.constant(np.ones(6)), g.constant(np.zeros(6))))
        y = forward(g, {"x": x})["y"]
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-12
        assert np.max(np.abs(y.var(axis=-1) - 1)) < 1e-4  # eps-shifted variance

    def test_gather_selects_rows(self):
        x = rand((5, 3))
        idx = np.array([[0, 4], [2, 2]])
        g = Graph()
        n = g.input("x", (5, 3))
        g.output("y", g.gather(n, idx))
        y = forward(g, {"x": x})["y"]
        assert y.shape == (2, 2, 3)
        assert np.array_equal(y, x[idx])

    def test_powc_at_zero_base(self):
        """x ** c stays finite at x == 0, unlike an exp(c log x) encoding."""
        g = Graph()
        n = g.input("x", (3,))
        g.output("y", g.powc(n, 2.0))
        y = forward(g, {"x": np.array([0.0, 0.5, 2.0])})["y"]
        assert np.array_equal(y, np.array([0.0, 0.25, 4.0]))

    def test_reductions_and_reshape_and_concat(self):
        x = rand((2, 3, 4))
        g = Graph()
        n = g.input("x", (2, 3, 4))
        g.output("s", g.sum(n, axis=1))
        g.output("m", g.mean(n, axis=2, keepdims=True))
        g.output("r", g.reshape(n, (6, 4)))
        g.output("c", g.concat([n, n], axis=0))
        out = forward(g, {"x": x})
        assert np.allclose(out["s"], x.sum(axis=1), atol=1e-14)
        assert np.allclose(out["m"], x.mean(axis=2, keepdims=True), atol=1e-14)
        assert np.array_equal(out["r"], x.reshape(6, 4))
        assert np.array_equal(out["c"], np.concatenate([x, x], axis=0))

    def test_forward_is_pure(self):
        """Repeated evaluation is bitwise identical."""
        x = rand((8, 8))
        g = Graph()
        n = g.input("x", (8, 8))
        g.output("y", g.softmax(g.matmul(n, n), axis=-1))
        first = forward(g, {"x": x})["y"].copy()
        second = forward(g, {"x": x})["y"]
        assert np.array_equal(first, second)


class TestBackwardRules:
    def test_matmul_grads(self):
        for ta in (False, True):
            for tb in (False, True):
                sa = (4, 3) if ta else (3, 4)
                sb = (5, 4) if tb else (4, 5)
                check_grad(lambda g, a, b, ta=ta, tb=tb:
                           g.matmul(a, b, transpose_a=ta, transpose_b=tb), [sa, sb])

    def test_elementwise_grads_with_broadcast(self):
        check_grad(lambda g, a, b: g.add(a, b), [(4, 3), (3,)])
        check_grad(lambda g, a, b: g.sub(a, b), [(4, 3), (1, 3)])
        check_grad(lambda g, a, b: g.mul(a, b), [(4, 3), (4, 1)])
        check_grad(lambda g, a, b: g.mul(a, b), [(2, 3), (1,)])

    def test_unary_grads(self):
        check_grad(lambda g, x: g.tanh(x), [(5,)])
        check_grad(lambda g, x: g.sigmoid(x), [(5,)])
        check_grad(lambda g, x: g.exp(x), [(5,)])
        check_grad(lambda g, x: g.smul(x, -2.5), [(5,)])
        check_grad(lambda g, x: g.powc(x, 3.0), [(5,)])

    def test_relu_grad_away_from_kink(self):
        values = np.array([-2.0, -0.5, 0.5, 2.0])
        g = Graph()
        n = g.input("x", (4,), requires_grad=True)
        g.output("y", g.sum(g.relu(n)))
        forward(g, {"x": values})
        grad = backward(g, "y")["x"]
        assert np.array_equal(grad, np.array([0.0, 0.0, 1.0, 1.0]))

    def test_log_grad(self):
        values = {"x0": np.abs(rand((5,))) + 0.5}
        g = Graph()
        n = g.input("x0", (5,), requires_grad=True)
        g.output("y", g.sum(g.log(n)))
        forward(g, values)
        grad = backward(g, "y")["x0"]
        assert np.allclose(grad, 1 / values["x0"], atol=1e-12)

    def test_softmax_grad(self):
        check_grad(lambda g, x: g.mul(g.softmax(x, axis=-1),
                                      g.constant(rand((4, 6), "probe"))), [(4, 6)])

    def test_masked_softmax_grad(self):
        mask = np.array([[True, True, False, True]] * 3)
        probe = rand((3, 4), "probe2")
        check_grad(lambda g, x: g.mul(g.softmax(x, axis=1, mask=mask),
                                      g.constant(probe)), [(3, 4)])

    def test_layernorm_grads_all_three_inputs(self):
        check_grad(lambda g, x, s, b: g.mul(g.layernorm(x, s, b),
                                            g.constant(rand((4, 6), "probe3"))),
                   [(4, 6), (6,), (6,)])

    def test_reduce_reshape_concat_gather_grads(self):
        check_grad(lambda g, x: g.sum(x, axis=0), [(3, 4)])
        check_grad(lambda g, x: g.mean(x, axis=1, keepdims=True), [(3, 4)])
        check_grad(lambda g, x: g.reshape(x, (12,)), [(3, 4)])
        check_grad(lambda g, a, b: g.concat([a, b], axis=1), [(2, 3), (2, 2)])
        idx = np.array([0, 2, 2, 1])
        check_grad(lambda g, x: g.mul(g.gather(x, idx),
                                      g.constant(rand((4, 3), "probe4"))), [(3, 3)])

    def test_gather_repeated_rows_accumulate(self):
        """Scatter-add: a row gathered twice receives both gradients."""
        g = Graph()
        n = g.input("x", (3, 2), requires_grad=True)
        g.output("y", g.sum(g.gather(n, np.array([1, 1, 0]))))
        forward(g, {"x": rand((3, 2))})
        grad = backward(g, "y")["x"]
        assert np.array_equal(grad, np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]))

    def test_powc_zero_exponent_grad_is_zero(self):
        g = Graph()
        n = g.input("x", (3,), requires_grad=True)
        g.output("y", g.sum(g.powc(n, 0.0)))
        forward(g, {"x": np.array([0.0, 1.0, -2.0])})
        assert np.array_equal(backward(g, "y")["x"], np.zeros(3))

    def test_param_grads_returned_even_when_unreached(self):
        """Parameters outside the loss subtree report zero gradients."""
        g = Graph()
        used = g.param("used", np.ones(3))
        g.param("unused", np.ones(2))
        g.output("y", g.sum(used))
        forward(g, {})
        grads = backward(g, "y")
        assert np.array_equal(grads["used"], np.ones(3))
        assert np.array_equal(grads["unused"], np.zeros(2))

    def test_frozen_inputs_get_no_gradient(self):
        g = Graph()
        frozen = g.input("frozen", (3,))
        p = g.param("p", np.ones(3))
        g.output("y", g.sum(g.mul(frozen, p)))
        forward(g, {"frozen": np.arange(3.0)})
        grads = backward(g, "y")
        assert "frozen" not in grads
        assert np.array_equal(grads["p"], np.arange(3.0))

    def test_grad_accumulates_over_reused_node(self):
        """A node feeding two consumers sums both adjoints."""
        g = Graph()
        n = g.input("x", (3,), requires_grad=True)
        g.output("y", g.sum(g.add(g.mul(n, n), n)))
        forward(g, {"x": np.array([1.0, 2.0, 3.0])})
        grad = backward(g, "y")["x"]
        assert np.allclose(grad, 2 * np.array([1.0, 2.0, 3.0]) + 1, atol=1e-14)


class TestErrors:
    def test_shape_mismatch_raises_at_build_time(self):
        g = Graph()
        a = g.input("a", (3, 4))
        b = g.input("b", (3, 4))
        with pytest.raises(ShapeError):
            g.matmul(a, b)
        with pytest.raises(ShapeError):
            g.add(a, g.input("c", (5,)))
        with pytest.raises(ShapeError):
            g.reshape(a, (5, 5))
        with pytest.raises(ShapeError):
            g.gather(a, np.array([3]))

    def test_nonfinite_forward_names_node_and_index(self):
        g = Graph()
        n = g.input("x", (3,))
        g.output("y", g.log(n))
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError, match=r"log.*index"):
                forward(g, {"x": np.array([1.0, 0.0, 2.0])})

    def test_backward_before_forward_raises(self):
        g = Graph()
        n = g.input("x", (1,), requires_grad=True)
        y = g.output("y", g.sum(n))
        with pytest.raises(GraphError):
            backward(g, y)

    def test_backward_rejects_nonscalar_loss(self):
        g = Graph()
        n = g.input("x", (3,), requires_grad=True)
        y = g.output("y", g.tanh(n))
        forward(g, {"x": np.zeros(3)})
        with pytest.raises(GraphError, match="not scalar"):
            backward(g, y)

    def test_duplicate_names_rejected(self):
        g = Graph()
        g.input("x", (1,))
        g.param("p", np.ones(1))
        with pytest.raises(GraphError):
            g.input("x", (2,))
        with pytest.raises(GraphError):
            g.param("p", np.ones(2))

    def test_unbound_and_unknown_inputs_rejected(self):
        g = Graph()
        g.input("x", (1,))
        with pytest.raises(GraphError, match="unbound"):
            forward(g, {})
        with pytest.raises(GraphError, match="unknown"):
            forward(g, {"x": np.ones(1), "zz": np.ones(1)})

    def test_input_shape_checked_at_bind_time(self):
        g = Graph()
        g.input("x", (2, 2))
        g.output("y", g.nodes[0])
        with pytest.raises(ShapeError):
            forward(g, {"x": np.ones((3, 2))})

    def test_powc_negative_exponent_rejected(self):
        g = Graph()
        n = g.input("x", (1,))
        with pytest.raises(GraphError):
            g.powc(n, -1.0)

    def test_finite_diff_rejects_bad_eps_and_nonfinite_probe(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: float(x.sum()), np.ones(2), eps=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteError):
                finite_diff_grad(lambda x: float(np.log(x[0])), np.array([0.0]))
