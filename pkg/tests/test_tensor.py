import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from octoutcome.gradcheck import gradcheck
from octoutcome.tensor import ShapeError, Tensor, no_grad, is_grad_enabled


def test_backward_accumulates_into_leaves():
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = (a * a).sum() + a.sum()
    y.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)
    # a second backward adds to the existing gradient
    ((a * 3.0).sum()).backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 4)


def test_shared_subexpression_gets_both_paths():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = a * a
    (b * b + b).backward()
    # d/da (a^4 + a^2) = 4a^3 + 2a
    assert a.grad == pytest.approx(4 * 8 + 4)


def test_broadcast_gradient_is_reduced_to_parameter_shape():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ((x + b) * Tensor(np.arange(12.0).reshape(4, 3))).sum().backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, np.arange(12.0).reshape(4, 3).sum(axis=0))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = (a * 2).sum()
    assert is_grad_enabled()
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_nonscalar_backward_needs_seed_of_same_shape():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    y = a * 2
    with pytest.raises(RuntimeError):
        y.backward()
    with pytest.raises(ShapeError):
        y.backward(np.ones(3))
    y.backward(np.ones((2, 2)))
    np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))


def test_integer_input_is_promoted_to_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_gradcheck_on_linear_function_is_exact():
    w = np.random.default_rng(0).standard_normal(20)
    r = gradcheck(lambda x: (x * Tensor(w)).sum(), [np.random.default_rng(1).standard_normal(20)])
    assert r.max_rel_error <= 1e-9
    assert r.n_compared == 20


def test_gradcheck_flags_a_wrong_gradient():
    from octoutcome.tensor import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * 3 * x.data,))

    r = gradcheck(lambda x: bad_square(x).sum(), [np.linspace(0.5, 2.0, 10)])
    assert not r.passed(min_compared=1)


def test_gradcheck_reports_non_finite_output():
    from octoutcome.tensor import log

    r = gradcheck(lambda x: log(x).sum(), [np.array([-1.0, 1.0])])
    assert not r.finite and not r.passed()


elementwise = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                         elements=st.floats(0.5, 3.0))


@settings(max_examples=60, deadline=None)
@given(elementwise, st.sampled_from(["mul", "div", "pow", "exp", "log", "sqrt", "sub", "mean"]))
def test_elementwise_ops_match_finite_differences(x, op):
    from octoutcome import tensor as T

    fns = {
        "mul": lambda a: (a * a * 1.5).sum(),
        "div": lambda a: (1.0 / (a + 1.0)).sum(),
        "pow": lambda a: (a ** 2.5).sum(),
        "exp": lambda a: T.exp(a * 0.5).sum(),
        "log": lambda a: T.log(a).sum(),
        "sqrt": lambda a: T.sqrt(a).sum(),
        "sub": lambda a: ((3.0 - a) * a).sum(),
        "mean": lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum(),
    }
    assert gradcheck(fns[op], [x]).passed(min_compared=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_and_concat_gradients(n, k, m):
    from octoutcome.tensor import concat

    rng = np.random.default_rng(n * 100 + k * 10 + m)
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    assert gradcheck(lambda a, b: ((a @ b) ** 2).sum(), [a, b]).passed(min_compared=1)
    assert gradcheck(lambda a, b: (concat([a, b.reshape(m, k)], axis=0) ** 2).sum(), [a, b]).passed(min_compared=1)
