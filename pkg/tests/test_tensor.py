import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointebm import tensor as T
from jointebm.checks import fd_gradient, rel_err
from jointebm.tensor import DimensionError, NonFiniteError, Tape, TapeError, Tensor


def grad_of(fn, *arrays_in):
    with Tape() as tape:
        ts = [tape.watch(Tensor(a)) for a in arrays_in]
        out = fn(*ts)
        return tape.gradient(out, ts)


def check_fd(fn, *arrays_in, tol=1e-7):
    grads = grad_of(fn, *arrays_in)
    for i, a in enumerate(arrays_in):
        def scalar(v, i=i):
            args = [Tensor(b) for b in arrays_in]
            args[i] = Tensor(v)
            return float(fn(*args).data)
        assert rel_err(grads[i], fd_gradient(scalar, a)) < tol


rng = np.random.default_rng(0)


@pytest.mark.parametrize("name,fn,shapes", [
    ("matmul", lambda a, b: T.sum_(T.matmul(a, b)), [(3, 4), (4, 2)]),
    ("mul", lambda a, b: T.sum_(T.mul(a, b)), [(3, 2), (3, 2)]),
    ("sub", lambda a, b: T.sum_(T.square(T.sub(a, b))), [(2, 2), (2, 2)]),
    ("bias", lambda a, b: T.sum_(T.square(T.add_bias(a, b))), [(5, 3), (3,)]),
    ("tanh", lambda a: T.sum_(T.tanh(a)), [(4, 3)]),
    ("exp", lambda a: T.sum_(T.exp(a)), [(4, 3)]),
    ("leaky", lambda a: T.sum_(T.square(T.leaky_relu(a, 0.2))), [(6, 3)]),
    ("sum_axis", lambda a: T.sum_(T.square(T.sum_(a, axis=1))), [(4, 3)]),
    ("split", lambda a: T.sum_(T.mul(*T.split(a, [2, 2]))), [(3, 4)]),
])
def test_primitive_gradients_match_finite_differences(name, fn, shapes):
    check_fd(fn, *[rng.standard_normal(s) for s in shapes])


def test_log_gradient():
    check_fd(lambda a: T.sum_(T.log(a)), rng.uniform(0.5, 2.0, size=(3, 3)))


def test_gaussian_log_density_matches_closed_form():
    x, m, lv = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    got = T.gaussian_log_density(Tensor(x), Tensor(m), Tensor(lv)).data
    ref = np.sum(-0.5 * (np.log(2 * np.pi) + lv + (x - m) ** 2 / np.exp(lv)), axis=1)
    np.testing.assert_allclose(got, ref, rtol=1e-13)
    check_fd(lambda a, b, c: T.sum_(T.gaussian_log_density(a, b, c)), x, m, lv)


def test_leaky_relu_subgradient_at_zero_is_one():
    g = grad_of(lambda a: T.sum_(T.leaky_relu(a, 0.2)), np.array([[0.0, -1.0, 2.0]]))[0]
    np.testing.assert_array_equal(g, [[1.0, 0.2, 1.0]])


def test_clamp_blocks_gradient_outside_range():
    g = grad_of(lambda a: T.sum_(T.clamp(a, -1.0, 1.0)), np.array([[-2.0, 0.5, 3.0]]))[0]
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        T.split(Tensor(np.ones((2, 3))), [1, 1])


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1e5]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_tensors_are_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_gradient_requires_scalar_output_recorded_on_tape():
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones((2, 2))))
        y = T.square(x)
        with pytest.raises(TapeError):
            tape.gradient(y, [x])
    with pytest.raises(TapeError):
        tape.gradient(T.sum_(Tensor(np.ones(2))), [x])


def test_unrelated_source_gets_zero_gradient():
    with Tape() as tape:
        a = tape.watch(Tensor(np.ones(3)))
        b = tape.watch(Tensor(np.ones(2)))
        g = tape.gradient(T.sum_(T.square(a)), [a, b])
    np.testing.assert_array_equal(g[1], np.zeros(2))


def test_reused_tensor_accumulates():
    g = grad_of(lambda a: T.sum_(T.mul(a, a)), np.array([3.0]))[0]
    np.testing.assert_allclose(g, [6.0])


def test_operations_outside_tape_are_not_recorded():
    x = Tensor(np.ones(2))
    with Tape() as tape:
        tape.watch(x)
    y = T.sum_(T.square(x))
    with pytest.raises(TapeError):
        tape.gradient(y, [x])


def test_tapes_are_thread_local():
    seen = []
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones(2)))

        def other():
            seen.append(T.sum_(T.square(x)))

        th = threading.Thread(target=other)
        th.start()
        th.join()
    with pytest.raises(TapeError):
        tape.gradient(seen[0], [x])


def test_backward_returns_root_gradients_in_watch_order():
    with Tape() as tape:
        a = tape.watch(Tensor(np.array([1.0, 2.0])))
        b = tape.watch(Tensor(np.array([3.0, 4.0])))
        out = T.sum_(T.mul(a, b))
        ga, gb = T.backward(tape, out)
    np.testing.assert_array_equal(ga, [3.0, 4.0])
    np.testing.assert_array_equal(gb, [1.0, 2.0])


def test_float32_dtype_is_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert T.tanh(T.scale(x, 2.0)).dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_sum_is_linear(a, b):
    lhs = T.sum_(T.add(Tensor(a), Tensor(b))).item()
    assert lhs == pytest.approx(T.sum_(Tensor(a)).item() + T.sum_(Tensor(b)).item(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_square_gradient_is_twice_input(a):
    np.testing.assert_allclose(grad_of(lambda t: T.sum_(T.square(t)), a)[0], 2 * a)
