import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from octoutcome.optim import Adam, AdamState, adam_step
from octoutcome.tensor import Tensor


def hand_adam(grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    """Scalar Adam written out step by step, like a spreadsheet."""
    m = v = 0.0
    trajectory = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (v_hat ** 0.5 + eps)
        trajectory.append(p)
    return trajectory


def test_single_step_is_minus_lr():
    p = np.zeros(1)
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.ones(1)])
    # bias-corrected m and v are both exactly 1
    assert p[0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-16)


def test_three_steps_match_scalar_recurrence():
    p = np.zeros(1)
    state = AdamState.for_params([p])
    want = hand_adam([1.0, 1.0, 1.0])
    for t in range(3):
        adam_step(state, [p], [np.ones(1)])
        assert abs(p[0] - want[t]) <= 1e-10
    assert state.step_count == 3


def test_varying_gradients_match_recurrence():
    grads = [0.3, -1.2, 2.5, 0.0, 0.7]
    p = np.array([0.5])
    state = AdamState.for_params([p], lr=0.01)
    for g in grads:
        adam_step(state, [p], [np.array([g])])
    assert p[0] == pytest.approx(hand_adam(grads, lr=0.01, p=0.5)[-1], abs=1e-12)


def test_missing_gradient_is_rejected():
    w = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([w])
    with pytest.raises(ValueError, match="missing gradient"):
        opt.step()


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)),
       st.integers(0, 20), st.integers(0, 1000))
def test_zero_gradient_is_identity_from_zero_moments(p0, warmup_steps, seed):
    """With zero moments (fresh state or after zero-gradient steps) a zero gradient changes nothing."""
    p = p0.copy()
    state = AdamState.for_params([p])
    for _ in range(warmup_steps):
        adam_step(state, [p], [np.zeros_like(p)])
    np.testing.assert_array_equal(p, p0)
    assert state.step_count == warmup_steps


def test_zero_gradient_with_nonzero_moment_still_moves():
    """Adam's momentum keeps moving a parameter after the gradient vanishes.

    Identity under zero gradients therefore holds only while the first moment is zero.
    """
    p = np.zeros(1)
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.ones(1)])
    before = p.copy()
    adam_step(state, [p], [np.zeros(1)])
    assert p[0] < before[0]


def test_moments_have_parameter_sizes_and_step_increments_by_one():
    params = [np.zeros((2, 3)), np.zeros(4)]
    state = AdamState.for_params(params)
    assert [m.size for m in state.first_moment] == [6, 4]
    assert [v.size for v in state.second_moment] == [6, 4]
    adam_step(state, params, [np.ones((2, 3)), np.ones(4)])
    assert state.step_count == 1
