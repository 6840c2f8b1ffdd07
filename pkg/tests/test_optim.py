import numpy as np
import pytest

from ctxmod.errors import TapeError
from ctxmod.optim import Adam, AdamState, adam_step
from ctxmod.tensor import Tensor, backward, tsum


def reference_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written out step by step (independent oracle)."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def test_first_step_closed_form():
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([1.0])}, AdamState())
    # m_hat = 1, v_hat = 1: step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_matches_reference_trajectory(rng):
    grads = rng.normal(size=25)
    p = Tensor(np.array([0.2]), requires_grad=True)
    st = AdamState(lr=0.01)
    ref = reference_adam(0.2, grads, lr=0.01)
    for g, r in zip(grads, ref):
        adam_step({"p": p}, {"p": np.array([g])}, st)
        assert p.data[0] == pytest.approx(r, rel=1e-12, abs=1e-15)
    assert st.t == 25


def test_zero_grad_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.t == 1


def test_frozen_and_masked_entries_do_not_move():
    frozen = Tensor(np.ones(3), requires_grad=False)
    masked = Tensor(np.ones(4), requires_grad=True)
    mask = np.array([True, False, True, False])
    adam_step({"f": frozen, "m": masked}, {"m": np.ones(4)}, AdamState(), {"m": mask})
    np.testing.assert_array_equal(frozen.data, 1.0)
    assert masked.data[1] == 1.0 and masked.data[3] == 1.0
    assert masked.data[0] < 1.0 and masked.data[2] < 1.0


def test_missing_grad_is_an_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(TapeError):
        adam_step({"p": p}, {}, AdamState())


def test_adam_class_is_deterministic(rng):
    x0 = rng.normal(size=5)
    results = []
    for _ in range(2):
        w = Tensor(np.zeros(5), requires_grad=True)
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(30):
            opt.zero_grad()
            backward(tsum((w - Tensor(x0)) * (w - Tensor(x0))))
            opt.step()
        results.append(w.data.copy())
    np.testing.assert_array_equal(results[0], results[1])
    assert np.abs(results[0] - x0).max() < np.abs(x0).max()
