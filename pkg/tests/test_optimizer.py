import numpy as np

from raceimpute.lstm import AdamState, adam_step


def make_params(value=1.0):
    return {"w": np.array([value])}


def test_zero_gradients_are_a_fixed_point():
    params = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
    state = AdamState.for_params(params)
    before = {k: v.copy() for k, v in params.items()}
    adam_step(params, state, {k: np.zeros_like(v) for k, v in params.items()}, learning_rate=0.1)
    for k in params:
        assert np.array_equal(params[k], before[k])
    assert state.t == 1


def test_first_step_hand_computed():
    # bias-corrected first step: m_hat = g, v_hat = g^2,
    # step = lr * g / (|g| + eps)
    g, lr = 0.5, 0.1
    params = make_params(1.0)
    state = AdamState.for_params(params)
    adam_step(params, state, {"w": np.array([g])}, learning_rate=lr)
    m = 0.1 * g
    v = 0.001 * g * g
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.999)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(params["w"][0] - expected) < 1e-15
    # magnitude is ~lr regardless of gradient scale
    assert abs(abs(1.0 - params["w"][0]) - lr) < 1e-7


def test_first_step_direction_follows_sign():
    for g in (3.0, -0.02, 1e-4):
        params = make_params(0.0)
        state = AdamState.for_params(params)
        adam_step(params, state, {"w": np.array([g])}, learning_rate=0.05)
        assert np.sign(params["w"][0]) == -np.sign(g)


def test_scalar_quadratic_monotone_decrease():
    # scripted 1-D oracle: f(x) = x^2, gradient 2x
    params = make_params(1.0)
    state = AdamState.for_params(params)
    losses = [params["w"][0] ** 2]
    for _ in range(5):
        grad = {"w": 2.0 * params["w"]}
        adam_step(params, state, grad, learning_rate=0.05)
        losses.append(params["w"][0] ** 2)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_step_counter_and_bias_correction_decay():
    # two identical gradients: second step differs from first only through
    # moment accumulation; both move the same direction
    params = make_params(1.0)
    state = AdamState.for_params(params)
    adam_step(params, state, {"w": np.array([1.0])}, learning_rate=0.1)
    first = 1.0 - params["w"][0]
    adam_step(params, state, {"w": np.array([1.0])}, learning_rate=0.1)
    second = (1.0 - first) - params["w"][0]
    assert state.t == 2
    assert first > 0 and second > 0
