import numpy as np
import pytest

from src.numcore import (
    EmptyAttentionRowError, OptimizerState, Tensor, adam_step, clip_grad_norm, cross_entropy,
    finite_difference_check, gelu, layer_norm, masked_softmax, no_grad, precision,
)


def test_precision_context_restores_default():
    with precision('float64'):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_backward_through_matmul_and_sum(double):
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[1.0], [-1.0]], requires_grad=True)
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, [[1.0, -1.0], [1.0, -1.0]])
    np.testing.assert_allclose(b.grad, [[4.0], [6.0]])


def test_repeated_index_accumulates_gradient(double):
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    table[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_allclose(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    y.backward()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_masked_softmax_zeroes_forbidden_entries(double):
    logits = np.array([[1.0, 50.0, 2.0], [0.5, 0.5, 0.5]])
    mask = np.array([[True, False, True], [False, True, False]])
    probs = masked_softmax(logits, mask).data
    assert probs[0, 1] == 0.0
    assert probs[1, 0] == 0.0 and probs[1, 2] == 0.0
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    np.testing.assert_allclose(probs[1, 1], 1.0)


def test_masked_softmax_worked_example(double):
    probs = masked_softmax(np.array([2.0, 0.0]), np.array([True, True])).data
    np.testing.assert_allclose(probs, [0.88080, 0.11920], atol=1e-5)


def test_layer_norm_worked_examples(double):
    out = layer_norm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out, [-1.22474, 0.0, 1.22474], atol=1e-4)
    flat = layer_norm(np.array([5.0, 5.0]), np.ones(2), np.zeros(2)).data
    np.testing.assert_array_equal(flat, [0.0, 0.0])


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(EmptyAttentionRowError):
        masked_softmax(np.zeros((2, 2)), np.array([[True, False], [False, False]]))


def test_cross_entropy_uniform_logits(double):
    loss = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
    assert loss.item() == pytest.approx(np.log(10))


def test_cross_entropy_worked_example(double):
    loss = cross_entropy(np.array([[1.0, 0.0]]), np.array([0]))
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)


def test_cross_entropy_rejects_unknown_target():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 5)), np.array([1, 5]))


def test_gradient_check_of_primitives(double):
    rng = np.random.default_rng(3)
    params = {
        'x': Tensor(rng.normal(size=(3, 6)), requires_grad=True),
        'gamma': Tensor(rng.normal(size=6), requires_grad=True),
        'beta': Tensor(rng.normal(size=6), requires_grad=True),
        'w': Tensor(rng.normal(size=(6, 5)), requires_grad=True),
    }
    allow = np.tril(np.ones((3, 3), dtype=bool))
    targets = np.array([1, 4, 0])

    def loss():
        h = gelu(layer_norm(params['x'], params['gamma'], params['beta']))
        scores = h @ h.transpose(1, 0)
        mixed = masked_softmax(scores, allow) @ h
        return cross_entropy(mixed @ params['w'], targets)

    result = finite_difference_check(loss, params, samples_per_tensor=6)
    assert result.passed, result


def test_gradient_check_rejects_bad_step_size(double):
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        finite_difference_check(lambda: (x * x).sum(), {'x': x}, h=1e-2)


def test_adam_moves_against_gradient(double):
    params = {'w': Tensor([1.0, -1.0], requires_grad=True)}
    state = adam_step(params, {'w': np.array([0.5, -0.5])}, OptimizerState(lr=0.1))
    np.testing.assert_allclose(params['w'].data, [0.9, -0.9])
    assert state.step == 1


def test_adam_zero_gradient_leaves_params(double):
    params = {'w': Tensor([1.0, -2.0], requires_grad=True)}
    adam_step(params, {'w': np.zeros(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(params['w'].data, [1.0, -2.0])


@pytest.mark.parametrize('grad', [1e-3, 0.7, 250.0])
def test_adam_first_step_is_about_lr(grad, double):
    params = {'w': Tensor([0.0], requires_grad=True)}
    adam_step(params, {'w': np.array([grad])}, OptimizerState(lr=0.01))
    assert -params['w'].data[0] == pytest.approx(0.01, rel=0.05)


def test_adam_descends_a_parabola(double):
    params = {'w': Tensor([1.0], requires_grad=True)}
    state = OptimizerState(lr=0.1)
    trace = []
    for _ in range(2):
        adam_step(params, {'w': 2.0 * params['w'].data}, state)
        trace.append(float(params['w'].data[0]))
    assert trace == pytest.approx([0.9, 0.8004], abs=1e-4)


def test_adam_is_deterministic(double):
    def run():
        params = {'w': Tensor(np.linspace(-1.0, 1.0, 5), requires_grad=True)}
        state = OptimizerState(lr=0.05)
        for step in range(4):
            adam_step(params, {'w': np.sin(params['w'].data * (step + 1))}, state)
        return params['w'].data

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_nan_gradient():
    params = {'w': Tensor([1.0], requires_grad=True)}
    with pytest.raises(ValueError, match="NaN"):
        adam_step(params, {'w': np.array([np.nan], dtype=np.float32)}, OptimizerState())


def test_clip_grad_norm_scales_to_limit():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0]), 'c': None}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(grads['a'] ** 2 + grads['b'] ** 2)[0] == pytest.approx(1.0)
