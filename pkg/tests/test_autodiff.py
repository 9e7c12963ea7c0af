import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowcast import autodiff as ad
from helpers import GRAD_TOL, away_from_zero, check_grads, rel_error


def grad_of(fn, *values):
    leaves = [ad.Tensor(v, requires_grad=True) for v in values]
    with ad.Tape() as tape:
        out = fn(*leaves)
    ad.backward(tape, out)
    return [leaf.grad for leaf in leaves]


def test_square_derivative():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == pytest.approx(6.0)


def test_sigmoid_slope_at_zero():
    (g,) = grad_of(ad.sigmoid, 0.0)
    assert g == pytest.approx(0.25)


def test_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    A, B, C = (ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(3))
    err = check_grads(lambda: ((A @ B) @ C).tanh().sum(), [A, B, C], h=1e-5)
    assert err <= GRAD_TOL


def test_reused_tensor_accumulates():
    # x feeds three paths; d/dx (x*x + 2x + x) = 2x + 3
    (g,) = grad_of(lambda x: (x * x + x * 2.0 + x).sum(), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [5.0, -1.0])


def test_broadcast_gradient_is_summed():
    gx, gb = grad_of(lambda x, b: (x + b).sum(), np.ones((4, 3)), np.zeros(3))
    np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])
    np.testing.assert_array_equal(gx, np.ones((4, 3)))


def test_nothing_recorded_outside_tape():
    x = ad.Tensor(2.0, requires_grad=True)
    y = x * x
    assert y.is_leaf
    with ad.Tape() as tape:
        y = x * x
    assert len(tape) == 1 and not y.is_leaf


def test_constants_are_not_recorded():
    with ad.Tape() as tape:
        ad.Tensor(np.ones(3)).tanh()
    assert len(tape) == 0


def test_backward_rejects_non_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_backward_rejects_non_finite_loss():
    x = ad.Tensor(1e200, requires_grad=True)
    with ad.Tape() as tape:
        y = x * x
    with pytest.raises(ad.NonFiniteError):
        ad.backward(tape, y)


def test_invalid_operation_raises_inside_tape():
    x = ad.Tensor(0.0, requires_grad=True)
    with ad.Tape(), pytest.raises(FloatingPointError):
        ad.reciprocal(x)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((2, 3))) @ ad.Tensor(np.ones((2, 3)))


def test_unstack_slices_route_gradients_back():
    x = ad.Tensor(np.arange(12.0).reshape(2, 3, 2), requires_grad=True)
    with ad.Tape() as tape:
        parts = ad.unstack(x, axis=1)
        loss = (parts[0] * 1.0 + parts[2] * 3.0).sum()
    ad.backward(tape, loss)
    expected = np.zeros((2, 3, 2))
    expected[:, 0] = 1.0
    expected[:, 2] = 3.0
    np.testing.assert_array_equal(x.grad, expected)


def test_relu_and_abs_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda x: ad.relu(x).sum() + ad.absolute(x).sum(), np.zeros(3))
    np.testing.assert_array_equal(g, np.zeros(3))


# --- losses -----------------------------------------------------------------------
def test_mse_identity_case():
    assert ad.compute_loss("mse", ad.Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0


def test_mae_example():
    assert ad.compute_loss("mae", ad.Tensor([0.0, 2.0]), [1.0, 1.0]).item() == pytest.approx(1.0)


def test_huber_quadratic_branch():
    assert ad.compute_loss("huber", ad.Tensor([0.5]), [0.0]).item() == pytest.approx(0.125)


def test_huber_linear_branch():
    # delta (|r| - delta / 2) with r = 3, delta = 1
    assert ad.compute_loss("huber", ad.Tensor([3.0]), [0.0]).item() == pytest.approx(2.5)


def test_mae_gradient_zero_at_zero_residual():
    (g,) = grad_of(lambda p: ad.compute_loss("mae", p, np.array([1.0, 0.0])), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.5])


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        ad.compute_loss("mse", ad.Tensor(np.ones(3)), np.ones(2))


def test_huber_delta_must_be_positive():
    with pytest.raises(ValueError):
        ad.compute_loss("huber", ad.Tensor(np.ones(2)), np.zeros(2), delta=0.0)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.data())
def test_losses_are_permutation_invariant_and_non_negative(pred, data):
    target = data.draw(arrays(np.float64, pred.shape, elements=finite))
    perm = data.draw(st.permutations(range(pred.size)))
    for kind in ad.LossKind:
        a = ad.compute_loss(kind, ad.Tensor(pred), target).item()
        b = ad.compute_loss(kind, ad.Tensor(pred[perm]), target[perm]).item()
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.data())
def test_rmse_is_sqrt_of_mse(pred, data):
    target = data.draw(arrays(np.float64, pred.shape, elements=finite))
    mse = ad.compute_loss("mse", ad.Tensor(pred), target).item()
    assert np.sqrt(mse) == np.sqrt(np.mean((pred - target) ** 2))


@pytest.mark.parametrize("kind", list(ad.LossKind))
def test_loss_gradients(kind):
    rng = np.random.default_rng(3)
    pred = ad.Tensor(away_from_zero(rng, (4, 3)) * 2, requires_grad=True)
    target = np.zeros((4, 3))
    assert check_grads(lambda: ad.compute_loss(kind, pred, target), [pred]) <= GRAD_TOL


# --- Adam -------------------------------------------------------------------------
def test_adam_first_step_has_magnitude_lr():
    for g in (3.7, -0.01):
        p = np.array([1.0])
        ad.adam_step([p], [np.array([g])], ad.AdamState())
        assert abs(p[0] - 1.0) == pytest.approx(1e-3, rel=1e-4)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, 2.0])
    st_ = ad.adam_step([p], [np.zeros(2)], ad.AdamState())
    np.testing.assert_array_equal(p, [1.0, 2.0])
    assert st_.t == 1


def test_adam_matches_hand_unrolled_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = np.array([0.0])
    state = ad.AdamState(lr=lr)
    m = v = 0.0
    expected = 0.0
    for t in (1, 2):
        ad.adam_step([p], [np.array([1.0])], state)
        m = b1 * m + (1 - b1)
        v = b2 * v + (1 - b2)
        expected -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p[0] == pytest.approx(expected, abs=1e-15)
    assert p[0] == pytest.approx(-0.2, abs=1e-6)


def test_adam_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    grads = [rng.normal(size=(3, 2)) for _ in range(4)]
    runs = []
    for _ in range(2):
        p = np.ones((3, 2))
        s = ad.AdamState()
        for g in grads:
            ad.adam_step([p], [g], s)
        runs.append(p.tobytes())
    assert runs[0] == runs[1]


def test_adam_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ad.adam_step([np.ones(2)], [np.ones(3)], ad.AdamState())
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step([np.ones(2)], [np.array([1.0, np.nan])], ad.AdamState())


def test_adam_wrapper_reads_grads():
    x = ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.5)
    with ad.Tape() as tape:
        loss = (x * x).sum()
    ad.backward(tape, loss)
    opt.step()
    opt.zero_grad()
    np.testing.assert_allclose(x.data, [0.5, -0.5])
    assert x.grad is None


def test_rel_error_helper():
    assert rel_error(np.array([1.0]), np.array([1.0])) == 0.0
