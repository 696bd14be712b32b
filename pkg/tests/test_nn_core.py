import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdbench import (
    InvalidArgumentError,
    ShapeError,
    backward,
    cross_entropy,
    forward,
    init_mlp,
    make_optimizer,
    optimizer_step,
    softmax_t,
)
from cdbench.nn_core import Layer, MlpModel, log_softmax_t

from conftest import finite_difference_logits, max_relative_error


def params(model):
    return [(l.weight.copy(), l.bias.copy()) for l in model.layers]


class TestInitMlp:
    def test_same_seed_is_bit_identical(self):
        a = init_mlp(7, [2, 4, 3])
        b = init_mlp(7, [2, 4, 3])
        for (wa, ba), (wb, bb) in zip(params(a), params(b)):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)

    def test_biases_start_at_zero(self):
        model = init_mlp(7, [2, 4, 3])
        assert all(np.all(l.bias == 0.0) for l in model.layers)

    def test_fan_in_bound(self):
        model = init_mlp(3, [10, 6, 2])
        for fan_in, layer in zip([10, 6], model.layers):
            assert np.all(np.abs(layer.weight) <= np.sqrt(6.0 / fan_in))

    def test_single_entry_dims_rejected(self):
        with pytest.raises(InvalidArgumentError):
            init_mlp(0, [2])

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(InvalidArgumentError):
            init_mlp(0, [2, 0, 3])


class TestForward:
    def test_identity_network(self):
        model = MlpModel([Layer(np.eye(2), np.zeros(2))])
        logits, _ = forward(model, np.array([[1.0, 2.0]]))
        assert np.array_equal(logits, [[1.0, 2.0]])

    def test_zero_weights_give_zero_logits(self):
        model = MlpModel([Layer(np.zeros((3, 2)), np.zeros(3))])
        logits, _ = forward(model, np.random.default_rng(0).normal(size=(5, 2)))
        assert np.all(logits == 0.0)

    def test_matches_scalar_by_scalar_evaluation(self):
        model = init_mlp(11, [3, 4, 2])
        x = np.random.default_rng(1).normal(size=3)
        logits, _ = forward(model, x[None, :])
        # independent elementwise evaluation of the same network
        h = np.zeros(4)
        w0, b0 = model.layers[0].weight, model.layers[0].bias
        for i in range(4):
            acc = b0[i]
            for j in range(3):
                acc += w0[i, j] * x[j]
            h[i] = max(acc, 0.0)
        out = np.zeros(2)
        w1, b1 = model.layers[1].weight, model.layers[1].bias
        for i in range(2):
            acc = b1[i]
            for j in range(4):
                acc += w1[i, j] * h[j]
            out[i] = acc
        assert np.max(np.abs(logits[0] - out)) < 1e-12

    def test_dimension_mismatch(self):
        model = init_mlp(0, [3, 2])
        with pytest.raises(ShapeError):
            forward(model, np.zeros((1, 4)))


class TestSoftmax:
    def test_uniform_row(self):
        probs = softmax_t(np.array([[0.0, 0.0, 0.0]]), 1.0)
        assert np.allclose(probs, 1.0 / 3.0)

    def test_temperature_scaling_identity(self):
        assert np.allclose(
            softmax_t(np.array([[2.0, 0.0]]), 2.0), softmax_t(np.array([[1.0, 0.0]]), 1.0)
        )

    def test_two_class_value(self):
        probs = softmax_t(np.array([[1.0, 0.0]]), 1.0)
        assert np.allclose(probs, [[0.73106, 0.26894]], atol=1e-4)

    def test_nonpositive_temperature(self):
        with pytest.raises(InvalidArgumentError):
            softmax_t(np.zeros((1, 2)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 5),
        st.integers(2, 6),
        st.floats(0.1, 20.0),
        st.integers(0, 2**31 - 1),
    )
    def test_rows_sum_to_one_and_shift_invariance(self, rows, cols, temp, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(0, 5, size=(rows, cols))
        probs = softmax_t(z, temp)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-9)
        # strictly inside (0, 1) mathematically; saturated rows may round to 1.0
        assert np.all((probs > 0) & (probs <= 1))
        shifted = softmax_t(z + rng.normal(size=(rows, 1)), temp)
        assert np.allclose(probs, shifted, atol=1e-9)
        assert np.allclose(probs, softmax_t(z / temp, 1.0), atol=1e-12)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
        assert abs(loss - np.log(2)) < 1e-12

    def test_confident_correct_prediction(self):
        loss, _ = cross_entropy(np.array([[1e3, 0.0, 0.0]]), np.array([0]))
        assert loss < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        _, analytic = cross_entropy(logits, labels)
        numeric = finite_difference_logits(lambda z: cross_entropy(z, labels)[0], logits)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_out_of_range_label(self):
        with pytest.raises(InvalidArgumentError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestBackward:
    def test_zero_dlogits_give_zero_grads(self):
        model = init_mlp(5, [3, 4, 2])
        x = np.random.default_rng(0).normal(size=(6, 3))
        _, cache = forward(model, x)
        grads = backward(model, cache, np.zeros((6, 2)))
        assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)

    def test_linear_model_closed_form(self):
        model = MlpModel([Layer(np.random.default_rng(1).normal(size=(3, 4)), np.zeros(3))])
        x = np.random.default_rng(2).normal(size=(5, 4))
        _, cache = forward(model, x)
        dlogits = np.random.default_rng(3).normal(size=(5, 3))
        (dw, db), = backward(model, cache, dlogits)
        assert np.allclose(dw, dlogits.T @ x, atol=1e-12)
        assert np.allclose(db, dlogits.sum(axis=0), atol=1e-12)

    def test_two_layer_finite_differences(self):
        rng = np.random.default_rng(4)
        model = init_mlp(9, [3, 5, 4])
        x = rng.normal(size=(4, 3))
        labels = rng.integers(0, 4, size=4)

        def loss_at(model_):
            logits, _ = forward(model_, x)
            return cross_entropy(logits, labels)[0]

        logits, cache = forward(model, x)
        _, dlogits = cross_entropy(logits, labels)
        grads = backward(model, cache, dlogits)

        h = 1e-5
        for k, layer in enumerate(model.layers):
            for arr, grad in ((layer.weight, grads[k][0]), (layer.bias, grads[k][1])):
                it = np.nditer(arr, flags=["multi_index"])
                numeric = np.zeros_like(arr)
                for _ in it:
                    idx = it.multi_index
                    old = arr[idx]
                    arr[idx] = old + h
                    up = loss_at(model)
                    arr[idx] = old - h
                    down = loss_at(model)
                    arr[idx] = old
                    numeric[idx] = (up - down) / (2 * h)
                assert max_relative_error(grad, numeric) < 1e-4

    def test_shape_mismatch(self):
        model = init_mlp(5, [3, 4, 2])
        _, cache = forward(model, np.zeros((6, 3)))
        with pytest.raises(ShapeError):
            backward(model, cache, np.zeros((6, 3)))


class TestOptimizer:
    def test_sgd_direct_substitution(self):
        model = MlpModel([Layer(np.array([[1.0]]), np.zeros(1))])
        state = make_optimizer(model, "sgd", 0.1)
        optimizer_step(model, [(np.array([[2.0]]), np.zeros(1))], state)
        assert np.allclose(model.layers[0].weight, 0.8)

    def test_sgd_zero_gradient_is_noop(self):
        model = init_mlp(2, [3, 2])
        before = params(model)
        state = make_optimizer(model, "sgd", 0.5)
        optimizer_step(model, [(np.zeros((2, 3)), np.zeros(2))], state)
        for (wb, bb), layer in zip(before, model.layers):
            assert np.array_equal(wb, layer.weight) and np.array_equal(bb, layer.bias)

    def test_adam_first_step_magnitude(self):
        # First Adam step with constant gradient g moves by ~lr regardless of |g|.
        for g in (1e-3, 1.0, 1e3):
            model = MlpModel([Layer(np.array([[0.0]]), np.zeros(1))])
            state = make_optimizer(model, "adam", 0.01)
            optimizer_step(model, [(np.array([[g]]), np.zeros(1))], state)
            assert abs(abs(model.layers[0].weight[0, 0]) - 0.01) < 1e-5
        assert state.step == 1

    def test_moments_exist_iff_adam(self):
        model = init_mlp(0, [2, 2])
        assert make_optimizer(model, "sgd", 0.1).moment1 is None
        assert make_optimizer(model, "adam", 0.1).moment1 is not None

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            make_optimizer(init_mlp(0, [2, 2]), "rmsprop", 0.1)

    def test_gradient_shape_mismatch(self):
        model = init_mlp(0, [2, 2])
        state = make_optimizer(model, "sgd", 0.1)
        with pytest.raises(ShapeError):
            optimizer_step(model, [(np.zeros((3, 2)), np.zeros(3))], state)


def test_log_softmax_consistency():
    z = np.random.default_rng(5).normal(0, 4, size=(3, 5))
    assert np.allclose(np.exp(log_softmax_t(z, 2.0)), softmax_t(z, 2.0), atol=1e-12)


def test_training_step_determinism():
    losses = []
    finals = []
    for _ in range(2):
        model = init_mlp(13, [4, 8, 3])
        state = make_optimizer(model, "adam", 1e-3)
        rng = np.random.default_rng(42)
        x = rng.normal(size=(16, 4))
        y = rng.integers(0, 3, size=16)
        run = []
        for _ in range(10):
            logits, cache = forward(model, x)
            loss, dlogits = cross_entropy(logits, y)
            run.append(loss)
            optimizer_step(model, backward(model, cache, dlogits), state)
        losses.append(run)
        finals.append(params(model))
    assert losses[0] == losses[1]
    for (wa, ba), (wb, bb) in zip(finals[0], finals[1]):
        assert np.array_equal(wa, wb) and np.array_equal(ba, bb)
