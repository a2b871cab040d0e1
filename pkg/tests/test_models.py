"""Model core: forward, per-example backprop vs finite differences, updates."""

import numpy as np
import pytest

from dpcollab.data import Batch
from dpcollab.errors import ConfigurationError
from dpcollab.models import (
    MlpModel,
    accuracy,
    apply_update,
    checkpoint_dumps,
    checkpoint_loads,
    finite_difference_gradient,
    flatten_params,
    forward,
    init_mlp,
    load_checkpoint,
    loss_and_grad_per_example,
    mean_loss,
    parameter_count,
    save_checkpoint,
    unflatten_params,
)


def _model(dims, weights, biases):
    return MlpModel(
        layer_dims=tuple(dims),
        weights=[np.array(w, dtype=np.float64) for w in weights],
        biases=[np.array(b, dtype=np.float64) for b in biases],
    )


def _perturbed(dims, seed):
    """Random small net with non-zero biases (init gives zero biases)."""
    rng = np.random.default_rng(seed)
    model = init_mlp(dims, seed)
    flat = flatten_params(model) + 0.1 * rng.normal(size=model.parameter_count)
    return unflatten_params(dims, flat), rng


class TestForward:
    def test_identity_single_layer(self):
        model = _model((2, 2), [np.eye(2)], [[0.0, 0.0]])
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        batch = Batch(x, [0, 1])
        assert np.array_equal(forward(model, batch), x)

    def test_zero_weights_give_zero_logits(self):
        model = _model((3, 2), [np.zeros((2, 3))], [[0.0, 0.0]])
        batch = Batch(np.random.default_rng(0).normal(size=(4, 3)), [0, 1, 0, 1])
        assert np.array_equal(forward(model, batch), np.zeros((4, 2)))

    def test_two_layer_relu_hand_computation(self):
        # x=(1,2): z1 = (1*1-1*2, 2*1+0.5*2) = (-1, 3) -> relu (0, 3)
        # z2 = (0.5*0+1*3+0.25, -1*0+2*3+1) = (3.25, 7)
        model = _model(
            (2, 2, 2),
            [[[1.0, -1.0], [2.0, 0.5]], [[0.5, 1.0], [-1.0, 2.0]]],
            [[0.0, 0.0], [0.25, 1.0]],
        )
        batch = Batch([[1.0, 2.0]], [0])
        np.testing.assert_allclose(forward(model, batch), [[3.25, 7.0]], rtol=0, atol=0)

    def test_shape_mismatch_is_config_error(self):
        model = init_mlp((4, 2), 0)
        with pytest.raises(ConfigurationError):
            forward(model, Batch(np.zeros((1, 3)), [0]))

    def test_forward_is_pure(self):
        model, rng = _perturbed((5, 4, 3), 1)
        batch = Batch(rng.normal(size=(6, 5)), rng.integers(0, 3, size=6))
        first = forward(model, batch)
        again = forward(model, batch)
        assert first.tobytes() == again.tobytes()


class TestPerExampleGradients:
    def test_single_example_matches_batch_gradient(self):
        model, rng = _perturbed((4, 3, 2), 2)
        batch = Batch(rng.normal(size=(1, 4)), [1])
        loss, grads = loss_and_grad_per_example(model, batch)
        assert len(grads) == 1
        assert loss == pytest.approx(mean_loss(model, batch), abs=1e-12)

    def test_sum_linearity(self):
        # Mean of per-example grads equals the gradient of the mean loss,
        # with the latter assembled from independent single-example calls.
        model, rng = _perturbed((4, 3, 2), 3)
        batch = Batch(rng.normal(size=(7, 4)), rng.integers(0, 2, size=7))
        _, grads = loss_and_grad_per_example(model, batch)
        mean_of_grads = np.mean(grads, axis=0)

        mean_grad = np.zeros(model.parameter_count)
        for j in range(len(batch)):
            _, gj = loss_and_grad_per_example(model, batch.take([j]))
            mean_grad += gj[0] / len(batch)
        np.testing.assert_allclose(mean_of_grads, mean_grad, atol=1e-12, rtol=0)
        np.testing.assert_allclose(
            np.sum(grads, axis=0), len(batch) * mean_grad, atol=1e-10, rtol=0
        )

    @pytest.mark.parametrize("seed", range(20))
    def test_backprop_matches_finite_differences(self, seed):
        model, rng = _perturbed((4, 3, 2), seed)
        batch = Batch(rng.normal(size=(5, 4)), rng.integers(0, 2, size=5))
        _, grads = loss_and_grad_per_example(model, batch)
        for j in range(len(batch)):
            fd = finite_difference_gradient(model, batch.take([j]), 1e-5)
            rel = np.linalg.norm(grads[j] - fd) / np.linalg.norm(fd)
            assert rel < 1e-5

    def test_bad_labels_rejected(self):
        model = init_mlp((3, 2), 0)
        with pytest.raises(ConfigurationError):
            loss_and_grad_per_example(model, Batch(np.zeros((1, 3)), [5]))


class TestFiniteDifferences:
    def test_quadratic_like_net_matches_analytic(self):
        # Single linear layer, one example: d loss / d w_kj = (p_k - 1{k=y}) x_j.
        model = _model((2, 2), [[[0.2, -0.4], [0.1, 0.3]]], [[0.05, -0.02]])
        x = np.array([0.7, -1.1])
        batch = Batch([x], [1])
        logits = forward(model, batch)[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p[1] -= 1.0
        analytic = np.concatenate([np.outer(p, x).ravel(), p])
        fd = finite_difference_gradient(model, batch, 1e-5)
        np.testing.assert_allclose(fd, analytic, atol=1e-9)

    def test_step_must_be_positive(self):
        model = init_mlp((2, 2), 0)
        with pytest.raises(ConfigurationError):
            finite_difference_gradient(model, Batch([[0.0, 0.0]], [0]), 0.0)

    def test_error_shrinks_with_step(self):
        model, rng = _perturbed((3, 3, 2), 9)
        batch = Batch(rng.normal(size=(1, 3)), [1])
        _, grads = loss_and_grad_per_example(model, batch)
        err = lambda h: np.linalg.norm(finite_difference_gradient(model, batch, h) - grads[0])
        assert err(1e-3) > err(1e-5)


class TestApplyUpdate:
    def test_zero_learning_rate_is_identity(self):
        model, rng = _perturbed((3, 2), 4)
        out = apply_update(model, rng.normal(size=model.parameter_count), 0.0, 4)
        assert np.array_equal(flatten_params(out), flatten_params(model))

    def test_zero_aggregate_is_identity(self):
        model, _ = _perturbed((3, 2), 5)
        out = apply_update(model, np.zeros(model.parameter_count), 0.7, 3)
        assert np.array_equal(flatten_params(out), flatten_params(model))

    def test_direct_arithmetic(self):
        # eta=0.5, |X|=2, aggregate=(2,4), theta=(1,1) -> (0.5, 0)
        model = _model((1, 1), [[[1.0]]], [[1.0]])
        out = apply_update(model, np.array([2.0, 4.0]), 0.5, 2)
        np.testing.assert_allclose(flatten_params(out), [0.5, 0.0], atol=0)

    def test_input_model_unchanged(self):
        model, _ = _perturbed((3, 2), 6)
        before = flatten_params(model).copy()
        apply_update(model, np.ones(model.parameter_count), 0.5, 1)
        assert np.array_equal(flatten_params(model), before)

    def test_dim_mismatch(self):
        model = init_mlp((3, 2), 0)
        with pytest.raises(ConfigurationError):
            apply_update(model, np.zeros(5), 0.1, 1)


class TestFlattening:
    @pytest.mark.parametrize("dims", [(2, 2), (4, 3, 2), (5, 7, 6, 3)])
    def test_round_trip_exact(self, dims):
        rng = np.random.default_rng(hash(dims) % 2**32)
        flat = rng.normal(size=parameter_count(dims))
        again = flatten_params(unflatten_params(dims, flat))
        assert np.array_equal(again, flat)

    def test_declared_order(self):
        # Layer 0 weights row-major, layer 0 bias, then layer 1.
        model = _model((2, 1, 1), [[[1.0, 2.0]], [[4.0]]], [[3.0], [5.0]])
        np.testing.assert_array_equal(flatten_params(model), [1, 2, 3, 4, 5])

    def test_parameter_count_matches(self):
        model = init_mlp((7, 5, 3), 0)
        assert model.parameter_count == parameter_count((7, 5, 3)) == flatten_params(model).size


class TestCheckpoints:
    def test_round_trip_file(self, tmp_path):
        model, _ = _perturbed((4, 3, 2), 8)
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path)
        again = load_checkpoint(path)
        assert np.array_equal(flatten_params(again), flatten_params(model))
        assert again.layer_dims == model.layer_dims

    def test_round_trip_text(self):
        model, _ = _perturbed((3, 2), 12)
        again = checkpoint_loads(checkpoint_dumps(model))
        assert np.array_equal(flatten_params(again), flatten_params(model))


def test_accuracy_counts_argmax_matches():
    model = _model((2, 2), [np.eye(2)], [[0.0, 0.0]])
    batch = Batch([[2.0, 1.0], [0.0, 3.0], [5.0, -1.0]], [0, 1, 1])
    assert accuracy(model, batch) == pytest.approx(2.0 / 3.0)
