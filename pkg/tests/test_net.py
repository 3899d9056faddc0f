import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsinet.augment import RescaleParams, TrainingSet
from hsinet.core import ShapeError, ValidationError
from hsinet.net import (
    DivergenceError,
    Gradients,
    HyperParams,
    NetworkParams,
    backward,
    forward,
    glorot_init,
    load_model,
    loss,
    num_features,
    predict,
    save_model,
    shift_penalty,
    train,
)


def numerical_gradients(params, spectra, labels, lambda1, lambda2, h=1e-4):
    """Central finite differences over every parameter (test oracle)."""
    grads = []
    for tensor in (params.w1, params.b1, params.w2, params.b2):
        g = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = loss(params, spectra, labels, lambda1, lambda2)
            tensor[idx] = orig - h
            down = loss(params, spectra, labels, lambda1, lambda2)
            tensor[idx] = orig
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        grads.append(g)
    return Gradients(*grads)


def max_relative_error(analytic: Gradients, numeric: Gradients) -> float:
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
        worst = max(worst, float((np.abs(a - b) / denom).max()))
    return worst


def random_problem(bands, kernel_size, num_classes, num_kernels=2, batch=4, seed=0):
    """Random net + batch whose pre-activations stay away from the ReLU kink."""
    for attempt in range(100):
        rng = np.random.default_rng(seed * 1000 + attempt)
        hyper = HyperParams(
            num_kernels=num_kernels, kernel_size=kernel_size, stride=1, seed=seed
        )
        params = glorot_init(hyper, bands, num_classes, seed=rng.integers(2**32))
        params.b1 = rng.normal(0.1, 0.3, size=params.b1.shape)
        spectra = rng.random((batch, bands))
        labels = np.zeros((batch, num_classes))
        labels[np.arange(batch), rng.integers(num_classes, size=batch)] = 1.0
        from hsinet.net import _forward_batch

        z1 = _forward_batch(params, spectra).pre_activation
        if np.abs(z1).min() > 1e-2:
            return params, spectra, labels
    raise AssertionError("could not construct a kink-free instance")


class TestGlorotInit:
    def test_conv_bound(self):
        hyper = HyperParams(num_kernels=64, kernel_size=4, seed=0)
        params = glorot_init(hyper, bands=16, num_classes=3, seed=1)
        bound = math.sqrt(6.0 / 8.0)
        assert bound == pytest.approx(0.866, abs=5e-4)
        assert np.abs(params.w1).max() <= bound
        assert np.abs(params.w1).max() > 0.5 * bound  # draws actually fill the range

    def test_dense_bound(self):
        hyper = HyperParams(num_kernels=4, kernel_size=3, seed=0)
        params = glorot_init(hyper, bands=10, num_classes=2, seed=2)
        fan_in = 4 * num_features(10, 3, 1)
        bound = math.sqrt(6.0 / (fan_in + 2))
        assert np.abs(params.w2).max() <= bound

    def test_biases_zero(self):
        params = glorot_init(HyperParams(), bands=32, num_classes=4, seed=3)
        assert not params.b1.any() and not params.b2.any()

    def test_seed_determinism(self):
        hyper = HyperParams(seed=9)
        a = glorot_init(hyper, 32, 4)
        b = glorot_init(hyper, 32, 4)
        assert a.w1.tobytes() == b.w1.tobytes()
        assert a.w2.tobytes() == b.w2.tobytes()


class TestForward:
    def test_zero_params_uniform(self):
        params = NetworkParams(
            w1=np.zeros((2, 3)), b1=np.zeros(2),
            w2=np.zeros((4, 2 * num_features(9, 3, 1))), b2=np.zeros(4),
            stride=1, bands=9,
        )
        probs, _ = forward(params, np.random.default_rng(0).random(9))
        np.testing.assert_allclose(probs, 0.25)

    def test_feature_count_220_bands(self):
        assert num_features(220, 53, 1) == 168
        hyper = HyperParams(num_kernels=16, kernel_size=53, stride=1, seed=0)
        params = glorot_init(hyper, 220, 12, seed=0)
        _, cache = forward(params, np.zeros(220))
        assert cache.features.shape == (1, 16 * 168)

    def test_hand_convolution(self):
        params = NetworkParams(
            w1=np.array([[1.0, 0.0]]), b1=np.zeros(1),
            w2=np.zeros((2, 2)), b2=np.zeros(2),
            stride=1, bands=3,
        )
        _, cache = forward(params, np.array([2.0, 3.0, 5.0]))
        np.testing.assert_array_equal(cache.pre_activation[0, 0], [2.0, 3.0])

    def test_stride_two(self):
        assert num_features(10, 3, 2) == 4
        assert num_features(9, 3, 2) == 4

    def test_softmax_shift_invariance_and_sum(self):
        rng = np.random.default_rng(5)
        hyper = HyperParams(num_kernels=3, kernel_size=4, seed=0)
        params = glorot_init(hyper, 12, 3, seed=1)
        x = rng.random(12)
        probs, _ = forward(params, x)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        shifted = NetworkParams(
            params.w1, params.b1, params.w2, params.b2 + 7.5, params.stride, params.bands
        )
        probs2, _ = forward(shifted, x)
        assert np.argmax(probs2) == np.argmax(probs)


class TestShiftPenalty:
    def test_constant_kernel_zero(self):
        assert shift_penalty(np.full((3, 5), 2.7)) == 0.0

    def test_hand_values(self):
        assert shift_penalty(np.array([[0.0, 1.0]])) == 1.0
        assert shift_penalty(np.array([[1.0, 3.0, 2.0]])) == 5.0

    @given(
        st.lists(st.floats(-5, 5), min_size=2, max_size=6),
        st.floats(-3, 3),
        st.floats(-2, 2),
    )
    def test_shift_and_scale_invariances(self, kernel, const, scale):
        w = np.array([kernel])
        base = shift_penalty(w)
        assert base >= 0.0
        assert shift_penalty(w + const) == pytest.approx(base, rel=1e-9, abs=1e-9)
        assert shift_penalty(scale * w) == pytest.approx(
            scale**2 * base, rel=1e-9, abs=1e-9
        )

    def test_zero_iff_constant(self):
        rng = np.random.default_rng(0)
        w = rng.random((2, 4))
        w[0] = 0.3
        assert shift_penalty(w) > 0.0
        w[1] = -1.2
        assert shift_penalty(w) == 0.0


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        params = NetworkParams(
            w1=np.zeros((1, 2)), b1=np.zeros(1),
            w2=np.zeros((2, num_features(4, 2, 1))), b2=np.array([40.0, -40.0]),
            stride=1, bands=4,
        )
        y = np.array([[1.0, 0.0]])
        assert loss(params, np.zeros((1, 4)), y, 0.0, 0.0) <= 1e-6

    def test_uniform_prediction_log_k(self):
        for k in (2, 3, 7):
            params = NetworkParams(
                w1=np.zeros((2, 2)), b1=np.zeros(2),
                w2=np.zeros((k, 2 * num_features(5, 2, 1))), b2=np.zeros(k),
                stride=1, bands=5,
            )
            y = np.zeros((3, k))
            y[:, 0] = 1.0
            got = loss(params, np.random.default_rng(k).random((3, 5)), y, 0.0, 0.0)
            assert got == pytest.approx(math.log(k), abs=1e-9)

    def test_l2_penalty_hand_value(self):
        w1 = np.zeros((1, 3))
        w1[0, 0] = 2.0
        params = NetworkParams(
            w1=w1, b1=np.zeros(1),
            w2=np.zeros((2, num_features(6, 3, 1))), b2=np.array([40.0, -40.0]),
            stride=1, bands=6,
        )
        y = np.array([[1.0, 0.0]])
        x = np.zeros((1, 6))
        assert loss(params, x, y, 1.0, 0.0) == pytest.approx(4.0, abs=1e-6)
        # the locality penalty of [2, 0, 0] adds (2-0)^2 = 4 when enabled
        assert loss(params, x, y, 1.0, 1.0) == pytest.approx(8.0, abs=1e-6)


class TestBackward:
    def test_gradient_check_small_net(self):
        params, x, y = random_problem(bands=12, kernel_size=3, num_classes=2, seed=1)
        for l1 in (0.0, 0.1, 1.0):
            for l2 in (0.0, 0.1, 1.0):
                analytic = backward(params, x, y, l1, l2)
                numeric = numerical_gradients(params, x, y, l1, l2)
                assert max_relative_error(analytic, numeric) <= 1e-4

    def test_penalty_gradient_zero_at_constant_kernel(self):
        params = NetworkParams(
            w1=np.full((2, 4), 0.7), b1=np.zeros(2),
            w2=np.zeros((2, 2 * num_features(8, 4, 1))), b2=np.zeros(2),
            stride=1, bands=8,
        )
        y = np.array([[1.0, 0.0]])
        g = backward(params, np.zeros((1, 8)), y, 0.0, 5.0)
        np.testing.assert_array_equal(g.w1, 0.0)

    def test_zero_input_batch_leaves_only_regularizers(self):
        rng = np.random.default_rng(3)
        hyper = HyperParams(num_kernels=2, kernel_size=3, seed=0)
        params = glorot_init(hyper, 9, 2, seed=4)
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        g = backward(params, np.zeros((2, 9)), y, 0.5, 0.25)
        diff = params.w1[:, :-1] - params.w1[:, 1:]
        expected_w1 = 2 * 0.5 * params.w1
        expected_w1[:, :-1] += 2 * 0.25 * diff
        expected_w1[:, 1:] -= 2 * 0.25 * diff
        np.testing.assert_allclose(g.w1, expected_w1, atol=1e-12)
        np.testing.assert_allclose(g.w2, 2 * 0.5 * params.w2, atol=1e-12)
        np.testing.assert_array_equal(g.b1, 0.0)
        _ = rng  # seed reserved for future variations


class TestPredict:
    def test_argmax_and_tie_rule(self):
        params = NetworkParams(
            w1=np.zeros((1, 2)), b1=np.zeros(1),
            w2=np.zeros((3, num_features(4, 2, 1))), b2=np.log([0.1, 0.7, 0.2]),
            stride=1, bands=4,
        )
        ids, probs = predict(params, np.zeros((1, 4)))
        assert ids[0] == 2
        np.testing.assert_allclose(probs[0], [0.1, 0.7, 0.2], atol=1e-9)
        tie = NetworkParams(
            np.zeros((1, 2)), np.zeros(1),
            np.zeros((2, num_features(4, 2, 1))), np.zeros(2), 1, 4,
        )
        ids, probs = predict(tie, np.zeros((1, 4)))
        assert ids[0] == 1 and probs[0, 0] == probs[0, 1]

    def test_consistency_with_forward(self):
        rng = np.random.default_rng(8)
        hyper = HyperParams(num_kernels=3, kernel_size=5, seed=2)
        params = glorot_init(hyper, 16, 4, seed=5)
        x = rng.random((100, 16))
        ids, probs = predict(params, x)
        for i in range(100):
            p_single, _ = forward(params, x[i])
            assert ids[i] == np.argmax(p_single) + 1
            np.testing.assert_allclose(probs[i], p_single, atol=1e-12)


def separable_training_sets(n_per_class=24, bands=12, noise=0.03, seed=0):
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for k in (0, 1):
        proto = np.zeros(bands)
        proto[k * 6 : k * 6 + 4] = 1.0
        for _ in range(n_per_class):
            rows.append(np.clip(proto + noise * rng.standard_normal(bands), 0, 1))
            onehot = np.zeros(2)
            onehot[k] = 1.0
            labels.append(onehot)
    x = np.array(rows)
    y = np.array(labels)
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    params = RescaleParams(0.0, 1.0)
    return (
        TrainingSet(x[8:], y[8:], params),
        TrainingSet(x[:8], y[:8], params),
    )


class TestTrain:
    def test_separable_reaches_full_accuracy(self):
        trainset, valset = separable_training_sets()
        hyper = HyperParams(
            num_kernels=2, kernel_size=3, stride=1, lambda1=1e-4, lambda2=0.0,
            eta=0.1, batch_size=8, max_epochs=300, patience=30, seed=1,
        )
        params, report = train(trainset, valset, hyper, bands=12, num_classes=2)
        pred, _ = predict(params, trainset.spectra)
        assert (pred == trainset.class_ids()).mean() == 1.0
        assert report.epochs_run < 300
        assert report.best_epoch <= report.epochs_run

    def test_patience_zero_stops_at_first_stale_epoch(self):
        trainset, valset = separable_training_sets(seed=3)
        hyper = HyperParams(
            num_kernels=2, kernel_size=3, eta=0.0, patience=0, max_epochs=50, seed=0
        )
        _, report = train(trainset, valset, hyper, 12, 2)
        assert report.epochs_run == 2  # epoch 1 improves on +inf, epoch 2 is stale

    def test_zero_learning_rate_stops_at_patience(self):
        trainset, valset = separable_training_sets(seed=4)
        hyper = HyperParams(
            num_kernels=2, kernel_size=3, eta=0.0, patience=5, max_epochs=50, seed=0
        )
        _, report = train(trainset, valset, hyper, 12, 2)
        assert report.epochs_run == 1 + 5
        assert len(set(report.val_error_history)) == 1
        assert len(set(report.train_loss_history)) == 1

    def test_training_determinism(self):
        trainset, valset = separable_training_sets(seed=5)
        hyper = HyperParams(
            num_kernels=2, kernel_size=3, eta=0.05, patience=10, max_epochs=40, seed=7
        )
        p1, r1 = train(trainset, valset, hyper, 12, 2)
        p2, r2 = train(trainset, valset, hyper, 12, 2)
        assert p1.w1.tobytes() == p2.w1.tobytes()
        assert p1.w2.tobytes() == p2.w2.tobytes()
        assert r1 == r2

    def test_divergence_detected(self):
        trainset, valset = separable_training_sets(seed=6)
        hyper = HyperParams(
            num_kernels=2, kernel_size=3, eta=1e6, patience=40, max_epochs=60, seed=0
        )
        with pytest.raises(DivergenceError) as err:
            train(trainset, valset, hyper, 12, 2)
        assert err.value.epoch >= 1

    def test_small_step_loss_non_increasing_on_smooth_region(self):
        # all pre-activations strictly positive: the loss is smooth along
        # the whole trajectory and a small enough step cannot increase it
        rng = np.random.default_rng(2)
        x = 0.5 + 0.4 * rng.random((16, 10))
        y = np.zeros((16, 2))
        y[np.arange(16) % 2 == 0, 0] = 1.0
        y[np.arange(16) % 2 == 1, 1] = 1.0
        params = NetworkParams(
            w1=0.05 * rng.random((2, 3)), b1=np.full(2, 5.0),
            w2=0.05 * rng.random((2, 2 * num_features(10, 3, 1))), b2=np.zeros(2),
            stride=1, bands=10,
        )
        losses = [loss(params, x, y, 0.1, 0.1)]
        for _ in range(10):
            g = backward(params, x, y, 0.1, 0.1)
            params.w1 -= 1e-3 * g.w1
            params.b1 -= 1e-3 * g.b1
            params.w2 -= 1e-3 * g.w2
            params.b2 -= 1e-3 * g.b2
            losses.append(loss(params, x, y, 0.1, 0.1))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        hyper = HyperParams(num_kernels=3, kernel_size=5, stride=2, seed=0)
        params = glorot_init(hyper, 17, 4, seed=6)
        rescale = RescaleParams(-2.5, 7.25)
        path = tmp_path / "model.bin"
        save_model(params, rescale, path)
        loaded, loaded_rescale = load_model(path)
        assert loaded_rescale == rescale
        assert (loaded.bands, loaded.stride) == (17, 2)
        np.testing.assert_array_equal(loaded.w1, params.w1.astype(np.float32))
        np.testing.assert_array_equal(loaded.w2, params.w2.astype(np.float32))
        # float32-quantized params agree with themselves after a second pass
        save_model(loaded, loaded_rescale, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTAMODEL123")
        from hsinet.core import FormatError

        with pytest.raises(FormatError):
            load_model(p)


def test_hyper_validation():
    with pytest.raises(ValidationError):
        HyperParams(momentum=1.0)
    with pytest.raises(ValidationError):
        HyperParams(stride=0)
    with pytest.raises(ValidationError):
        HyperParams(eta=-0.1)
    with pytest.raises(ValidationError):
        num_features(4, 5, 1)


def test_forward_band_mismatch():
    params = glorot_init(HyperParams(num_kernels=2, kernel_size=3), 10, 2, seed=0)
    with pytest.raises(ShapeError):
        forward(params, np.zeros(11))
