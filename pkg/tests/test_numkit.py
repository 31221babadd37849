import numpy as np
import pytest

from afbc_lab.errors import ConfigError, NumericalError, TruncatedFileError, UsageError
from afbc_lab.numkit import (
    AdamState,
    GradTape,
    MlpNet,
    PopArtStats,
    adam_step,
    load_checkpoint,
    popart_update,
    save_checkpoint,
)


def finite_difference_grads(net, loss_fn, h=1e-5):
    """Central-difference gradient of loss_fn(net) w.r.t. every parameter."""
    flat = net.to_flat()
    grads = np.zeros_like(flat)
    for i in range(len(flat)):
        bumped = flat.copy()
        bumped[i] += h
        net.load_flat(bumped)
        up = loss_fn(net)
        bumped[i] -= 2 * h
        net.load_flat(bumped)
        down = loss_fn(net)
        grads[i] = (up - down) / (2 * h)
    net.load_flat(flat)
    return grads


class TestForward:
    def test_zero_net_outputs_zero(self):
        net = MlpNet([3, 4, 2])
        assert np.array_equal(net.forward(np.ones(3)), np.zeros(2))

    def test_identity_linear_layer(self):
        net = MlpNet([3, 3])
        net.weights[0][...] = np.eye(3)
        x = np.array([0.3, -1.2, 7.0])
        assert np.allclose(net.forward(x), x)

    def test_hand_computed_2_3_1(self):
        # h = relu([1*1, 2*1, 1*0.5 + 2*(-0.5) + 1]) = [1, 2, 0.5]
        # out = 1*1 + 2*2 + 0.5*3 + 0.5 = 7.0
        net = MlpNet([2, 3, 1])
        net.weights[0][...] = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, -0.5]])
        net.biases[0][...] = np.array([0.0, 0.0, 1.0])
        net.weights[1][...] = np.array([[1.0], [2.0], [3.0]])
        net.biases[1][...] = np.array([0.5])
        assert np.isclose(net.forward(np.array([1.0, 2.0]))[0], 7.0)

    def test_shape_mismatch_is_config_error(self):
        net = MlpNet([3, 2])
        with pytest.raises(ConfigError):
            net.forward(np.ones(4))

    def test_batch_and_single_agree(self):
        rng = np.random.default_rng(0)
        net = MlpNet([3, 8, 2], rng=rng)
        xs = rng.normal(size=(5, 3))
        batch = net.forward(xs)
        singles = np.stack([net.forward(x) for x in xs])
        assert np.allclose(batch, singles)


class TestBackward:
    def test_zero_output_grad_gives_zero_tape(self):
        rng = np.random.default_rng(1)
        net = MlpNet([2, 4, 1], rng=rng)
        net.forward(np.ones(2))
        tape, _ = net.backward(np.zeros(1))
        assert all(np.all(g == 0) for g in tape.d_weights + tape.d_biases)

    def test_backward_before_forward_is_usage_error(self):
        net = MlpNet([2, 1])
        with pytest.raises(UsageError):
            net.backward(np.zeros(1))

    def test_linear_least_squares_by_hand(self):
        # pred = w*x with w=2, x=3 -> 6; target 1; dL/dw = 2*(pred-t)*x = 30
        net = MlpNet([1, 1])
        net.weights[0][...] = [[2.0]]
        pred = net.forward(np.array([3.0]))
        tape, _ = net.backward(np.array([2.0 * (pred[0] - 1.0)]))
        assert np.isclose(tape.d_weights[0][0, 0], 30.0)
        assert np.isclose(tape.d_biases[0][0], 10.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = MlpNet([3, 8, 6, 2], rng=rng)
        x = rng.normal(size=(4, 3))
        coeffs = rng.normal(size=2)

        def loss_fn(n):
            return float(np.sum(coeffs * np.square(n.forward(x))))

        fd = finite_difference_grads(net, loss_fn)
        out = net.forward(x)
        tape, _ = net.backward(2.0 * coeffs * out)
        analytic = np.concatenate([g.ravel() for g in tape.d_weights + tape.d_biases])
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-4


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        rng = np.random.default_rng(2)
        net = MlpNet([2, 3, 1], rng=rng)
        before = net.to_flat()
        state = AdamState(net)
        tape = GradTape(net)
        adam_step(net, tape, state)
        assert np.array_equal(net.to_flat(), before)
        assert state.step_count == 1

    def test_first_step_is_lr_times_sign(self):
        net = MlpNet([1, 1])
        net.weights[0][...] = [[1.0]]
        state = AdamState(net, learning_rate=1e-4)
        tape = GradTape(net)
        tape.d_weights[0][...] = [[1.0]]
        adam_step(net, tape, state)
        assert np.isclose(net.weights[0][0, 0], 1.0 - 1e-4, atol=1e-8)

    def test_quadratic_loss_decreases(self):
        net = MlpNet([1, 1])
        net.weights[0][...] = [[5.0]]
        state = AdamState(net, learning_rate=1e-2)
        losses = []
        for _ in range(500):
            w = net.weights[0][0, 0]
            losses.append((w - 1.0) ** 2)
            tape = GradTape(net)
            tape.d_weights[0][...] = [[2.0 * (w - 1.0)]]
            adam_step(net, tape, state)
        assert losses[-1] < losses[50] < losses[0]

    def test_nan_gradient_aborts(self):
        net = MlpNet([1, 1])
        state = AdamState(net)
        tape = GradTape(net)
        tape.d_weights[0][...] = [[np.nan]]
        with pytest.raises(NumericalError):
            adam_step(net, tape, state)

    def test_determinism_bit_identical(self):
        def train(seed):
            rng = np.random.default_rng(seed)
            net = MlpNet([2, 8, 1], rng=rng)
            state = AdamState(net, learning_rate=1e-3)
            xs = np.random.default_rng(99).normal(size=(16, 2))
            for _ in range(25):
                out = net.forward(xs)
                tape, _ = net.backward(out / len(xs))
                adam_step(net, tape, state)
            return net.to_flat()

        assert np.array_equal(train(7), train(7))


class TestPopArt:
    def test_fixed_point_leaves_last_layer_unchanged(self):
        stats = PopArtStats()
        stats.mu = 3.0
        stats.nu = 9.0  # sigma at the floor; matching targets keep it there
        net = MlpNet([1, 2, 1], rng=np.random.default_rng(3))
        before = net.to_flat()
        popart_update(stats, net, np.full(8, 3.0))
        assert np.allclose(net.to_flat(), before)

    def test_denormalized_output_preserved(self):
        rng = np.random.default_rng(4)
        stats = PopArtStats()
        net = MlpNet([2, 8, 1], rng=rng)
        probes = rng.normal(size=(100, 2))
        reference = stats.denormalize(net.forward(probes)[:, 0])
        for _ in range(50):
            popart_update(stats, net, rng.normal(loc=5.0, scale=2.0, size=32))
        now = stats.denormalize(net.forward(probes)[:, 0])
        assert np.max(np.abs(now - reference) / np.maximum(np.abs(reference), 1e-9)) < 1e-6

    def test_moments_track_target_distribution(self):
        rng = np.random.default_rng(5)
        stats = PopArtStats()
        for _ in range(10_000):
            stats.update(rng.normal(loc=5.0, scale=2.0, size=4))
        assert abs(stats.mu - 5.0) / 5.0 < 0.05
        assert abs(stats.sigma - 2.0) / 2.0 < 0.05

    def test_non_finite_targets_skipped(self):
        stats = PopArtStats()
        stats.update([1.0, np.nan, np.inf, 2.0])
        assert stats.skipped_samples == 2
        assert np.isfinite(stats.mu)

    def test_sigma_floor(self):
        stats = PopArtStats(sigma_min=1e-4)
        for _ in range(200):
            stats.update(np.full(8, 1.0))
        assert stats.sigma >= 1e-4
        assert stats.nu >= stats.mu**2 - 1e-9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        nets = {"actor": MlpNet([3, 8, 2], rng=rng), "critic0": MlpNet([4, 8, 1], rng=rng)}
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, nets, float_width=64)
        loaded = load_checkpoint(path)
        assert set(loaded) == {"actor", "critic0"}
        for name in nets:
            assert loaded[name].layer_sizes == nets[name].layer_sizes
            assert np.array_equal(loaded[name].to_flat(), nets[name].to_flat())

    def test_float32_round_trip_is_lossy_but_close(self, tmp_path):
        net = MlpNet([2, 4, 1], rng=np.random.default_rng(7))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"net": net})
        loaded = load_checkpoint(path)["net"]
        assert np.allclose(loaded.to_flat(), net.to_flat(), atol=1e-6)

    def test_truncated_file(self, tmp_path):
        net = MlpNet([2, 4, 1], rng=np.random.default_rng(8))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"net": net})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)
