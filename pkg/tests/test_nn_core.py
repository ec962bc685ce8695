import numpy as np
import pytest

from srpmoe.errors import DivergenceError, FormatError, ShapeError
from srpmoe.nn_core import (
    AdamState,
    DenseNet,
    Layer,
    backward,
    decode_net,
    encode_net,
    forward,
    grad_check,
    load_net,
    optimizer_step,
    relative_error,
    save_net,
)


def squared_loss(target):
    def loss(output):
        diff = output - target
        return float(0.5 * np.sum(diff**2)), diff

    return loss


def test_forward_examples():
    identity = DenseNet([Layer(np.eye(2), np.zeros(2), "linear")])
    assert forward(identity, [3.0, -1.0]).tolist() == [3.0, -1.0]

    zero = DenseNet([Layer(np.zeros((1, 2)), np.zeros(1), "tanh")])
    assert forward(zero, [5.0, 7.0]).tolist() == [0.0]

    net = DenseNet([Layer(np.array([[1.0, 1.0]]), np.array([0.5]), "tanh")])
    assert forward(net, [0.25, 0.25])[0] == pytest.approx(np.tanh(1.0))
    assert forward(net, [0.25, 0.25])[0] == pytest.approx(0.76159, abs=1e-5)


def test_forward_batch_matches_rows():
    net = DenseNet.create([3, 5, 2], ["tanh", "linear"], np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((4, 3))
    batch = forward(net, x)
    for i in range(4):
        assert np.allclose(batch[i], forward(net, x[i]))


def test_forward_shape_error():
    net = DenseNet.create([3, 2], ["linear"], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, [1.0, 2.0])


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        DenseNet(
            [
                Layer(np.zeros((4, 3)), np.zeros(4), "tanh"),
                Layer(np.zeros((2, 5)), np.zeros(2), "linear"),
            ]
        )


def test_backward_linear_chain_rule():
    net = DenseNet([Layer(np.array([[0.3, -0.7]]), np.zeros(1), "linear")])
    grads, input_grad = backward(net, [2.0, 3.0], [1.0])
    assert grads[0].tolist() == [[2.0, 3.0]]
    assert grads[1].tolist() == [1.0]
    assert np.allclose(input_grad, [0.3, -0.7])


def test_backward_zero_upstream():
    net = DenseNet.create([3, 4, 2], ["tanh", "linear"], np.random.default_rng(0))
    grads, input_grad = backward(net, [0.1, 0.2, 0.3], np.zeros(2))
    assert all(not g.any() for g in grads)
    assert not input_grad.any()


def test_backward_without_input_gradient():
    net = DenseNet.create([3, 4, 2], ["tanh", "linear"], np.random.default_rng(0))
    x, upstream = [0.1, 0.2, 0.3], [1.0, -0.5]
    full, _ = backward(net, x, upstream)
    grads, input_grad = backward(net, x, upstream, input_grad=False)
    assert input_grad is None
    assert all(np.array_equal(a, b) for a, b in zip(full, grads))


def test_backward_shape_error():
    net = DenseNet.create([3, 2], ["linear"], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        backward(net, [0.1, 0.2, 0.3], np.zeros(3))


def test_grad_check_random_tanh_nets():
    rng = np.random.default_rng(42)
    for _ in range(100):
        net = DenseNet.create([3, 4, 2], ["tanh", "linear"], rng)
        x = rng.standard_normal(3)
        assert grad_check(net, x, squared_loss(rng.standard_normal(2))) < 1e-4


def test_grad_check_batch_input():
    rng = np.random.default_rng(7)
    net = DenseNet.create([4, 6, 6, 3], ["tanh", "tanh", "linear"], rng)
    x = rng.standard_normal((5, 4))
    assert grad_check(net, x, squared_loss(rng.standard_normal((5, 3)))) < 1e-4


def test_grad_check_linear_least_squares():
    rng = np.random.default_rng(3)
    net = DenseNet.create([4, 2], ["linear"], rng)
    assert grad_check(net, rng.standard_normal(4), squared_loss(np.ones(2))) < 1e-8


def test_grad_check_constant_loss():
    net = DenseNet.create([3, 4, 2], ["tanh", "linear"], np.random.default_rng(0))

    def constant(output):
        return 1.5, np.zeros_like(output)

    assert grad_check(net, [0.1, -0.2, 0.3], constant) == 0.0


def test_optimizer_zero_gradient_keeps_params():
    net = DenseNet.create([3, 2], ["linear"], np.random.default_rng(0))
    params = net.parameters()
    before = [p.copy() for p in params]
    state = AdamState.for_parameters(params)
    optimizer_step(params, [np.zeros_like(p) for p in params], state)
    assert all(np.array_equal(a, b) for a, b in zip(before, params))
    assert state.step == 1


def test_optimizer_first_step_is_sign_scaled():
    param = np.array([1.0, -2.0, 0.5])
    grad = np.array([0.3, -4.0, 1e-3])
    state = AdamState.for_parameters([param], learning_rate=0.01)
    optimizer_step([param], [grad], state)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * grad / (np.abs(grad) + 1e-8)
    assert np.allclose(param, expected)
    assert np.allclose(param - [1.0, -2.0, 0.5], -0.01 * np.sign(grad), atol=1e-6)


def test_optimizer_repeated_gradient_does_not_grow_step():
    param = np.array([0.0])
    state = AdamState.for_parameters([param], learning_rate=0.1)
    optimizer_step([param], [np.array([2.0])], state)
    first = -param[0]
    optimizer_step([param], [np.array([2.0])], state)
    second = -param[0] - first
    assert second <= first + 1e-12
    assert second == pytest.approx(first)


def test_optimizer_rejects_non_finite_gradient():
    param = np.array([1.0, 2.0])
    state = AdamState.for_parameters([param])
    with pytest.raises(DivergenceError):
        optimizer_step([param], [np.array([np.nan, 0.0])], state)
    assert param.tolist() == [1.0, 2.0]
    assert state.step == 0


def test_optimizer_skips_inactive_parameters():
    active_param, idle_param = np.array([1.0, 2.0]), np.array([3.0])
    state = AdamState.for_parameters([active_param, idle_param], learning_rate=0.1)
    state.m[1][:] = 0.5
    state.v[1][:] = 0.25
    optimizer_step(
        [active_param, idle_param], [np.array([1.0, -1.0]), np.array([9.0])], state, [True, False]
    )
    assert np.allclose(active_param, [0.9, 2.1])
    assert idle_param.tolist() == [3.0]
    assert state.m[1].tolist() == [0.5]
    assert state.v[1].tolist() == [0.25]
    assert state.step == 1


def test_optimizer_inactive_entries_are_not_checked():
    param = np.array([1.0])
    state = AdamState.for_parameters([param])
    optimizer_step([param], [np.array([np.nan])], state, [False])
    assert param.tolist() == [1.0]
    with pytest.raises(ShapeError):
        optimizer_step([param], [np.array([1.0])], state, [True, True])


def test_relative_error_floor():
    # large entries compare relatively
    assert relative_error(np.array([100.0]), np.array([101.0])) == pytest.approx(1 / 101)
    # entries below the floor compare against it
    assert relative_error(np.array([1e-5]), np.array([2e-5])) == pytest.approx(1e-3)
    assert relative_error(np.array([1e-5]), np.array([2e-5]), floor=1e-8) == pytest.approx(0.5)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


def test_checkpoint_round_trip(tmp_path):
    net = DenseNet.create([5, 4, 3], ["tanh", "linear"], np.random.default_rng(9))
    path = tmp_path / "net.ckpt"
    save_net(net, str(path))
    loaded = load_net(str(path))
    assert path.read_bytes()[:6] == b"SRPNN1"
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    assert [layer.activation for layer in loaded.layers] == ["tanh", "linear"]


def test_checkpoint_rejects_bad_input(tmp_path):
    net = DenseNet.create([2, 2], ["linear"], np.random.default_rng(0))
    buf = encode_net(net)
    with pytest.raises(FormatError):
        decode_net(b"XXXXXX" + buf[6:])
    with pytest.raises(FormatError):
        decode_net(buf[:-5])
    path = tmp_path / "trailing.ckpt"
    path.write_bytes(buf + b"\x00")
    with pytest.raises(FormatError):
        load_net(str(path))
