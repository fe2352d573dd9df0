import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucosdot.autodiff import (AutodiffError, Tensor, channel_linear, concat, gelu, silu,
                              spectral_conv, tanh)
from ucosdot.network import (OptimizerState, ScoreNetwork, TrainingError, adamw_step,
                             learning_rate, load_checkpoint, save_checkpoint)
from ucosdot.operator import DimensionError


def small_net(activation="silu", seed=0):
    return ScoreNetwork(width=4, depth=2, n_modes=3, channels=2, activation=activation, seed=seed)


def loss_fn(net, x, t, w):
    return float((net(x, t) * w).sum())


def fd_relative_errors(net, names, n_per_group, rng, h=1e-4):
    x = rng.standard_normal((2, 2, 8, 7))
    t = np.array([0.3, 0.8])
    w = rng.standard_normal((2, 2, 8, 7))
    net.zero_grad()
    (net.forward(x, t) * Tensor(w)).sum().backward()
    errs = []
    for name in names:
        p = net.params[name]
        flat_idx = rng.choice(p.data.size, size=min(n_per_group, p.data.size), replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_fn(net, x, t, w)
            p.data[idx] = orig - h
            down = loss_fn(net, x, t, w)
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            g = p.grad[idx]
            errs.append(abs(fd - g) / max(abs(fd), abs(g), 1e-6))
    return np.array(errs)


LAYER_GROUPS = {
    "lift": ["lift.W", "lift.b"],
    "spectral": ["block0.spec_re", "block0.spec_im", "block1.spec_re", "block1.spec_im"],
    "skip": ["block0.skip.W", "block0.skip.b", "block1.skip.W", "block1.skip.b"],
    "projection": ["proj1.W", "proj1.b", "proj2.W", "proj2.b"],
}


@pytest.mark.parametrize("group", sorted(LAYER_GROUPS))
def test_parameter_gradients_match_finite_differences(group):
    net = small_net()
    rng = np.random.default_rng(sorted(LAYER_GROUPS).index(group))
    names = LAYER_GROUPS[group]
    total = sum(net.params[n].data.size for n in names)
    errs = fd_relative_errors(net, names, 60 // len(names) + 1, rng)
    # groups with fewer than 50 entries are checked exhaustively
    assert len(errs) >= min(50, total)
    assert errs.max() < 1e-4


def test_input_gradient_matches_finite_differences():
    net = small_net("gelu", seed=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 6, 5))
    w = rng.standard_normal((1, 2, 6, 5))
    xt = Tensor(x.copy(), requires_grad=True)
    (net.forward(xt, 0.4) * Tensor(w)).sum().backward()
    h = 1e-5
    for idx in [(0, 0, 0, 0), (0, 1, 3, 4), (0, 0, 5, 2), (0, 1, 2, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (loss_fn(net, xp, 0.4, w) - loss_fn(net, xm, 0.4, w)) / (2 * h)
        assert abs(fd - xt.grad[idx]) <= 1e-5 * max(1.0, abs(fd))


@pytest.mark.parametrize("act", [silu, gelu, tanh])
def test_activation_gradients(act):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(20)
    xt = Tensor(x, requires_grad=True)
    act(xt).sum().backward()
    h = 1e-6
    fd = (act(Tensor(x + h)).data - act(Tensor(x - h)).data) / (2 * h)
    np.testing.assert_allclose(xt.grad, fd, rtol=1e-6, atol=1e-8)


def test_half_squared_norm_gradient_is_input():
    x = np.random.default_rng(2).standard_normal((3, 4))
    xt = Tensor(x, requires_grad=True)
    ((xt * xt).sum() * 0.5).backward()
    np.testing.assert_allclose(xt.grad, x)


def test_constant_loss_gives_zero_gradients():
    net = small_net()
    x = np.ones((1, 2, 4, 4))
    net.zero_grad()
    (net.forward(x, 0.5) * 0.0).sum().backward()
    for name, p in net.params.items():
        np.testing.assert_array_equal(p.grad, 0.0, err_msg=name)


def test_backward_on_detached_tensor_raises():
    with pytest.raises(AutodiffError):
        Tensor(np.ones(3)).sum().backward()


def test_backward_on_nonscalar_without_seed_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AutodiffError):
        (x * 2.0).backward()


def test_broadcast_gradients_reduce_to_operand_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ((a * b) + b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (2, 1)))
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_concat_and_channel_linear_gradients():
    rng = np.random.default_rng(4)
    x1 = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    x2 = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    W = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = channel_linear(concat([x1, x2], axis=1), W)
    y.sum().backward()
    colsum = W.data.sum(axis=0)
    np.testing.assert_allclose(x1.grad, np.broadcast_to(colsum[:2, None, None], (1, 2, 3, 3)))
    np.testing.assert_allclose(x2.grad, np.broadcast_to(colsum[2:, None, None], (1, 1, 3, 3)))


def test_full_modes_reproduce_circular_convolution():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 8, 8))
    kernel = rng.standard_normal((8, 8))
    khat = np.fft.fft2(kernel)
    m = 5
    w_re = np.zeros((1, 1, 2 * m - 1, m))
    w_im = np.zeros_like(w_re)
    for k in range(-3, 5):
        w_re[0, 0, k + m - 1] = khat[k % 8, :m].real
        w_im[0, 0, k + m - 1] = khat[k % 8, :m].imag
    got = spectral_conv(Tensor(x), Tensor(w_re), Tensor(w_im), m).data[0, 0]
    want = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            want += kernel[i, j] * np.roll(np.roll(x[0, 0], i, axis=0), j, axis=1)
    np.testing.assert_allclose(got, want, atol=1e-8)


def test_zero_projection_gives_zero_output():
    net = small_net()
    net.params["proj2.W"].data[:] = 0.0
    net.params["proj2.b"].data[:] = 0.0
    x = np.random.default_rng(6).standard_normal((3, 2, 5, 5))
    np.testing.assert_array_equal(net(x, 0.2), 0.0)


def test_doubling_final_layer_doubles_linear_network_output():
    net = small_net("identity")
    x = np.random.default_rng(7).standard_normal((2, 2, 6, 6))
    before = net(x, 0.5)
    net.params["proj2.W"].data *= 2
    net.params["proj2.b"].data *= 2
    np.testing.assert_allclose(net(x, 0.5), 2 * before, rtol=1e-12, atol=1e-14)


def test_forward_is_deterministic():
    x = np.random.default_rng(8).standard_normal((2, 2, 8, 8))
    a = ScoreNetwork(seed=11)(x, 0.3)
    b = ScoreNetwork(seed=11)(x, 0.3)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=10, deadline=None)
@given(h=st.integers(2, 12), w=st.integers(2, 12), batch=st.integers(1, 3))
def test_output_shape_follows_input(h, w, batch):
    net = small_net()
    out = net(np.zeros((batch, 2, h, w)), 0.1)
    assert out.shape == (batch, 2, h, w)
    assert net(np.zeros((2, h, w)), 0.1).shape == (2, h, w)


def test_forward_rejects_wrong_channels():
    with pytest.raises(DimensionError):
        small_net().forward(np.zeros((1, 3, 4, 4)), 0.1)


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        ScoreNetwork(activation="relu6")


def test_learning_rate_endpoints():
    state = OptimizerState()
    assert learning_rate(state, 0.0) == 0.002
    assert learning_rate(state, 1.0) == 0.0005
    with pytest.raises(ValueError):
        learning_rate(state, 1.5)


def test_adamw_zero_gradient_no_decay_is_fixed_point():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [q.copy() for q in p]
    state = OptimizerState(weight_decay=0.0)
    for k in range(5):
        adamw_step(state, p, [np.zeros(2), np.zeros((2, 2))], k / 4)
    for a, b in zip(p, before):
        np.testing.assert_array_equal(a, b)
    assert state.step == 5
    assert [m.shape for m in state.m] == [(2,), (2, 2)]


def test_adamw_constant_gradient_descends_monotonically():
    p = [np.array([3.0])]
    state = OptimizerState()
    trace = []
    for k in range(1000):
        adamw_step(state, p, [np.array([1.0])], k / 999)
        trace.append(p[0][0])
    assert np.all(np.diff(trace) < 0)


def test_adamw_rejects_nonfinite_gradient_by_name():
    with pytest.raises(TrainingError, match="lift.W"):
        adamw_step(OptimizerState(), [np.zeros(2)], [np.array([np.nan, 0.0])], 0.0, ["lift.W"])


def test_checkpoint_round_trip(tmp_path):
    net = ScoreNetwork(width=5, depth=3, n_modes=4, seed=2)
    path = tmp_path / "net.spnet"
    save_checkpoint(path, net)
    raw = path.read_bytes()
    assert raw[:7] == b"SPNET1\0"
    assert raw[7] == 1
    assert len(raw) == 24 + 8 * net.n_parameters
    back = load_checkpoint(path)
    assert (back.width, back.depth, back.n_modes, back.channels) == (5, 3, 4, 2)
    np.testing.assert_array_equal(back.get_flat(), net.get_flat())
    x = np.random.default_rng(0).standard_normal((2, 6, 6))
    np.testing.assert_array_equal(back(x, 0.5), net(x, 0.5))


def test_checkpoint_rejects_truncated_file(tmp_path):
    path = tmp_path / "net.spnet"
    save_checkpoint(path, small_net())
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="parameters"):
        load_checkpoint(path)


def test_canonical_parameter_order():
    names = ScoreNetwork(depth=2).parameter_names
    assert names == ["lift.W", "lift.b",
                     "block0.spec_re", "block0.spec_im", "block0.skip.W", "block0.skip.b",
                     "block1.spec_re", "block1.spec_im", "block1.skip.W", "block1.skip.b",
                     "proj1.W", "proj1.b", "proj2.W", "proj2.b"]
