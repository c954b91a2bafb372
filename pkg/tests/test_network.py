import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nefem.network import (SPATIAL, SPATIAL_DISTANCE, AdamState,
                           CheckpointError, MlpEnrichment, NetworkError,
                           adam_step, init_network, load_networks,
                           save_networks)


def make_net(seed=0, mode=SPATIAL, dims=None, scales=(3, 2), anchor=(0.3, 0.4)):
    if dims is None:
        dims = (2, 20, 20, 1) if mode == SPATIAL else (3, 20, 20, 1)
    return init_network(dims, scales, mode, anchor, seed)


def test_param_count_spatial():
    assert make_net().num_params == 502


def test_param_count_distance():
    assert make_net(mode=SPATIAL_DISTANCE).num_params == 522


def test_same_seed_bit_identical():
    a = make_net(seed=7)
    b = make_net(seed=7)
    assert (a.params == b.params).all()
    c = make_net(seed=8)
    assert (a.params != c.params).any()


def test_inconsistent_dims_mode():
    with pytest.raises(NetworkError):
        init_network((3, 20, 20, 1), (3, 2), SPATIAL, (0, 0), 0)
    with pytest.raises(NetworkError):
        init_network((2, 20, 20, 1), (3, 2), SPATIAL_DISTANCE, (0, 0), 0)


def test_slopes_start_at_one_over_scale():
    net = make_net(scales=(150, 2))
    assert net.params[-2] == 1.0 / 150.0
    assert net.params[-1] == 0.5


def test_zero_weights_evaluate_to_zero():
    net = make_net()
    net.set_params(np.zeros_like(net.params))
    v, g = net.eval_with_gradient(np.array([0.7, 0.2]))
    assert v == 0.0 and (g == 0.0).all()


def test_single_unit_sine_analytic():
    # one effective unit: N = sin(x1 - p1) passed through identity layer 2
    net = init_network((2, 1, 1, 1), (1, 1), SPATIAL, (0.25, 0.0), 0)
    # layout: W1(1x2) b1(1) W2(1x1) b2(1) W3(1) a(2)
    # choose layer 2 near-linear: sin(eps*z)/eps ~ z via W2 = 1/eps, a2 = eps
    eps = 1e-8
    net.set_params(np.array([1.0, 0.0, 0.0, eps, 0.0, 1.0 / eps, 1.0, 1.0]))
    x = np.array([0.9, 0.3])
    v, g = net.eval_with_gradient(x)
    assert abs(v - np.sin(0.65)) < 1e-7
    assert abs(g[0] - np.cos(0.65)) < 1e-7
    assert abs(g[1]) < 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for seed in range(10):
        net = make_net(seed=seed)
        x = rng.uniform(0, 1, 2)
        v, g = net.eval_with_gradient(x)
        step = 1e-5
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            vp, _ = net.eval_with_gradient(x + e)
            vm, _ = net.eval_with_gradient(x - e)
            fd = (vp - vm) / (2 * step)
            assert abs(g[j] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_gradient_matches_fd_distance_mode():
    rng = np.random.default_rng(6)
    center = np.array([0.0, 0.15])
    R = 0.5

    def dist(x):
        r = np.linalg.norm(x - center)
        return abs(r - R), np.sign(r - R) * (x - center) / r

    net = make_net(mode=SPATIAL_DISTANCE, anchor=(0.2, 0.2))
    for _ in range(5):
        x = rng.uniform(-0.9, 0.9, 2)
        if abs(np.linalg.norm(x - center) - R) < 0.05:
            continue
        v, g = net.eval_with_gradient(x, d=dist(x))
        step = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            vp, _ = net.eval_with_gradient(x + e, d=dist(x + e))
            vm, _ = net.eval_with_gradient(x - e, d=dist(x - e))
            fd = (vp - vm) / (2 * step)
            assert abs(g[j] - fd) <= 2e-5 * max(1.0, abs(fd))


def test_distance_mode_kink_anchored_on_interface():
    # one-sided spatial gradients across the circle differ by dN/dD * [grad D]
    center = np.array([0.0, 0.15])
    R = 0.5
    net = make_net(mode=SPATIAL_DISTANCE, anchor=(0.5, 0.15))
    theta = 0.3
    ray = np.array([np.cos(theta), np.sin(theta)])
    xg = center + R * ray
    din = net.dims[0]
    X = np.array([[xg[0] - 0.5, xg[1] - 0.15, 0.0]])
    _, gin = net.eval_batch(X)
    dn_dd = gin[0, 2]
    assert abs(dn_dd) > 1e-3  # random nets have nonzero distance sensitivity
    eps = 1e-9
    def dist(x):
        r = np.linalg.norm(x - center)
        return abs(r - R), np.sign(r - R) * (x - center) / r
    _, gout = net.eval_with_gradient(center + (R + eps) * ray, d=dist(center + (R + eps) * ray))
    _, ginn = net.eval_with_gradient(center + (R - eps) * ray, d=dist(center + (R - eps) * ray))
    jump = gout - ginn
    expect = dn_dd * 2.0 * ray  # [grad D] = 2 * radial direction
    assert np.allclose(jump, expect, rtol=1e-4, atol=1e-6)


def test_laplacian_zero_net():
    net = make_net()
    net.set_params(np.zeros_like(net.params))
    assert net.eval_laplacian(np.array([0.5, 0.5])) == 0.0


def test_laplacian_single_unit():
    net = init_network((2, 1, 1, 1), (1, 1), SPATIAL, (0.0, 0.0), 0)
    eps = 1e-9
    net.set_params(np.array([1.0, 0.0, 0.0, eps, 0.0, 1.0 / eps, 1.0, 1.0]))
    x = np.array([0.4, 0.8])
    # N ~ sin(x1): Laplacian = -sin(x1)
    assert abs(net.eval_laplacian(x) + np.sin(0.4)) < 1e-6


def test_laplacian_matches_finite_differences():
    rng = np.random.default_rng(8)
    for seed in range(5):
        net = make_net(seed=seed)
        x = rng.uniform(0.2, 0.8, 2)
        lap = net.eval_laplacian(x)
        h = 1e-4
        vals = {}
        for (dx, dy) in ((0, 0), (h, 0), (-h, 0), (0, h), (0, -h)):
            vals[(dx, dy)], _ = net.eval_with_gradient(x + np.array([dx, dy]))
        fd = (vals[(h, 0)] + vals[(-h, 0)] + vals[(0, h)] + vals[(0, -h)]
              - 4 * vals[(0, 0)]) / h ** 2
        assert abs(lap - fd) <= 1e-4 * max(1.0, abs(fd))


def test_laplacian_rejected_in_distance_mode():
    net = make_net(mode=SPATIAL_DISTANCE)
    with pytest.raises(NetworkError):
        net.eval_laplacian(np.array([0.1, 0.1]))


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------

def _objective(net, X, wv, wg):
    vals, grads = net.eval_batch(X)
    return float(wv @ vals + np.sum(wg * grads))


def test_param_gradient_zero_cotangents():
    net = make_net()
    X = np.array([[0.1, 0.2], [0.3, 0.4]])
    g = net.accumulate_param_gradient(X, np.zeros(2), np.zeros((2, 2)))
    assert (g == 0.0).all()


@pytest.mark.parametrize("mode", [SPATIAL, SPATIAL_DISTANCE])
def test_param_gradient_single_point_value_only(mode):
    net = make_net(seed=3, mode=mode)
    din = net.dims[0]
    X = np.array([[0.21, -0.34, 0.05][:din]])
    wv = np.array([1.0])
    wg = np.zeros((1, din))
    g = net.accumulate_param_gradient(X, wv, wg)
    step = 1e-5
    base = net.params.copy()
    idx = np.linspace(0, net.num_params - 1, 40, dtype=int)
    for k in idx:
        for sgn, store in ((1, "p"), (-1, "m")):
            net.params[k] = base[k] + sgn * step
            if sgn == 1:
                vp = _objective(net, X, wv, wg)
            else:
                vm = _objective(net, X, wv, wg)
        net.params[k] = base[k]
        fd = (vp - vm) / (2 * step)
        assert abs(g[k] - fd) <= 1e-6 * max(1.0, abs(fd)), k


@pytest.mark.parametrize("mode", [SPATIAL, SPATIAL_DISTANCE])
def test_param_gradient_batch_with_gradient_cotangents(mode):
    rng = np.random.default_rng(9)
    net = make_net(seed=4, mode=mode)
    din = net.dims[0]
    X = rng.uniform(-0.5, 0.5, size=(7, din))
    wv = rng.normal(size=7)
    wg = rng.normal(size=(7, din))
    g = net.accumulate_param_gradient(X, wv, wg)
    step = 1e-5
    base = net.params.copy()
    scale = max(1.0, np.abs(g).max())
    idx = np.linspace(0, net.num_params - 1, 60, dtype=int)
    for k in idx:
        net.params[k] = base[k] + step
        vp = _objective(net, X, wv, wg)
        net.params[k] = base[k] - step
        vm = _objective(net, X, wv, wg)
        net.params[k] = base[k]
        fd = (vp - vm) / (2 * step)
        assert abs(g[k] - fd) <= 1e-5 * scale, k


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_param_gradient_batch_linearity(seed):
    rng = np.random.default_rng(seed)
    net = make_net(seed=1)
    X = rng.uniform(-1, 1, size=(4, 2))
    wv = rng.normal(size=4)
    wg = rng.normal(size=(4, 2))
    whole = net.accumulate_param_gradient(X, wv, wg)
    parts = sum(net.accumulate_param_gradient(X[i:i + 1], wv[i:i + 1], wg[i:i + 1])
                for i in range(4))
    scale = max(np.abs(whole).max(), 1e-30)
    assert np.max(np.abs(whole - parts)) <= 1e-12 * scale


def test_param_gradient_rejects_nonfinite():
    net = make_net()
    with pytest.raises(NetworkError):
        net.accumulate_param_gradient(np.zeros((1, 2)), np.array([np.nan]),
                                      np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient():
    state = AdamState.for_params(5, 0.01)
    params = np.ones(5)
    adam_step(state, params, np.zeros(5))
    assert (params == 1.0).all()
    assert state.step == 1


def test_adam_first_step_hand_value():
    state = AdamState.for_params(1, 0.001)
    params = np.zeros(1)
    adam_step(state, params, np.ones(1))
    # mhat = 1, vhat = 1: delta = -0.001/(1 + 1e-8)
    assert abs(params[0] + 0.001 / (1.0 + 1e-8)) < 1e-18


def test_adam_masked_parameters_untouched():
    state = AdamState.for_params(4, 0.1)
    params = np.arange(4.0)
    grads = np.ones(4)
    mask = np.array([False, True, False, True])
    adam_step(state, params, grads, frozen_mask=mask)
    assert params[1] == 1.0 and params[3] == 3.0
    assert state.m[1] == 0.0 and state.v[3] == 0.0
    assert params[0] != 0.0


def test_adam_masked_nonfinite_in_frozen_slot_ok():
    state = AdamState.for_params(2, 0.1)
    params = np.zeros(2)
    grads = np.array([1.0, np.inf])
    adam_step(state, params, grads, frozen_mask=np.array([False, True]))
    assert np.isfinite(params).all()


def test_adam_rejects_nonfinite_gradient():
    state = AdamState.for_params(2, 0.1)
    with pytest.raises(NetworkError):
        adam_step(state, np.zeros(2), np.array([1.0, np.nan]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    nets = [make_net(seed=s) for s in range(3)]
    path = tmp_path / "nets.json"
    save_networks(nets, path)
    loaded = load_networks(path)
    for a, b in zip(nets, loaded):
        assert (a.params == b.params).all()
        assert a.dims == b.dims and a.scales == b.scales
        assert (a.anchor == b.anchor).all()
    path2 = tmp_path / "nets2.json"
    save_networks(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_truncated_raises(tmp_path):
    nets = [make_net(seed=0)]
    path = tmp_path / "nets.json"
    save_networks(nets, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError):
        load_networks(path)
