import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vseg import tensor as T
from oracles import naive_conv3d, scatter_conv_transpose3d


def rand(rng, *shape):
    return rng.standard_normal(shape)


def test_atrous_1d_example():
    x = np.arange(1.0, 6.0).reshape(1, 1, 1, 1, 5)
    w = np.ones((1, 1, 1, 1, 2))
    out = T.conv3d(x, w, dilation=2)
    np.testing.assert_array_equal(out.ravel(), [4.0, 6.0, 8.0])


def test_identity_kernel():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 3, 4, 5, 6)
    w = np.zeros((3, 3, 1, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(T.conv3d(x, w, np.zeros(3)), x)


@pytest.mark.parametrize("dilation", [1, 2, 4, 8])
def test_same_geometry_for_paper_dilations(dilation):
    x = np.zeros((1, 1, 16, 16, 16))
    w = np.zeros((1, 1, 3, 3, 3))
    out = T.conv3d(x, w, padding=T.same_padding(3, dilation), dilation=dilation)
    assert out.shape == (1, 1, 16, 16, 16)


@pytest.mark.parametrize("seed", range(6))
def test_conv3d_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    dil = int(rng.choice([1, 2]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 3))
    x = rand(rng, 2, cin, 5, 5, 5)
    w = rand(rng, cout, cin, k, k, k)
    b = rand(rng, cout)
    if 5 + 2 * pad - dil * (k - 1) - 1 < 0:
        pytest.skip("kernel larger than padded input")
    got = T.conv3d(x, w, b, stride, pad, dil)
    want = naive_conv3d(x, w, b, stride, pad, dil)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    k=st.sampled_from([1, 3, 5]),
    dil=st.integers(1, 4),
    d=st.integers(1, 7),
    h=st.integers(1, 7),
    w=st.integers(1, 7),
)
def test_same_padding_preserves_shape(k, dil, d, h, w):
    x = np.zeros((1, 2, d, h, w))
    wt = np.zeros((3, 2, k, k, k))
    assert T.conv3d(x, wt, padding=T.same_padding(k, dil), dilation=dil).shape == (1, 3, d, h, w)


def test_channel_mismatch_names_axis():
    with pytest.raises(T.ShapeError) as err:
        T.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    assert err.value.axis == "c"


def test_dilation_too_large_is_an_error():
    with pytest.raises(T.ShapeError) as err:
        T.conv3d(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 3, 3, 3)), dilation=4)
    assert err.value.axis == "d"


def test_convspec_defaults_and_validation():
    spec = T.ConvSpec(4, 8, dilation=4)
    assert spec.padding == 4 and spec.weight_shape == (8, 4, 3, 3, 3)
    with pytest.raises(ValueError):
        T.ConvSpec(1, 1, kernel=(2, 3, 3))
    with pytest.raises(ValueError):
        T.ConvSpec(1, 1, dilation=0)


def test_conv_transpose_doubles():
    x = np.ones((1, 2, 8, 8, 8))
    w = np.ones((2, 3, 2, 2, 2))
    assert T.conv_transpose3d(x, w).shape == (1, 3, 16, 16, 16)


def test_conv_transpose_single_voxel_places_kernel():
    rng = np.random.default_rng(1)
    w = rand(rng, 1, 1, 2, 2, 2)
    out = T.conv_transpose3d(np.ones((1, 1, 1, 1, 1)), w)
    np.testing.assert_array_equal(out[0, 0], w[0, 0])
    ones = T.conv_transpose3d(np.ones((1, 1, 1, 1, 1)), np.ones((1, 1, 2, 2, 2)))
    np.testing.assert_array_equal(ones, np.ones((1, 1, 2, 2, 2)))


def test_conv_transpose_matches_scatter():
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 3, 3, 4, 2)
    w = rand(rng, 3, 2, 2, 2, 2)
    np.testing.assert_allclose(T.conv_transpose3d(x, w), scatter_conv_transpose3d(x, w), atol=1e-12)


@pytest.mark.parametrize("k,pad,outpad", [(2, 0, 0), (3, 1, 1)])
def test_conv_transpose_is_adjoint(k, pad, outpad):
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 8, 8, 8)
    w = rand(rng, 4, 3, k, k, k)
    y = rand(rng, 2, 4, 4, 4, 4)
    lhs = np.vdot(T.conv3d(x, w, stride=2, padding=pad), y)
    rhs = np.vdot(x, T.conv_transpose3d(y, w, stride=2, padding=pad, output_padding=outpad))
    assert abs(lhs - rhs) / abs(lhs) < 1e-12


def test_global_avg_pool():
    np.testing.assert_array_equal(T.global_avg_pool(np.full((2, 3, 2, 2, 2), 7.0)), np.full((2, 3, 1, 1, 1), 7.0))
    ch = np.arange(4.0).reshape(1, 1, 1, 2, 2)
    assert T.global_avg_pool(ch).item() == 1.5


def test_global_avg_pool_naive_and_permutation():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 3, 4, 4, 4)
    got = T.global_avg_pool(x)
    for n in range(2):
        for c in range(3):
            total = 0.0
            for v in x[n, c].ravel().tolist():
                total += v
            assert abs(got[n, c, 0, 0, 0] - total / 64) < 1e-14
    perm = rng.permutation(64)
    shuffled = x.reshape(2, 3, 64)[:, :, perm].reshape(x.shape)
    np.testing.assert_allclose(T.global_avg_pool(shuffled), got, atol=1e-15)


def test_concat_channels():
    a = np.zeros((2, 4, 3, 3, 3))
    assert T.concat_channels([a, a, a]).shape == (2, 12, 3, 3, 3)
    np.testing.assert_array_equal(T.concat_channels([a]), a)
    b = np.arange(2 * 1 * 27.0).reshape(2, 1, 3, 3, 3)
    np.testing.assert_array_equal(T.concat_channels([a, b])[:, 4:], b)
    with pytest.raises(T.ShapeError) as err:
        T.concat_channels([a, np.zeros((2, 4, 3, 3, 2))])
    assert err.value.axis == "w"
    with pytest.raises(T.ShapeError):
        T.concat_channels([a, np.zeros((1, 4, 3, 3, 3))])


def test_activations():
    assert T.sigmoid(np.zeros(1))[0] == 0.5
    x = np.linspace(-800, 800, 101)
    s = T.sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all(s >= 0) and np.all(s <= 1)
    moderate = T.sigmoid(np.linspace(-30, 30, 61))
    assert np.all((moderate > 0) & (moderate < 1))
    assert np.all(T.activation(x, "relu") >= 0)
    with pytest.raises(ValueError):
        T.activation(x, "tanh")


def test_broadcast_mul_scalar_gate():
    rng = np.random.default_rng(5)
    a = rand(rng, 2, 4, 3, 3, 3)
    gate = np.array([0.3, 0.7]).reshape(2, 1, 1, 1, 1)
    out = T.broadcast_mul(a, gate)
    np.testing.assert_allclose(out[0], 0.3 * a[0])
    np.testing.assert_allclose(out[1], 0.7 * a[1])
    with pytest.raises(T.ShapeError):
        T.broadcast_mul(a, np.ones((2, 3, 1, 1, 1)))
    with pytest.raises(T.ShapeError):
        T.add(a, np.ones((2, 4, 3, 3)))


def test_batch_norm_fixed_point_and_running_stats():
    rng = np.random.default_rng(6)
    x = rand(rng, 2, 3, 4, 4, 4)
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    st_ = T.BatchNormState.identity(3)
    out, _ = T.batch_norm(x, st_.gamma, st_.beta, st_.running_mean, st_.running_var, training=True, eps=0.0)
    np.testing.assert_allclose(out, x, atol=1e-6)
    out, _ = T.batch_norm(x, st_.gamma, st_.beta, st_.running_mean, st_.running_var, training=True)
    np.testing.assert_allclose(out, x, rtol=1e-5)
    m = x[:, 0].size
    np.testing.assert_allclose(st_.running_var, 0.9 * (0.9 + 0.1 * m / (m - 1)) + 0.1 * m / (m - 1))
    # inference mode with the default buffers is a scaled pass-through
    fresh = T.BatchNormState.identity(3)
    out, _ = T.batch_norm(x, fresh.gamma, fresh.beta, fresh.running_mean, fresh.running_var, training=False)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))


def test_finite_outputs_on_finite_input():
    rng = np.random.default_rng(7)
    x = rand(rng, 1, 2, 4, 4, 4) * 1e3
    w = rand(rng, 2, 2, 3, 3, 3)
    for out in (T.conv3d(x, w, padding=1), T.sigmoid(x), T.relu(x), T.global_avg_pool(x)):
        assert np.all(np.isfinite(out))
