import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedanon.errors import CorruptStream, DimensionMismatch, NoTape, ShapeError, VersionMismatch
from fedanon.nn import (SGD, Adam, GradientUpdate, ParameterSet, build_network, conv1d, conv_transpose1d, dense,
                        flatten, leaky_relu, load_params, optimizer_step, relu, reshape, save_params, sigmoid,
                        softmax)

from oracles import adam_first_step, central_difference, direct_conv1d, rel_error


def fd_check(specs, x_shape, seed=0, tol=1e-4, weight=None):
    """Compare backward() with central differences of L = sum(w * f(x)) for every parameter and the input."""
    net = build_network(specs, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal(x_shape)
    out = net.forward(x)
    w = rng.standard_normal(out.shape) if weight is None else weight
    g = net.backward(w)

    def loss_at(name):
        def f(v):
            saved = net.params[name].copy()
            net.params[name] = v
            val = float(np.sum(w * net.predict(x)))
            net.params[name] = saved
            return val
        return f

    for name, arr in net.params.items():
        num = central_difference(loss_at(name), arr.copy())
        assert rel_error(g[name], num) < tol, name
    num_x = central_difference(lambda v: float(np.sum(w * net.predict(v))), x.copy())
    assert rel_error(g.input_grad, num_x) < tol
    return net


class TestBuild:
    def test_same_seed_bit_identical(self):
        specs = [dense(5, 7), relu(), dense(7, 3)]
        a, b = build_network(specs, 4), build_network(specs, 4)
        assert a.params.checksum() == b.params.checksum()
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.names())

    def test_zero_bias(self):
        net = build_network([dense(4, 4)], 0)
        assert np.all(net.params["0.bias"] == 0)

    def test_he_variance(self):
        # Monte-Carlo over init draws: variance of He weights is 2 / fan_in
        w = build_network([dense(100, 100)], 0, dtype=np.float64).params["0.weight"]
        assert abs(w.var() - 2 / 100) < 0.2 * (2 / 100)

    def test_gain_scales_std(self):
        a = build_network([dense(50, 50, gain=1.0)], 1, dtype=np.float64).params["0.weight"]
        b = build_network([dense(50, 50, gain=0.1)], 1, dtype=np.float64).params["0.weight"]
        np.testing.assert_allclose(b, 0.1 * a)

    def test_dimension_chain_checked(self):
        with pytest.raises(DimensionMismatch):
            build_network([dense(4, 5), dense(6, 2)], 0)
        with pytest.raises(DimensionMismatch):
            build_network([reshape(2, 3), conv1d(2, 4, 5)], 0)


class TestForward:
    def test_identity_dense(self):
        net = build_network([dense(4, 4)], 0, dtype=np.float64)
        net.params["0.weight"] = np.eye(4)
        x = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(net.predict(x), x)

    def test_relu(self):
        net = build_network([reshape(2), relu()], 0, dtype=np.float64)
        np.testing.assert_array_equal(net.predict(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])

    def test_conv_constant_signal(self):
        # all-ones kernel of width 3 on a constant c gives 3c
        net = build_network([reshape(1, 10), conv1d(1, 1, 3)], 0, dtype=np.float64)
        net.params["1.weight"] = np.ones((1, 1, 3))
        out = net.predict(np.full((2, 10), 2.5))
        np.testing.assert_allclose(out, np.full((2, 1, 8), 7.5))

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_conv_matches_direct_loop(self, stride):
        net = build_network([reshape(2, 11), conv1d(2, 3, 4, stride)], 5, dtype=np.float64)
        net.params["1.bias"] = np.array([0.1, -0.2, 0.3])
        x = np.random.default_rng(1).standard_normal((2, 22))
        ref = direct_conv1d(x.reshape(2, 2, 11), net.params["1.weight"], net.params["1.bias"], stride)
        np.testing.assert_allclose(net.predict(x), ref, atol=1e-12)

    def test_conv_transpose_is_adjoint(self):
        # <conv(x), y> == <x, conv_t(y)> with shared weights and no bias
        conv = build_network([reshape(2, 9), conv1d(2, 3, 3, 2)], 0, dtype=np.float64)
        tconv = build_network([reshape(3, 4), conv_transpose1d(3, 2, 3, 2)], 0, dtype=np.float64)
        tconv.params["1.weight"] = conv.params["1.weight"].copy()  # (3, 2, 3) in both layouts
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((1, 18)), rng.standard_normal((1, 12))
        lhs = float(np.sum(conv.predict(x) * y.reshape(1, 3, 4)))
        rhs = float(np.sum(x.reshape(1, 2, 9) * tconv.predict(y)))
        assert abs(lhs - rhs) < 1e-10

    def test_softmax_rows_sum_to_one(self):
        net = build_network([dense(4, 5), softmax()], 0, dtype=np.float64)
        p = net.predict(np.random.default_rng(0).standard_normal((7, 4)) * 10)
        np.testing.assert_allclose(p.sum(1), 1.0)

    def test_input_shape_checked(self):
        net = build_network([dense(4, 2)], 0)
        with pytest.raises(ShapeError):
            net.predict(np.zeros((2, 5)))


class TestBackward:
    @pytest.mark.parametrize("specs,shape", [
        ([dense(5, 4), relu(), dense(4, 3)], (6, 5)),
        ([dense(5, 4), leaky_relu(0.1), dense(4, 2), sigmoid()], (6, 5)),
        ([dense(5, 4), sigmoid(), dense(4, 3), softmax()], (6, 5)),
        ([reshape(2, 9), conv1d(2, 3, 3, 2), leaky_relu(), flatten(), dense(12, 2)], (4, 18)),
        ([reshape(3, 4), conv_transpose1d(3, 2, 3, 2, 1), flatten(), dense(20, 3)], (4, 12)),
        ([dense(6, 8), reshape(2, 4), conv_transpose1d(2, 2, 2, 1), conv1d(2, 1, 3, 1), flatten()], (3, 6)),
    ], ids=["dense-relu", "leaky-sigmoid", "softmax", "conv", "conv-transpose", "mixed"])
    def test_finite_differences(self, specs, shape):
        net = fd_check(specs, shape)
        assert net.params.n_params <= 1000

    def test_zero_output_grad(self):
        net = build_network([dense(3, 4), relu(), dense(4, 2)], 0, dtype=np.float64)
        net.forward(np.ones((2, 3)))
        g = net.backward(np.zeros((2, 2)))
        assert all(np.all(v == 0) for v in g.grads.values())

    def test_linearity_of_sub_losses(self):
        net = build_network([dense(3, 4), sigmoid(), dense(4, 2)], 0, dtype=np.float64)
        x = np.random.default_rng(0).standard_normal((5, 3))
        a, b = np.random.default_rng(1).standard_normal((2, 5, 2))
        grads = []
        for w in (a, b, a + b):
            net.forward(x)
            grads.append(net.backward(w))
        for k in net.params.names():
            np.testing.assert_allclose(grads[0][k] + grads[1][k], grads[2][k], atol=1e-12)

    def test_backward_needs_tape(self):
        net = build_network([dense(3, 2)], 0)
        with pytest.raises(NoTape):
            net.backward(np.zeros((1, 2)))
        net.forward(np.ones((1, 3)))
        net.backward(np.zeros((1, 2)))
        with pytest.raises(NoTape):
            net.backward(np.zeros((1, 2)))

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
    def test_dense_fd_property(self, batch, d_in, d_out, seed):
        fd_check([dense(d_in, d_out), leaky_relu(0.2)], (batch, d_in), seed=seed)


class TestOptim:
    def test_sgd_scalar(self):
        p = ParameterSet({"w": np.array([1.5])})
        optimizer_step(p, GradientUpdate({"w": np.array([0.4])}), SGD(0.25))
        np.testing.assert_allclose(p["w"], [1.5 - 0.25 * 0.4])

    def test_sgd_zero_grad(self):
        p = ParameterSet({"w": np.arange(3.0)})
        optimizer_step(p, GradientUpdate({"w": np.zeros(3)}), SGD(0.5))
        np.testing.assert_array_equal(p["w"], np.arange(3.0))

    @pytest.mark.parametrize("g", [1e-3, 0.5, 40.0, -7.0])
    def test_adam_first_step_magnitude(self, g):
        p = ParameterSet({"w": np.array([0.0])})
        Adam(0.01).step(p, GradientUpdate({"w": np.array([g])}))
        assert p["w"][0] == pytest.approx(adam_first_step(g, 0.01), rel=1e-6)
        assert abs(p["w"][0]) == pytest.approx(0.01, rel=1e-3)


class TestIO:
    def test_round_trip_bit_equal(self):
        net = build_network([dense(5, 4), relu(), dense(4, 3)], 9)
        back = load_params(save_params(net.params))
        assert back.equal(net.params) and back.checksum() == net.params.checksum()

    def test_truncated(self):
        blob = save_params(build_network([dense(5, 4)], 0).params)
        with pytest.raises(CorruptStream):
            load_params(blob[:-7])
        with pytest.raises(CorruptStream):
            load_params(b"xx")

    def test_version_mismatch(self):
        import struct
        import zlib
        blob = bytearray(save_params(build_network([dense(2, 2)], 0).params))
        blob[4:6] = struct.pack("<H", 99)
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        with pytest.raises(VersionMismatch):
            load_params(bytes(blob))

    def test_mismatched_architecture(self):
        blob = save_params(build_network([dense(5, 4)], 0).params)
        other = build_network([dense(5, 3)], 0)
        with pytest.raises(ShapeError):
            other.load_params(load_params(blob))

    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
           st.sampled_from([np.float32, np.float64]), st.integers(0, 2 ** 32 - 1))
    def test_round_trip_property(self, shapes, dtype, seed):
        rng = np.random.default_rng(seed)
        p = ParameterSet({f"t{i}": rng.standard_normal(s).astype(dtype) for i, s in enumerate(shapes)})
        back = load_params(save_params(p))
        assert back.equal(p)
        assert all(back[k].dtype == np.dtype(dtype) for k in back.names())
