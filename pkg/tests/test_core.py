import math

import numpy as np
import pytest

from subseg import _kernels
from subseg._kernels import _fallback
from subseg.core import (GraphError, Parameter, Rng, SgdConfig, ShapeError, Tensor, backward,
                         derive, forward_op_catalogue, lr_schedule, no_grad, ops, sgd_step)
from subseg.core import tsr
from subseg.core.rng import splitmix64

from . import oracles


# ---------------------------------------------------------------- rng

def test_xoshiro_matches_reference_vector():
    # the published reference implementation started from state (1, 2, 3, 4)
    rng = Rng(0)
    rng.setstate((1, 2, 3, 4))
    assert [rng.next_u64() for _ in range(3)] == [11520, 0, 1509978240]


def test_xoshiro_matches_scalar_oracle():
    rng = Rng(12345)
    state = rng.getstate()
    assert list(rng.u64_array(200)) == oracles.xoshiro_stream(state, 200)


def test_splitmix_vector():
    # splitmix64 seeded with 0: first output 0xE220A8397B1DCDAF
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_rng_is_deterministic_and_streams_differ():
    a, b = Rng(7), Rng(7)
    assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]
    assert derive(7, "batch", 0) != derive(7, "batch", 1)
    assert derive(7, "batch", 0) == derive(7, "batch", 0)
    assert derive(7, "hm") != derive(7, "batch")


def test_rng_ranges():
    rng = Rng(3)
    u = rng.random_array(10000)
    assert u.min() >= 0 and u.max() < 1
    ints = [rng.integers(5) for _ in range(5000)]
    assert set(ints) == set(range(5))
    assert sorted(rng.permutation(10)) == list(range(10))
    z = rng.normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


def test_rng_rejects_bad_requests():
    with pytest.raises(ValueError):
        Rng(0).integers(0)
    with pytest.raises(ValueError):
        Rng(0).sample_without_replacement(3, 4)


# ---------------------------------------------------------------- TSR1

def test_tsr_layout():
    buf = tsr.encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:4] == b"TSR1"
    assert buf[4:8] == (2).to_bytes(4, "little")
    assert buf[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[16:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]


def test_tsr_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    tsr.save(tmp_path / "a.tsr1", a)
    b = tsr.load(tmp_path / "a.tsr1")
    assert b.dtype == np.float32 and np.array_equal(a, b)
    assert tsr.decode(tsr.encode(np.float32(2.5))).shape == (1,)  # scalars are stored as rank 1


@pytest.mark.parametrize("buf", [b"", b"XXXX\x00\x00\x00\x00", b"TSR1\x01\x00\x00\x00\x05\x00\x00\x00abc"])
def test_tsr_rejects_corrupt(buf):
    with pytest.raises(tsr.TsrError, match="broken"):
        tsr.decode(buf, name="broken")


# ---------------------------------------------------------------- ops

def test_catalogue_lists_required_ops():
    required = {"conv2d", "relu", "max_pool2d", "upsample2", "concat", "batch_norm", "softmax",
                "add", "mul", "scale", "crop", "sum", "mean"}
    assert required <= set(forward_op_catalogue())


def test_conv_full_support_sum():
    out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.shape == (1, 1, 4, 4)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, np.array(oracles.conv2d(x, w, b)), atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"conv2d.*\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))))


def test_concat_shape_error():
    with pytest.raises(ShapeError, match="concat"):
        ops.concat([Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 4, 5)))])


def test_softmax_symmetric():
    p = ops.softmax(Tensor(np.zeros((1, 2, 3, 3))), axis=1).data
    assert np.all(p == 0.5)


def test_max_pool_and_upsample():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    assert ops.max_pool2d(x).data[0, 0].tolist() == [[5, 7], [13, 15]]
    up = ops.upsample2(Tensor(np.array([[[[1.0, 2.0]]]]))).data
    assert up[0, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2]]
    with pytest.raises(ShapeError):
        ops.max_pool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_add_broadcast_shape_error():
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_forward_is_an_error():
    with pytest.raises(FloatingPointError):
        ops.log(Tensor(np.array([0.0, 1.0])))


def test_batch_norm_inference_is_deterministic_affine():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    g, b = Parameter(np.full(3, 2.0)), Parameter(np.full(3, 0.5))
    rm, rv = np.array([0.1, 0.2, 0.3], np.float32), np.array([1.0, 2.0, 4.0], np.float32)
    a1 = ops.batch_norm(x, g, b, rm, rv, training=False).data
    a2 = ops.batch_norm(x, g, b, rm, rv, training=False).data
    assert np.array_equal(a1, a2)
    expect = (x.data - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) * 2.0 + 0.5
    np.testing.assert_allclose(a1, expect, rtol=1e-5)


def test_batch_norm_training_updates_running_stats():
    x = np.random.default_rng(1).standard_normal((4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Parameter(np.ones(2, np.float64)), Parameter(np.zeros(2, np.float64)),
                   rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


# ---------------------------------------------------------------- backward

def test_backward_linear_and_quadratic():
    p = Parameter(np.array([1.0, 2.0]))
    backward(ops.sum(p))
    assert p.grad.tolist() == [1.0, 1.0]
    q = Parameter(np.array([1.0, 2.0]))
    backward(ops.sum(q * q))
    assert q.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates():
    p = Parameter(np.array([1.0, 2.0]))
    backward(ops.sum(p * p))
    backward(ops.sum(p * p))
    assert p.grad.tolist() == [4.0, 8.0]


def test_backward_rejects_non_scalar_and_cycles():
    p = Parameter(np.ones(3))
    with pytest.raises(GraphError):
        backward(p * 2.0)
    loss = ops.sum(p * 2.0)
    loss._parents = (loss,)
    with pytest.raises(GraphError, match="cycle"):
        backward(loss)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with no_grad():
        out = ops.sum(p * 2.0)
    assert not out.requires_grad


def test_stop_gradient_blocks():
    p = Parameter(np.array([3.0]))
    backward(ops.sum(ops.stop_gradient(p) * p))
    assert p.grad.tolist() == [3.0]


def test_float64_shadow_mode_stays_float64():
    p = Parameter(np.ones((1, 1, 4, 4)), dtype=np.float64)
    out = ops.mean(ops.relu(1.0 - ops.conv2d(p, Tensor(np.ones((1, 1, 3, 3), np.float64)))))
    assert out.dtype == np.float64


# ---------------------------------------------------------------- optimizer

def test_sgd_two_steps():
    p = Parameter(np.array([1.0]))
    p.grad[:] = 1.0
    sgd_step([p], 0.1, 0.9)
    assert p.data[0] == pytest.approx(0.9) and p.momentum_buffer[0] == pytest.approx(1.0)
    assert p.grad[0] == 0.0
    p.grad[:] = 1.0
    sgd_step([p], 0.1, 0.9)
    assert p.momentum_buffer[0] == pytest.approx(1.9) and p.data[0] == pytest.approx(0.71)


def test_sgd_zero_lr_keeps_value():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad[:] = 5.0
    sgd_step([p], 0.0)
    assert p.data.tolist() == [1.0, -2.0]


def test_lr_schedule():
    cfg = SgdConfig(total_iters=4000)
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(3999, cfg) == pytest.approx(2.5e-6)
    assert lr_schedule(2000, cfg) == pytest.approx(0.005)
    for bad in (-1, 4000):
        with pytest.raises(ValueError):
            lr_schedule(bad, cfg)


@pytest.mark.parametrize("kw", [{"momentum": 1.0}, {"momentum": -0.1}, {"base_lr": 0.0}, {"total_iters": 0}])
def test_sgd_config_validation(kw):
    with pytest.raises(ValueError):
        SgdConfig(**kw)


# ---------------------------------------------------------------- kernels

@pytest.mark.skipif(_kernels.BACKEND != "native", reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_native_kernels_bit_identical_to_fallback(dtype):
    from subseg._kernels import _native
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 8)).astype(dtype)
    c1 = np.empty((27, 96), dtype)
    c2 = np.empty((27, 96), dtype)
    _native.im2col3(x, c1)
    _fallback.im2col3(x, c2)
    assert np.array_equal(c1, c2)
    d1, d2 = np.zeros_like(x), np.zeros_like(x)
    _native.col2im3(c1, d1)
    _fallback.col2im3(c2, d2)
    assert np.array_equal(d1, d2)

    x[0, 0, 0, :2] = 1.0   # tie inside a pooling window
    o1, o2 = np.empty((2, 3, 3, 4), dtype), np.empty((2, 3, 3, 4), dtype)
    a1, a2 = np.empty((2, 3, 3, 4), np.int8), np.empty((2, 3, 3, 4), np.int8)
    _native.maxpool2_forward(x, o1, a1)
    _fallback.maxpool2_forward(x, o2, a2)
    assert np.array_equal(o1, o2) and np.array_equal(a1, a2)
    g = rng.standard_normal(o1.shape).astype(dtype)
    b1, b2 = np.zeros_like(x), np.zeros_like(x)
    _native.maxpool2_backward(g, a1, b1)
    _fallback.maxpool2_backward(g, a2, b2)
    assert np.array_equal(b1, b2)
    u1, u2 = np.zeros_like(o1), np.zeros_like(o1)
    _native.upsample2_backward(x, u1)
    _fallback.upsample2_backward(x, u2)
    assert np.array_equal(u1, u2)

    s1, s2 = np.array([1, 2, 3, 4], np.uint64), np.array([1, 2, 3, 4], np.uint64)
    r1, r2 = np.empty(50, np.uint64), np.empty(50, np.uint64)
    _native.xoshiro_fill(s1, r1)
    _fallback.xoshiro_fill(s2, r2)
    assert np.array_equal(r1, r2) and np.array_equal(s1, s2)


def test_gelu_free_catalogue_entries_are_callable():
    for name in forward_op_catalogue():
        assert callable(getattr(ops, name)), name


def test_relu_and_scale_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    assert ops.relu(x).data.tolist() == [0.0, 0.0, 2.0]
    assert ops.scale(x, 3.0).data.tolist() == [-3.0, 0.0, 6.0]
    assert math.isclose(float(ops.mean(x).data), 1.0 / 3.0, rel_tol=1e-6)
