import math

import numpy as np
import pytest

from sparsecl.errors import DimensionError
from sparsecl.network import (
    InitConfig,
    NetworkParams,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    weight_jacobian_row,
)
from sparsecl.rng import SeededRng


def relu(v):
    return np.maximum(v, 0.0)


def small_net(seed=0, m=5, d1=7, bias=0.3):
    r = SeededRng(seed, 1)
    return NetworkParams(r.normal((m, d1)), bias * np.abs(r.normal((m,))))


class TestInit:
    def test_zero_variance(self, rng):
        p = init_params(4, 6, InitConfig(0.0), rng)
        assert not p.W.any()

    def test_zero_bias(self, rng):
        p = init_params(4, 6, InitConfig(1.0), rng)
        assert not p.b.any()

    def test_default_variance(self):
        assert InitConfig.default(32, 256).sigma0_sq == 1.0 / (256 * 32 * 32)

    def test_norm_concentration(self):
        cfg = InitConfig.default(32, 256)
        p = init_params(64, 256, cfg, SeededRng(3, 1))
        sq = np.sum(p.W**2, axis=1)
        centre = cfg.sigma0_sq * 256
        lo, hi = centre * (1 - 5 / 16), centre * (1 + 5 / 16)
        assert np.mean((sq >= lo) & (sq <= hi)) >= 0.95

    def test_w0_frozen(self, rng):
        p = init_params(3, 4, InitConfig(1.0), rng)
        with pytest.raises(ValueError):
            p.W0[0, 0] = 5.0
        p.W[0, 0] += 1.0
        assert p.W0[0, 0] != p.W[0, 0]

    def test_negative_bias_rejected(self):
        with pytest.raises(ValueError):
            NetworkParams(np.ones((2, 2)), np.array([0.1, -0.1]))

    def test_no_neurons(self, rng):
        with pytest.raises(DimensionError):
            init_params(0, 4, InitConfig(1.0), rng)


class TestForward:
    def test_linear_when_unbiased(self):
        p = small_net(bias=0.0)
        x = SeededRng(1, 0).normal((7,))
        assert np.array_equal(forward(p, x).rep, p.W @ x)

    def test_boundary_convention(self):
        p = NetworkParams(np.array([[1.0, 0.0]]), np.array([0.5]))
        out = forward(p, np.array([0.5, 0.0]))
        assert out.rep[0] == 0.0 and out.active[0]

    def test_arithmetic(self):
        p = NetworkParams(np.array([[1.0, 0.0, 0.0]]), np.array([0.5]))
        assert forward(p, np.array([2.0, 0.0, 0.0])).rep[0] == 1.5
        assert forward(p, np.array([-2.0, 0.0, 0.0])).rep[0] == -1.5

    def test_odd_symmetry(self):
        p = small_net()
        x = SeededRng(2, 0).normal((30, 7))
        assert np.array_equal(forward(p, -x).rep, -forward(p, x).rep)

    def test_soft_threshold_identity(self):
        # 10^5 random (w, b, x) triples: 10^4 neurons on each of 10 inputs
        r = SeededRng(11, 0)
        p = NetworkParams(r.normal((10_000, 4)), np.abs(r.normal((10_000,))))
        for x in r.normal((10, 4)):
            out = forward(p, x)
            u = p.W @ x
            # the two-ReLU form is the independent oracle
            oracle = relu(u - p.b) - relu(-u - p.b)
            assert np.abs(out.rep - oracle).max() <= 1e-15
            assert np.all(out.active[out.rep != 0])

    def test_batch_matches_single(self):
        p = small_net()
        x = SeededRng(3, 0).normal((6, 7))
        batch = forward(p, x)
        for k in range(6):
            single = forward(p, x[k])
            # gemm vs gemv may round differently
            np.testing.assert_allclose(batch.rep[k], single.rep, rtol=0, atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            forward(small_net(), np.zeros(3))


class TestJacobian:
    def test_inactive_is_zero(self):
        p = NetworkParams(np.array([[1.0, 0.0]]), np.array([5.0]))
        assert not weight_jacobian_row(p, np.array([1.0, 1.0]), 0).any()

    def test_unbiased_returns_x(self):
        p = small_net(bias=0.0)
        x = SeededRng(4, 0).normal((7,))
        assert np.array_equal(weight_jacobian_row(p, x, 2), x)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            weight_jacobian_row(small_net(), np.zeros(7), 5)

    def test_finite_difference(self):
        checked = 0
        for seed in range(200):
            p = small_net(seed)
            r = SeededRng(seed, 9)
            x = r.normal((7,))
            i = seed % p.m
            u = p.W[i] @ x
            if abs(abs(u) - p.b[i]) <= 1e-3:
                continue
            direction = r.normal((7,))
            h = 1e-6
            plus, minus = p.copy(), p.copy()
            plus.W[i] += h * direction
            minus.W[i] -= h * direction
            fd = (forward(plus, x).rep[i] - forward(minus, x).rep[i]) / (2 * h)
            an = weight_jacobian_row(p, x, i) @ direction
            assert abs(fd - an) <= 1e-6 * max(abs(an), 1.0)
            checked += 1
        assert checked >= 150


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = small_net()
        p.W += 1.0
        path = tmp_path / "c.bin"
        save_checkpoint(path, p)
        back = load_checkpoint(path)
        assert back == p
        assert np.array_equal(back.W0, p.W0)

    def test_layout(self, tmp_path):
        p = NetworkParams(np.array([[1.0, 2.0]]), np.array([0.5]))
        path = tmp_path / "c.bin"
        save_checkpoint(path, p)
        blob = path.read_bytes()
        assert blob[:8] == b"SPCLCKPT"
        floats = np.frombuffer(blob[-40:], dtype="<f8")
        assert floats.tolist() == [1.0, 2.0, 0.5, 1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        p = small_net()
        path = tmp_path / "c.bin"
        save_checkpoint(path, p)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_init_variance_formula():
    cfg = InitConfig.default(8, 64)
    assert math.isclose(cfg.sigma0_sq, 1 / (64 * 64))
