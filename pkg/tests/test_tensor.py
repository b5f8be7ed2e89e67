import numpy as np
import pytest

from slimkit.core import tensor as T
from slimkit.core.instrument import AllocStats, FlopLedger, current_ledger, tracking
from slimkit.utils.errors import DimensionError

from .helpers import rel_err


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, np.eye(2)), a)

    def test_scalar(self):
        np.testing.assert_array_equal(T.matmul(np.array([[2.0]]), np.array([[3.0]])), [[6.0]])

    def test_matches_triple_loop(self, rng):
        a = rng.integers(-5, 5, size=(4, 3)).astype(float)
        b = rng.integers(-5, 5, size=(3, 2)).astype(float)
        expected = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_array_equal(T.matmul(a, b), expected)

    def test_associative(self, rng):
        a, b, c = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=(3, 6))
        assert rel_err(T.matmul(T.matmul(a, b), c), T.matmul(a, T.matmul(b, c))) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError) as info:
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        assert info.value.op == "matmul"


class TestScans:
    def test_prefix_example(self):
        np.testing.assert_array_equal(T.prefix_sum(np.array([1.0, 2.0, 3.0])), [1.0, 3.0, 6.0])

    def test_suffix_example(self):
        np.testing.assert_array_equal(T.suffix_sum(np.array([1.0, 2.0, 3.0])), [6.0, 5.0, 3.0])

    def test_zeros_and_single_row(self, rng):
        np.testing.assert_array_equal(T.prefix_sum(np.zeros((4, 3))), np.zeros((4, 3)))
        row = rng.normal(size=(1, 5))
        np.testing.assert_array_equal(T.prefix_sum(row), row)
        np.testing.assert_array_equal(T.suffix_sum(row), row)

    def test_seeded(self):
        z = np.array([[1.0, 1.0], [2.0, 2.0]])
        np.testing.assert_array_equal(T.prefix_sum(z, np.array([10.0, 20.0])), [[11.0, 21.0], [13.0, 23.0]])
        np.testing.assert_array_equal(T.suffix_sum(z, np.array([10.0, 20.0])), [[13.0, 23.0], [12.0, 22.0]])

    def test_adjacent_difference_recovers_integers(self, rng):
        z = rng.integers(-100, 100, size=(9, 4)).astype(float)
        ps = T.prefix_sum(z)
        np.testing.assert_array_equal(np.diff(ps, axis=0, prepend=0.0), z)

    def test_adjacent_difference_reals(self, rng):
        z = rng.normal(size=(9, 4))
        assert rel_err(np.diff(T.prefix_sum(z), axis=0, prepend=0.0), z) < 1e-12

    def test_suffix_is_adjoint(self, rng):
        u, v = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        lhs = np.sum(T.prefix_sum(u) * v)
        rhs = np.sum(u * T.suffix_sum(v))
        assert abs(lhs - rhs) <= 1e-12 * abs(lhs)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            T.prefix_sum(np.zeros((0, 3)))
        with pytest.raises(DimensionError):
            T.suffix_sum(np.zeros((0,)))

    def test_bad_init_shape(self):
        with pytest.raises(DimensionError):
            T.prefix_sum(np.zeros((3, 2)), np.zeros(3))


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4), 1e-5)
        np.testing.assert_allclose(out, 0.0, atol=0)

    def test_two_channel_row(self):
        out = T.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), 1e-5)
        np.testing.assert_allclose(out, [[0.999995, -0.999995]], atol=1e-7)

    def test_zero_gain(self, rng):
        bias = rng.normal(size=5)
        out = T.layer_norm(rng.normal(size=(3, 5)), np.zeros(5), bias, 1e-5)
        np.testing.assert_array_equal(out, np.broadcast_to(bias, (3, 5)))

    def test_rows_centered(self, rng):
        out = T.layer_norm(rng.normal(size=(6, 8)) * 5 + 2, np.ones(8), np.zeros(8), 1e-5)
        assert out.shape == (6, 8)
        assert np.abs(out.mean(axis=1)).max() <= 1e-12

    def test_gain_shape(self):
        with pytest.raises(DimensionError):
            T.layer_norm(np.zeros((2, 3)), np.ones(2), np.zeros(3), 1e-5)


def test_gelu_values():
    assert T.gelu(np.array(0.0)) == 0.0
    assert abs(T.gelu(np.array(10.0)) - 10.0) <= 1e-6
    assert abs(T.gelu(np.array(-10.0))) <= 1e-6


def test_gelu_grad_matches_difference(rng):
    x = rng.normal(size=20) * 2
    h = 1e-6
    fd = (T.gelu(x + h) - T.gelu(x - h)) / (2 * h)
    assert rel_err(T.gelu_grad(x), fd) < 1e-8


def test_guarded_div_clamps():
    y, safe, clamped = T.guarded_div(np.ones((3, 2)), np.array([2.0, 0.0, -1.0]), 1e-16)
    np.testing.assert_array_equal(clamped, [False, True, True])
    np.testing.assert_array_equal(safe, [2.0, 1e-16, 1e-16])
    np.testing.assert_array_equal(y[0], [0.5, 0.5])


def test_outer_rows_layout():
    v = np.array([[1.0, 2.0]])
    k = np.array([[3.0, 4.0, 5.0]])
    np.testing.assert_array_equal(T.outer_rows(v, k), [[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]])
    np.testing.assert_array_equal(T.row_matvec(T.outer_rows(v, k), np.array([[1.0, 0.0, 0.0]])), [[3.0, 6.0]])


def test_rng_streams_differ():
    a = T.make_rng(5).integers(0, 1000, size=8)
    b = T.make_rng(5).integers(0, 1000, size=8)
    c = T.make_rng(5, 1).integers(0, 1000, size=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


class TestInstrument:
    def test_alloc_free_returns_to_baseline(self):
        stats = AllocStats(baseline=100)
        stats.alloc(64)
        stats.free(64)
        assert stats.live_bytes == 100
        assert stats.peak_bytes >= 164
        assert stats.peak_activation_bytes == 64

    def test_workspace(self):
        stats = AllocStats()
        with stats.workspace(32):
            assert stats.live_bytes == 32
        assert stats.live_bytes == 0
        assert stats.peak_bytes == 32

    def test_ledger_phases(self):
        ledger = FlopLedger()
        ledger.charge(3)
        with ledger.phase("replay"):
            ledger.charge(5)
            with ledger.phase("rewind"):
                ledger.charge(1)
        ledger.charge(2)
        assert ledger.snapshot() == {"forward": 5, "replay": 5, "rewind": 1}

    def test_tracking_is_scoped(self):
        outer = current_ledger()
        with tracking() as (_, ledger):
            assert current_ledger() is ledger
            with tracking() as (_, inner):
                assert current_ledger() is inner
            assert current_ledger() is ledger
        assert current_ledger() is outer
