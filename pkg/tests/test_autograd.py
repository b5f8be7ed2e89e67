import numpy as np
import pytest

from slimkit.core import autograd as ag
from slimkit.core import tensor as T
from slimkit.core.autograd import Tape
from slimkit.core.instrument import AllocStats, FlopLedger
from slimkit.utils.errors import DimensionError, TapeError

from .helpers import central_diff, rel_err


def _tape():
    return Tape(stats=AllocStats(), ledger=FlopLedger())


def _check_vjp(build, *inputs, tol=1e-6):
    """
    Compare tape gradients of <build(*vars), w> against central differences

    `build` maps leaf Vars to one Var; w is a fixed random weight so every
    output entry contributes.
    """
    rng = T.make_rng(17)
    tape = _tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = build(*leaves)
    w = rng.normal(size=np.shape(out.value))
    root = ag.dot(out, tape.constant(w))
    grads = tape.backward(root, wrt=leaves)

    for i, x in enumerate(inputs):
        def f(xi, i=i):
            t = _tape()
            vals = [t.constant(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return float(np.sum(build(*vals).value * w))

        x = np.array(x, dtype=np.float64)
        coords = range(x.size)
        fd = central_diff(f, x, coords)
        assert rel_err(grads[leaves[i]].reshape(-1), fd) < tol, f"input {i}"


class TestPrimitiveVJPs:
    def test_add(self, rng):
        _check_vjp(ag.add, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))

    def test_add_row_bias(self, rng):
        _check_vjp(ag.add, rng.normal(size=(4, 3)), rng.normal(size=3))

    def test_matmul(self, rng):
        _check_vjp(ag.matmul, rng.normal(size=(4, 3)), rng.normal(size=(3, 5)))

    def test_prefix_sum(self, rng):
        _check_vjp(ag.prefix_sum, rng.normal(size=(6, 2)))

    def test_prefix_sum_seeded(self, rng):
        _check_vjp(ag.prefix_sum, rng.normal(size=(6, 2)), rng.normal(size=2))

    def test_suffix_sum(self, rng):
        _check_vjp(ag.suffix_sum, rng.normal(size=(6, 2)))

    def test_layer_norm(self, rng):
        _check_vjp(
            lambda x, g, b: ag.layer_norm(x, g, b, 1e-5),
            rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5),
        )

    def test_gelu(self, rng):
        _check_vjp(ag.gelu, rng.normal(size=(3, 4)) * 2)

    def test_square(self, rng):
        _check_vjp(ag.square, rng.normal(size=(3, 4)))

    def test_outer_rows(self, rng):
        _check_vjp(ag.outer_rows, rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))

    def test_row_matvec(self, rng):
        _check_vjp(ag.row_matvec, rng.normal(size=(4, 6)), rng.normal(size=(4, 2)))

    def test_row_dot(self, rng):
        _check_vjp(ag.row_dot, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))

    def test_guarded_div(self, rng):
        _check_vjp(
            lambda n, den: ag.guarded_div(n, den, 1e-16),
            rng.normal(size=(4, 3)), rng.uniform(0.5, 2.0, size=4),
        )

    def test_concat_and_slice(self, rng):
        _check_vjp(
            lambda a, b: ag.slice_last(ag.concat([a, b]), 1, 4),
            rng.normal(size=(3, 2)), rng.normal(size=(3, 3)),
        )

    def test_take_row(self, rng):
        _check_vjp(lambda x: ag.take_row(x, 2), rng.normal(size=(4, 3)))

    def test_gather_rows(self, rng):
        _check_vjp(lambda t: ag.gather_rows(t, np.array([0, 2, 2, 1])), rng.normal(size=(3, 4)))

    def test_reduce_sum(self, rng):
        _check_vjp(ag.reduce_sum, rng.normal(size=(3, 4)))

    def test_dot(self, rng):
        _check_vjp(ag.dot, rng.normal(size=5), rng.normal(size=5))

    def test_cross_entropy(self, rng):
        targets = np.array([0, 3, 1, 2])
        weights = np.array([0.5, 1.0, 0.0, 2.0])
        _check_vjp(lambda z: ag.cross_entropy(z, targets, weights), rng.normal(size=(4, 5)) * 3)


class TestRecord:
    def test_values(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=(4, 2)))
        y = tape.leaf(rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(tape.record("add", x, y).value, x.value + y.value)
        np.testing.assert_array_equal(tape.record("prefix_sum", x).value, T.prefix_sum(x.value))

    def test_one_node_per_op(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=(3, 3)))
        y = x
        for _ in range(5):
            y = ag.gelu(ag.matmul(y, x))
        assert tape.num_ops == 10
        assert len(tape) == 11


class TestBackward:
    def test_sum_gives_ones(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=5))
        grads = ag.backward(tape, ag.reduce_sum(x))
        np.testing.assert_array_equal(grads[x], np.ones(5))

    def test_self_dot(self):
        tape = _tape()
        x = tape.leaf([3.0])
        np.testing.assert_array_equal(tape.backward(ag.dot(x, x))[x], [6.0])

    def test_composite_scalar_function(self, rng):
        x0 = rng.normal(size=5)

        def build(t, x):
            y = ag.gelu(ag.square(x))
            return ag.add(ag.dot(y, x), ag.reduce_sum(ag.gelu(x)))

        tape = _tape()
        x = tape.leaf(x0)
        grad = tape.backward(build(tape, x))[x]

        def f(xv):
            t = _tape()
            return float(build(t, t.constant(xv)).value)

        assert rel_err(grad, central_diff(f, x0.copy(), range(5))) < 1e-6

    def test_prefix_gradient_is_suffix_sum(self, rng):
        z = rng.integers(-9, 9, size=(7, 3)).astype(float)
        w = rng.integers(-9, 9, size=(7, 3)).astype(float)
        tape = _tape()
        x = tape.leaf(z)
        grads = tape.backward(ag.dot(ag.prefix_sum(x), tape.constant(w)))
        np.testing.assert_array_equal(grads[x], T.suffix_sum(w))

    def test_unreached_leaf_is_zero(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=3))
        y = tape.leaf(rng.normal(size=(2, 2)))
        grads = tape.backward(ag.reduce_sum(x), wrt=[x, y])
        np.testing.assert_array_equal(grads[y], np.zeros((2, 2)))

    def test_grad_map_is_read_only(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=3))
        grads = tape.backward(ag.reduce_sum(x))
        assert x in grads
        with pytest.raises(TypeError):
            grads[x.node] = np.zeros(3)

    def test_tuple_output_slots(self, rng):
        """item() slots of one node accumulate independently"""
        def both(t, q, k, v, front):
            from slimkit.attention.linear import attn_block
            y, after = attn_block(q, k, v, front, block_size=2)
            return ag.add(ag.reduce_sum(y), ag.dot(after, t.constant(np.arange(after.shape[0], dtype=float))))

        tape = _tape()
        q = tape.leaf(rng.uniform(0.1, 1.0, size=(5, 2)))
        k = tape.leaf(rng.uniform(0.1, 1.0, size=(5, 2)))
        v = tape.leaf(rng.normal(size=(5, 3)))
        front = tape.leaf(np.zeros(2 + 3 * 2))
        grads = tape.backward(both(tape, q, k, v, front))
        assert grads[front].shape == (8,)
        assert np.all(np.isfinite(grads[q]))


class TestStopGradient:
    def test_value_passes_through(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=4))
        np.testing.assert_array_equal(ag.stop_gradient(x).value, x.value)

    def test_single_sided(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=4))
        grads = tape.backward(ag.dot(ag.stop_gradient(x), x))
        np.testing.assert_array_equal(grads[x], x.value)

    def test_blocks_everything(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=4))
        grads = tape.backward(ag.reduce_sum(ag.stop_gradient(x)), wrt=[x])
        np.testing.assert_array_equal(grads[x], np.zeros(4))

    def test_never_visits_nodes_behind_it(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=(3, 3)))
        hidden = ag.gelu(ag.matmul(x, x))
        y = tape.leaf(rng.normal(size=(3, 3)))
        root = ag.dot(ag.stop_gradient(hidden), y)
        tape.backward(root)
        assert tape.visits[hidden.node] == 0
        assert tape.visits[x.node] == 0
        assert tape.visits[y.node] == 1


class TestTapeErrors:
    def test_mixing_tapes(self, rng):
        a, b = _tape(), _tape()
        with pytest.raises(TapeError):
            ag.add(a.leaf(np.ones(2)), b.leaf(np.ones(2)))

    def test_non_scalar_root(self, rng):
        tape = _tape()
        x = tape.leaf(rng.normal(size=3))
        with pytest.raises(TapeError):
            tape.backward(ag.square(x))

    def test_evaluation_only_tape(self):
        tape = Tape(differentiable=False, stats=AllocStats(), ledger=FlopLedger())
        x = tape.leaf(np.ones(3))
        with pytest.raises(TapeError):
            tape.backward(ag.reduce_sum(x))

    def test_unknown_op(self):
        tape = _tape()
        with pytest.raises(TapeError):
            tape.record("no_such_op", tape.leaf(np.ones(2)))

    def test_shape_error_is_structured(self):
        tape = _tape()
        with pytest.raises(DimensionError):
            ag.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))

    def test_use_after_release(self):
        tape = _tape()
        tape.release()
        with pytest.raises(TapeError):
            tape.leaf(np.ones(2))


class TestRelease:
    def test_frees_saved_values(self, rng):
        stats = AllocStats()
        tape = Tape(stats=stats, ledger=FlopLedger())
        x = tape.leaf(rng.normal(size=(4, 4)))
        ag.gelu(ag.matmul(x, x))
        before = stats.live_bytes
        assert before > 0
        ag.release(tape)
        assert stats.live_bytes < before
        assert stats.live_bytes == 0
        ag.release(tape)
        assert stats.live_bytes == 0
        assert tape.released

    def test_leaf_values_not_billed(self, rng):
        stats = AllocStats()
        tape = Tape(stats=stats, ledger=FlopLedger())
        a = tape.leaf(rng.normal(size=(4, 4)))
        b = tape.leaf(rng.normal(size=(4, 4)))
        ag.matmul(a, b)
        assert stats.live_bytes == 0

    def test_evaluation_tape_saves_nothing(self, rng):
        stats = AllocStats()
        tape = Tape(differentiable=False, stats=stats, ledger=FlopLedger())
        x = tape.leaf(rng.normal(size=(4, 4)))
        ag.gelu(ag.matmul(x, x))
        assert stats.peak_bytes == 0

    def test_sequential_graphs_stay_bounded(self, rng):
        stats = AllocStats()
        ledger = FlopLedger()
        x0 = rng.normal(size=(6, 6))
        peaks = []
        for _ in range(5):
            tape = Tape(stats=stats, ledger=ledger)
            x = tape.leaf(x0)
            tape.backward(ag.reduce_sum(ag.gelu(ag.matmul(x, x))))
            one_graph = tape.live_bytes
            tape.release()
            peaks.append(stats.peak_bytes)
        assert peaks[-1] == peaks[0] == one_graph


def test_flops_billed_to_phase(rng):
    ledger = FlopLedger()
    tape = Tape(stats=AllocStats(), ledger=ledger)
    a = tape.leaf(rng.normal(size=(2, 3)))
    b = tape.leaf(rng.normal(size=(3, 4)))
    with ledger.phase("replay"):
        root = ag.reduce_sum(ag.matmul(a, b))
    tape.backward(root)
    assert ledger.counts["replay"] == 2 * 3 * 4 + 2 * 4
    assert ledger.counts["backward"] == 2 * (2 * 3 * 4) + 2 * 4
    assert "forward" not in ledger.counts
