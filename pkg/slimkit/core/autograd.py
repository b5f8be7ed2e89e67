"""
Reverse-mode differentiation over a define-by-run tape

A Tape is an append-only list of nodes in topological order. Each op kind
is an OpRule registered by name: a forward that returns the output and the
values its vector-Jacobian product needs, the VJP itself, and an analytic
cost used by the FLOP ledger. Saved values are billed to the tape's
AllocStats (values of leaves excluded, since parameters and inputs are
persistent) and handed back on release().
"""
import logging
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .instrument import AllocStats, FlopLedger, current_ledger, current_stats
from ..utils.errors import DimensionError, TapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpRule:
    forward: Callable[["Tape", Tuple[Any, ...], Dict[str, Any]], Tuple[Any, Tuple[Any, ...]]]
    vjp: Callable[["Tape", Tuple[Any, ...], Any, Dict[str, Any]], Tuple[Any, ...]]
    cost: Callable[[Tuple[Any, ...], Any, Dict[str, Any]], Tuple[int, int]]


_RULES: Dict[str, OpRule] = {}


def _free(values, out, attrs) -> Tuple[int, int]:
    return 0, 0


def register_op(kind: str, forward, vjp, cost=_free) -> None:
    """Make `kind` recordable on any tape"""
    _RULES[kind] = OpRule(forward=forward, vjp=vjp, cost=cost)


@dataclass
class _Node:
    kind: str
    parents: Tuple[int, ...]
    attrs: Dict[str, Any]
    requires_grad: bool
    phase: str
    bwd_flops: int = 0
    saved: Optional[Tuple[Any, ...]] = None
    out_shapes: Optional[Tuple[Tuple[int, ...], ...]] = None


@dataclass(frozen=True)
class _Part:
    """Gradient for one slot of a tuple-valued node"""
    index: int
    grad: np.ndarray


class Var:
    __slots__ = ("tape", "node", "value", "requires_grad")

    def __init__(self, tape: "Tape", node: int, value: Any, requires_grad: bool):
        self.tape = tape
        self.node = node
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        shape = tuple(v.shape for v in self.value) if isinstance(self.value, tuple) else self.value.shape
        return f"Var(node={self.node}, shape={shape}, requires_grad={self.requires_grad})"


class GradMap(Mapping):
    """Read-only node-id -> gradient mapping; also indexable by Var"""

    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = MappingProxyType(grads)

    def __getitem__(self, key: Union[int, Var]) -> np.ndarray:
        if isinstance(key, Var):
            key = key.node
        return self._grads[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def __contains__(self, key) -> bool:
        if isinstance(key, Var):
            key = key.node
        return key in self._grads


class Tape:
    """
    Append-only computation record

    With `differentiable=False` the tape only evaluates: nothing is saved
    and backward() is refused.
    """

    def __init__(
        self,
        differentiable: bool = True,
        stats: Optional[AllocStats] = None,
        ledger: Optional[FlopLedger] = None,
    ):
        self.differentiable = differentiable
        self.stats = stats if stats is not None else current_stats()
        self.ledger = ledger if ledger is not None else current_ledger()
        self.nodes: List[_Node] = []
        self.live_bytes = 0
        self.clamp_events = 0
        self.released = False
        self.visits: Counter = Counter()
        self._leaf_values: Dict[int, Any] = {}
        self._persistent_ids: Dict[int, Any] = {}
        self._counted: Dict[int, Any] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def num_ops(self) -> int:
        return sum(1 for node in self.nodes if node.kind != "leaf")

    def _check_alive(self) -> None:
        if self.released:
            raise TapeError("tape already released")

    def leaf(self, value, requires_grad: bool = True) -> Var:
        self._check_alive()
        value = T.as_tensor(value)
        requires_grad = requires_grad and self.differentiable
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), {}, requires_grad, self.ledger.current))
        self._leaf_values[nid] = value
        self._persistent_ids[id(value)] = value
        return Var(self, nid, value, requires_grad)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, kind: str, *inputs: Var, **attrs) -> Var:
        self._check_alive()
        rule = _RULES.get(kind)
        if rule is None:
            raise TapeError(f"unknown op kind: {kind}")
        for v in inputs:
            if not isinstance(v, Var):
                raise TapeError(f"{kind}: inputs must be Vars, got {type(v).__name__}")
            if v.tape is not self:
                raise TapeError(f"{kind}: input belongs to a different tape")

        values = tuple(v.value for v in inputs)
        out, saved = rule.forward(self, values, attrs)
        fwd_flops, bwd_flops = rule.cost(values, out, attrs)
        self.ledger.charge(fwd_flops)

        requires_grad = (
            self.differentiable
            and kind != "stop_gradient"
            and any(v.requires_grad for v in inputs)
        )
        node = _Node(
            kind=kind,
            parents=tuple(v.node for v in inputs),
            attrs=attrs,
            requires_grad=requires_grad,
            phase=self.ledger.current,
            bwd_flops=bwd_flops,
        )
        if isinstance(out, tuple):
            node.out_shapes = tuple(o.shape for o in out)
        if requires_grad:
            node.saved = saved
            self._account(saved)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, out, requires_grad)

    def _account(self, saved: Tuple[Any, ...]) -> None:
        for obj in saved:
            if not isinstance(obj, np.ndarray):
                continue
            key = id(obj)
            if key in self._persistent_ids or key in self._counted:
                continue
            self._counted[key] = obj
            self.live_bytes += obj.nbytes
            self.stats.alloc(obj.nbytes)

    def note_clamps(self, count: int) -> None:
        if count:
            self.clamp_events += int(count)
            self.stats.clamped(count)
            log.debug("denominator guard engaged on %d rows", count)

    def backward(self, root: Var, wrt: Optional[Sequence[Var]] = None) -> GradMap:
        """
        Gradient of a scalar root with respect to leaves

        Returns an entry for every leaf in `wrt` (default: every leaf that
        requires grad), zero-filled when the root does not depend on it.
        """
        self._check_alive()
        if not self.differentiable:
            raise TapeError("backward on a non-differentiable tape")
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if isinstance(root.value, tuple) or np.size(root.value) != 1:
            raise TapeError(f"backward needs a scalar root, got shape {np.shape(root.value)}")

        needed = set()
        stack = [root.node] if root.requires_grad else []
        while stack:
            nid = stack.pop()
            if nid in needed:
                continue
            needed.add(nid)
            for pid in self.nodes[nid].parents:
                if self.nodes[pid].requires_grad and pid not in needed:
                    stack.append(pid)

        grads: Dict[int, Any] = {root.node: np.ones_like(root.value)}
        leaf_grads: Dict[int, np.ndarray] = {}
        for nid in sorted(needed, reverse=True):
            node = self.nodes[nid]
            self.visits[nid] += 1
            g = grads.pop(nid, None)
            if node.kind == "leaf":
                if g is not None:
                    leaf_grads[nid] = g
                continue
            if g is None:
                continue
            if node.out_shapes is not None:
                g = tuple(np.zeros(s) if gi is None else gi for gi, s in zip(g, node.out_shapes))

            parent_grads = _RULES[node.kind].vjp(self, node.saved, g, node.attrs)
            self.ledger.add("stitch" if node.phase == "stitch" else "backward", node.bwd_flops)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None or pid not in needed:
                    continue
                self._accumulate(grads, pid, pg)

        if wrt is None:
            targets = [nid for nid, n in enumerate(self.nodes) if n.kind == "leaf" and n.requires_grad]
        else:
            targets = [v.node for v in wrt]
        result = {}
        for nid in targets:
            if nid in leaf_grads:
                result[nid] = leaf_grads[nid]
            else:
                result[nid] = np.zeros_like(self._leaf_values[nid])
        return GradMap(result)

    def _accumulate(self, grads: Dict[int, Any], pid: int, pg: Any) -> None:
        if isinstance(pg, _Part):
            slots = grads.get(pid)
            if slots is None:
                slots = [None] * len(self.nodes[pid].out_shapes)
                grads[pid] = slots
            if slots[pg.index] is None:
                slots[pg.index] = np.array(pg.grad, dtype=np.float64, copy=True)
            else:
                slots[pg.index] += pg.grad
            return
        existing = grads.get(pid)
        if existing is None:
            grads[pid] = np.array(pg, dtype=np.float64, copy=True)
        else:
            existing += pg

    def release(self) -> None:
        """Free every saved intermediate; idempotent"""
        if self.released:
            return
        for node in self.nodes:
            node.saved = None
        self.stats.free(self.live_bytes)
        self.live_bytes = 0
        self._counted.clear()
        self._persistent_ids.clear()
        self.released = True


def backward(tape: Tape, root: Var, wrt: Optional[Sequence[Var]] = None) -> GradMap:
    return tape.backward(root, wrt)


def release(tape: Tape) -> None:
    tape.release()


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# -- rules ------------------------------------------------------------------

def _add_fwd(tape, values, attrs):
    x, y = values
    if x.shape != y.shape and not (x.ndim == 2 and y.ndim == 1 and y.shape[0] == x.shape[1]):
        raise DimensionError("add", f"{x.shape} or row bias ({x.shape[-1]},)", y.shape)
    return x + y, (x.shape != y.shape,)


def _add_vjp(tape, saved, g, attrs):
    (broadcast,) = saved
    return g, (g.sum(axis=0) if broadcast else g)


def _matmul_fwd(tape, values, attrs):
    a, b = values
    if b.ndim != 2:
        raise DimensionError("matmul", "2-D right operand", b.shape)
    return T.matmul(a, b), (a, b)


def _matmul_vjp(tape, saved, g, attrs):
    a, b = saved
    return g @ b.T, a.T @ g


def _matmul_cost(values, out, attrs):
    a, b = values
    n = a.shape[0] * a.shape[1] * b.shape[1]
    return n, 2 * n


def _prefix_fwd(tape, values, attrs):
    z = values[0]
    init = values[1] if len(values) > 1 else None
    return T.prefix_sum(z, init), (len(values) > 1,)


def _prefix_vjp(tape, saved, g, attrs):
    (seeded,) = saved
    gz = T.suffix_sum(g)
    return (gz, gz[0].copy()) if seeded else (gz,)


def _suffix_fwd(tape, values, attrs):
    return T.suffix_sum(values[0]), ()


def _suffix_vjp(tape, saved, g, attrs):
    return (T.prefix_sum(g),)


def _scan_cost(values, out, attrs):
    return values[0].size, values[0].size


def _ln_fwd(tape, values, attrs):
    x, gain, bias = values
    out, xhat, rstd = T.layer_norm_parts(x, gain, bias, attrs["eps"])
    return out, (xhat, rstd, gain)


def _ln_vjp(tape, saved, g, attrs):
    xhat, rstd, gain = saved
    gxhat = g * gain
    gx = rstd[:, None] * (
        gxhat
        - gxhat.mean(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
    )
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _ln_cost(values, out, attrs):
    return 7 * out.size, 10 * out.size


def _gelu_fwd(tape, values, attrs):
    x = values[0]
    return T.gelu(x), (x,)


def _gelu_vjp(tape, saved, g, attrs):
    return (g * T.gelu_grad(saved[0]),)


def _gelu_cost(values, out, attrs):
    return 8 * out.size, 12 * out.size


def _square_fwd(tape, values, attrs):
    x = values[0]
    return x * x, (x,)


def _square_vjp(tape, saved, g, attrs):
    return (2.0 * saved[0] * g,)


def _square_cost(values, out, attrs):
    return out.size, 2 * out.size


def _outer_fwd(tape, values, attrs):
    v, k = values
    return T.outer_rows(v, k), (v, k)


def _outer_vjp(tape, saved, g, attrs):
    v, k = saved
    g3 = g.reshape(v.shape[0], v.shape[1], k.shape[1])
    return np.einsum("bim,bm->bi", g3, k), np.einsum("bim,bi->bm", g3, v)


def _outer_cost(values, out, attrs):
    return out.size, 2 * out.size


def _matvec_fwd(tape, values, attrs):
    r, q = values
    return T.row_matvec(r, q), (r, q)


def _matvec_vjp(tape, saved, g, attrs):
    r, q = saved
    r3 = r.reshape(r.shape[0], -1, q.shape[1])
    gr = (g[:, :, None] * q[:, None, :]).reshape(r.shape)
    return gr, np.einsum("bim,bi->bm", r3, g)


def _matvec_cost(values, out, attrs):
    return values[0].size, 2 * values[0].size


def _rowdot_fwd(tape, values, attrs):
    s, q = values
    return T.row_dot(s, q), (s, q)


def _rowdot_vjp(tape, saved, g, attrs):
    s, q = saved
    return g[:, None] * q, g[:, None] * s


def _rowdot_cost(values, out, attrs):
    return values[0].size, 2 * values[0].size


def _gdiv_fwd(tape, values, attrs):
    n, den = values
    y, safe, clamped = T.guarded_div(n, den, attrs["floor"])
    tape.note_clamps(int(clamped.sum()))
    return y, (y, safe, clamped)


def _gdiv_vjp(tape, saved, g, attrs):
    y, safe, clamped = saved
    gn = g / safe[:, None]
    gden = -(g * y).sum(axis=1) / safe
    gden[clamped] = 0.0
    return gn, gden


def _gdiv_cost(values, out, attrs):
    return out.size, 3 * out.size


def _concat_fwd(tape, values, attrs):
    axis = attrs.get("axis", -1)
    return np.concatenate(values, axis=axis), (tuple(v.shape[axis] for v in values),)


def _concat_vjp(tape, saved, g, attrs):
    (sizes,) = saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=attrs.get("axis", -1)))


def _slice_fwd(tape, values, attrs):
    x = values[0]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError("slice", f"0 <= start <= stop <= {x.shape[-1]}", (start, stop))
    return np.ascontiguousarray(x[..., start:stop]), (x.shape,)


def _slice_vjp(tape, saved, g, attrs):
    (shape,) = saved
    out = np.zeros(shape)
    out[..., attrs["start"]:attrs["stop"]] = g
    return (out,)


def _take_row_fwd(tape, values, attrs):
    x = values[0]
    return x[attrs["index"]].copy(), (x.shape,)


def _take_row_vjp(tape, saved, g, attrs):
    (shape,) = saved
    out = np.zeros(shape)
    out[attrs["index"]] = g
    return (out,)


def _gather_fwd(tape, values, attrs):
    table = values[0]
    return table[attrs["indices"]], (table.shape,)


def _gather_vjp(tape, saved, g, attrs):
    (shape,) = saved
    out = np.zeros(shape)
    np.add.at(out, attrs["indices"], g)
    return (out,)


def _gather_cost(values, out, attrs):
    return 0, out.size


def _sum_fwd(tape, values, attrs):
    x = values[0]
    return np.asarray(x.sum()), (x.shape,)


def _sum_vjp(tape, saved, g, attrs):
    (shape,) = saved
    return (np.full(shape, float(g)),)


def _sum_cost(values, out, attrs):
    return values[0].size, values[0].size


def _dot_fwd(tape, values, attrs):
    x, y = values
    _check_same_shape("dot", x, y)
    return np.asarray(np.sum(x * y)), (x, y)


def _dot_vjp(tape, saved, g, attrs):
    x, y = saved
    g = float(g)
    return g * y, g * x


def _dot_cost(values, out, attrs):
    return values[0].size, 2 * values[0].size


def _xent_fwd(tape, values, attrs):
    """Weighted sum over rows of -log softmax(logits)[target]"""
    logits = values[0]
    targets, weights = attrs["targets"], attrs["weights"]
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
        raise DimensionError("cross_entropy", f"B x V logits with B = {targets.shape}", logits.shape)
    logp = T.log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -np.sum(weights * logp[rows, targets])
    return np.asarray(loss), (np.exp(logp),)


def _xent_vjp(tape, saved, g, attrs):
    (probs,) = saved
    targets, weights = attrs["targets"], attrs["weights"]
    grad = probs * weights[:, None]
    grad[np.arange(probs.shape[0]), targets] -= weights
    return (grad * float(g),)


def _xent_cost(values, out, attrs):
    return 4 * values[0].size, 2 * values[0].size


def _identity_fwd(tape, values, attrs):
    return values[0], ()


def _no_vjp(tape, saved, g, attrs):
    return (None,)


def _item_fwd(tape, values, attrs):
    return values[0][attrs["index"]], ()


def _item_vjp(tape, saved, g, attrs):
    return (_Part(attrs["index"], g),)


register_op("add", _add_fwd, _add_vjp, lambda v, o, a: (o.size, o.size))
register_op("matmul", _matmul_fwd, _matmul_vjp, _matmul_cost)
register_op("prefix_sum", _prefix_fwd, _prefix_vjp, _scan_cost)
register_op("suffix_sum", _suffix_fwd, _suffix_vjp, _scan_cost)
register_op("layer_norm", _ln_fwd, _ln_vjp, _ln_cost)
register_op("gelu", _gelu_fwd, _gelu_vjp, _gelu_cost)
register_op("square", _square_fwd, _square_vjp, _square_cost)
register_op("outer_rows", _outer_fwd, _outer_vjp, _outer_cost)
register_op("row_matvec", _matvec_fwd, _matvec_vjp, _matvec_cost)
register_op("row_dot", _rowdot_fwd, _rowdot_vjp, _rowdot_cost)
register_op("guarded_div", _gdiv_fwd, _gdiv_vjp, _gdiv_cost)
register_op("concat", _concat_fwd, _concat_vjp)
register_op("slice", _slice_fwd, _slice_vjp)
register_op("take_row", _take_row_fwd, _take_row_vjp)
register_op("gather_rows", _gather_fwd, _gather_vjp, _gather_cost)
register_op("sum", _sum_fwd, _sum_vjp, _sum_cost)
register_op("dot", _dot_fwd, _dot_vjp, _dot_cost)
register_op("cross_entropy", _xent_fwd, _xent_vjp, _xent_cost)
register_op("stop_gradient", _identity_fwd, _no_vjp)
register_op("item", _item_fwd, _item_vjp)


# -- functional front end ------------------------------------------------------

def add(x: Var, y: Var) -> Var:
    return x.tape.record("add", x, y)


def matmul(a: Var, b: Var) -> Var:
    return a.tape.record("matmul", a, b)


def prefix_sum(z: Var, init: Optional[Var] = None) -> Var:
    if init is None:
        return z.tape.record("prefix_sum", z)
    return z.tape.record("prefix_sum", z, init)


def suffix_sum(z: Var) -> Var:
    return z.tape.record("suffix_sum", z)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float) -> Var:
    return x.tape.record("layer_norm", x, gain, bias, eps=eps)


def gelu(x: Var) -> Var:
    return x.tape.record("gelu", x)


def square(x: Var) -> Var:
    return x.tape.record("square", x)


def outer_rows(v: Var, k: Var) -> Var:
    return v.tape.record("outer_rows", v, k)


def row_matvec(r: Var, q: Var) -> Var:
    return r.tape.record("row_matvec", r, q)


def row_dot(s: Var, q: Var) -> Var:
    return s.tape.record("row_dot", s, q)


def guarded_div(n: Var, den: Var, floor: float) -> Var:
    return n.tape.record("guarded_div", n, den, floor=floor)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    return xs[0].tape.record("concat", *xs, axis=axis)


def slice_last(x: Var, start: int, stop: int) -> Var:
    return x.tape.record("slice", x, start=start, stop=stop)


def take_row(x: Var, index: int) -> Var:
    return x.tape.record("take_row", x, index=index)


def gather_rows(table: Var, indices: np.ndarray) -> Var:
    return table.tape.record("gather_rows", table, indices=np.asarray(indices, dtype=np.int64))


def reduce_sum(x: Var) -> Var:
    return x.tape.record("sum", x)


def dot(x: Var, y: Var) -> Var:
    return x.tape.record("dot", x, y)


def cross_entropy(logits: Var, targets: np.ndarray, weights: np.ndarray) -> Var:
    return logits.tape.record(
        "cross_entropy",
        logits,
        targets=np.asarray(targets, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
    )


def stop_gradient(x: Var) -> Var:
    return x.tape.record("stop_gradient", x)


def item(x: Var, index: int) -> Var:
    return x.tape.record("item", x, index=index)
