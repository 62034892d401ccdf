"""Reverse-mode autodiff over float64 numpy arrays.

A ``Tensor`` wraps an ndarray; operations record themselves on a
``ComputationTape`` in execution order, which is already a topological
order, so ``backward`` is a single reverse sweep. One backward pass per
tape: a consumed tape raises on reuse.

Gradient buffers are accumulated out-of-place (``grad = grad + g``) so a
buffer handed to one parent is never mutated by a later contribution to
another.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError

_grad_enabled = True
_kink_watch: list[float] | None = None


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ComputationTape:
    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._tape: ComputationTape | None = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _as_values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _traced(x) -> bool:
    return isinstance(x, Tensor) and (x.requires_grad or x._tape is not None)


def _merge_tapes(parents) -> ComputationTape:
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p._tape is not None and p._tape is not tape:
            if tape is None:
                tape = p._tape
            else:
                # Two independent subgraphs join; concatenation preserves order.
                absorbed = p._tape
                for node in absorbed.nodes:
                    node._tape = tape
                tape.nodes.extend(absorbed.nodes)
    return tape if tape is not None else ComputationTape()


def _make(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(_traced(p) for p in parents):
        out.requires_grad = False
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward_fn
        out._tape = _merge_tapes(out._parents)
        out._tape.nodes.append(out)
    return out


def _accum(t, g):
    if isinstance(t, Tensor) and (t.requires_grad or t._tape is not None):
        t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor."""
    if loss.values.size != 1:
        raise InvalidArgumentError(f"loss must be a scalar, got shape {loss.values.shape}")
    tape = loss._tape
    if tape is None:
        raise InvalidArgumentError("loss is not connected to any traced computation")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
        node._backward = None


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    av, bv = _as_values(a), _as_values(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise InvalidArgumentError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def back(g):
        if isinstance(a, Tensor):
            _accum(a, g @ np.swapaxes(bv, -1, -2))
        if isinstance(b, Tensor):
            gb = np.swapaxes(av, -1, -2) @ g
            if bv.ndim < gb.ndim:  # stacked lhs against a plain weight matrix
                gb = gb.sum(axis=tuple(range(gb.ndim - bv.ndim)))
            _accum(b, gb)

    return _make(out, (a, b), back)


def add(a, b) -> Tensor:
    """Elementwise add; ``b`` may be a trailing-axes bias of ``a``."""
    av, bv = _as_values(a), _as_values(b)
    if bv.ndim > av.ndim or av.shape[av.ndim - bv.ndim:] != bv.shape:
        raise InvalidArgumentError(f"add shape mismatch: {av.shape} + {bv.shape}")
    out = av + bv

    def back(g):
        _accum(a, g)
        if isinstance(b, Tensor):
            gb = g.sum(axis=tuple(range(g.ndim - bv.ndim))) if bv.ndim < g.ndim else g
            _accum(b, gb)

    return _make(out, (a, b), back)


def scale(a, factor: float) -> Tensor:
    av = _as_values(a)

    def back(g):
        _accum(a, g * factor)

    return _make(av * factor, (a,), back)


def mul(a, b) -> Tensor:
    av, bv = _as_values(a), _as_values(b)
    if av.shape != bv.shape:
        raise InvalidArgumentError(f"mul shape mismatch: {av.shape} * {bv.shape}")

    def back(g):
        _accum(a, g * bv)
        if isinstance(b, Tensor):
            _accum(b, g * av)

    return _make(av * bv, (a, b), back)


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted; -inf entries give weight 0."""
    av = _as_values(a)
    shifted = av - np.max(av, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - inner))

    return _make(out, (a,), back)


def log_softmax(a) -> Tensor:
    av = _as_values(a)
    shifted = av - np.max(av, axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def back(g):
        _accum(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), back)


def relu(a) -> Tensor:
    av = _as_values(a)
    if _kink_watch is not None and av.size:
        _kink_watch.append(float(np.min(np.abs(av))))
    mask = av > 0

    def back(g):
        _accum(a, g * mask)

    return _make(av * mask, (a,), back)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain*x + bias."""
    av, gv, bv = _as_values(a), _as_values(gain), _as_values(bias)
    if gv.shape != av.shape[-1:] or bv.shape != av.shape[-1:]:
        raise InvalidArgumentError(
            f"layer_norm gain/bias {gv.shape}/{bv.shape} must match last axis of {av.shape}"
        )
    mean = av.mean(axis=-1, keepdims=True)
    centered = av - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gv + bv

    def back(g):
        dim = av.shape[-1]
        if isinstance(gain, Tensor):
            _accum(gain, (g * normed).reshape(-1, dim).sum(axis=0))
        if isinstance(bias, Tensor):
            _accum(bias, g.reshape(-1, dim).sum(axis=0))
        gn = g * gv
        _accum(a, inv * (gn - gn.mean(axis=-1, keepdims=True)
                         - normed * (gn * normed).mean(axis=-1, keepdims=True)))

    return _make(out, (a, gain, bias), back)


def embedding_lookup(table, indices) -> Tensor:
    tv = _as_values(table)
    idx = np.asarray(indices)
    out = tv[idx]

    def back(g):
        if isinstance(table, Tensor):
            gt = np.zeros_like(tv)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _make(out, (table,), back)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (eval mode)."""
    if rng is None or rate == 0.0:
        return a if isinstance(a, Tensor) else Tensor(a)
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    av = _as_values(a)
    keep = (rng.random(av.shape) >= rate) / (1.0 - rate)

    def back(g):
        _accum(a, g * keep)

    return _make(av * keep, (a,), back)


def concat(parts, axis: int = 0) -> Tensor:
    vals = [_as_values(p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    out = np.concatenate(vals, axis=axis)
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(part, g[tuple(sl)])

    return _make(out, tuple(parts), back)


def mask_fill(a, mask, value: float) -> Tensor:
    av = _as_values(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != av.shape[av.ndim - m.ndim:]:
        raise InvalidArgumentError(f"mask shape {m.shape} incompatible with {av.shape}")
    out = np.where(m, value, av)

    def back(g):
        _accum(a, np.where(m, 0.0, g))

    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    av = _as_values(a)

    def back(g):
        _accum(a, g.reshape(av.shape))

    return _make(av.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    av = _as_values(a)
    inverse = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inverse))

    return _make(av.transpose(axes), (a,), back)


def broadcast_to(a, shape) -> Tensor:
    av = _as_values(a)
    out = np.broadcast_to(av, shape)
    extra = len(shape) - av.ndim
    summed = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(av.shape) if s == 1 and shape[i + extra] != 1
    )

    def back(g):
        _accum(a, g.sum(axis=summed).reshape(av.shape) if summed else g)

    return _make(out.copy(), (a,), back)


def reduce_sum(a, axis=None) -> Tensor:
    av = _as_values(a)
    out = av.sum(axis=axis)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, av.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), av.shape).copy())

    return _make(out, (a,), back)


def reduce_mean(a, axis=None) -> Tensor:
    av = _as_values(a)
    count = av.size if axis is None else av.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / count)


def gather_last(a, indices) -> Tensor:
    """out[...] = a[..., indices[...]] for an index array over the last axis."""
    av = _as_values(a)
    idx = np.asarray(indices)
    out = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def back(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        _accum(a, ga)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# gradient verification


@contextmanager
def _watch_kinks():
    global _kink_watch
    prev = _kink_watch
    _kink_watch = []
    try:
        yield _kink_watch
    finally:
        _kink_watch = prev


def gradcheck(
    func,
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients of ``func()`` with central differences.

    ``func`` must return a scalar Tensor computed from ``params`` (dropout
    disabled). Coordinates whose perturbed forwards pass a relu input within
    10*h of zero are excluded (kink filter). When ``max_coords_per_tensor``
    is set, a seeded random subset of coordinates is checked per tensor.

    Returns report dict: per-tensor {max_rel_error, checked, skipped} plus
    overall ``pass`` / ``max_rel_error``.
    """
    loss = func()
    if not np.isfinite(loss.values).all():
        raise NumericalFailureError("non-finite loss in gradcheck forward pass")
    backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        p.grad = None

    rng = np.random.default_rng(seed)
    kink_tol = 10.0 * h
    report: dict = {"tensors": {}, "h": h, "tol": tol}
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        max_err, skipped = 0.0, 0
        for c in coords:
            orig = flat[c]
            with no_grad(), _watch_kinks() as kinks:
                flat[c] = orig + h
                hi = float(func().values)
                flat[c] = orig - h
                lo = float(func().values)
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalFailureError(f"non-finite forward while probing {name}[{c}]")
            if kinks and min(kinks) < kink_tol:
                skipped += 1
                continue
            numeric = (hi - lo) / (2.0 * h)
            ana = analytic[name].reshape(-1)[c]
            err = abs(ana - numeric) / max(1.0, abs(ana))
            max_err = max(max_err, err)
        report["tensors"][name] = {
            "max_rel_error": max_err,
            "checked": int(len(coords) - skipped),
            "skipped": skipped,
        }
        worst = max(worst, max_err)
    report["max_rel_error"] = worst
    report["pass"] = worst < tol
    return report
