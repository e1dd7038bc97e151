"""Differentiable primitive operations.

Every function here computes its result eagerly on NumPy arrays and,
when a tape is active and the result depends on a trainable tensor,
appends one record with an exact derivative rule. Backward closures
always return freshly allocated arrays (or views that the sweep never
mutates), so gradient accumulation never aliases saved state.

Reductions (softmax, norms, cosine, layer norm) act over the last
axis; matmul follows NumPy broadcasting over leading batch axes.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError, ShapeError
from .tensor import Tensor, active_tape

NORM_GUARD = 1e-12      # zero-norm guard for l2 norms / cosine
LAYER_NORM_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing over broadcast axes."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must have ndim >= 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {ad.shape} @ {bd.shape}")
    # batched operand against a shared 2-D weight: collapse the batch
    # axes so forward and both backward products run as single GEMMs
    collapsed = bd.ndim == 2 and ad.ndim > 2
    if collapsed:
        out_d = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out_d = ad @ bd
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            ga = gb = None
            if a.requires:
                if collapsed:
                    ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
                else:
                    ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
            if b.requires:
                if collapsed:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
            return ga, gb
        tape.append("matmul", (a, b), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out_d = ad + bd
    except ValueError as exc:
        raise ShapeError(f"add: shapes {ad.shape} and {bd.shape} do not broadcast") from exc
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            ga = _unbroadcast(g, ad.shape) if a.requires else None
            gb = _unbroadcast(g, bd.shape) if b.requires else None
            return ga, gb
        tape.append("add", (a, b), out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out_d = ad - bd
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {ad.shape} and {bd.shape} do not broadcast") from exc
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            ga = _unbroadcast(g, ad.shape) if a.requires else None
            gb = _unbroadcast(-g, bd.shape) if b.requires else None
            return ga, gb
        tape.append("sub", (a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out_d = ad * bd
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {ad.shape} and {bd.shape} do not broadcast") from exc
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            ga = _unbroadcast(g * bd, ad.shape) if a.requires else None
            gb = _unbroadcast(g * ad, bd.shape) if b.requires else None
            return ga, gb
        tape.append("mul", (a, b), out, backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out_d = ad / bd
    except ValueError as exc:
        raise ShapeError(f"div: shapes {ad.shape} and {bd.shape} do not broadcast") from exc
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            ga = _unbroadcast(g / bd, ad.shape) if a.requires else None
            gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires else None
            return ga, gb
        tape.append("div", (a, b), out, backward)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            return (g * factor,)
        tape.append("scale", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    out_d = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(out_d, any(p.requires for p in parts))
    tape = active_tape()
    if tape is not None and out.requires:
        sizes = [p.data.shape[axis] for p in parts]
        bounds = np.cumsum(sizes)[:-1]
        needs = [p.requires for p in parts]

        def backward(g):
            pieces = np.split(g, bounds, axis=axis)
            return tuple(p if need else None for p, need in zip(pieces, needs))
        tape.append("concat", tuple(parts), out, backward)
    return out


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Slice `a` into consecutive blocks of the given extents along `axis`."""
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, bounds, axis=axis)
    outs = [Tensor(p, a.requires) for p in pieces]
    tape = active_tape()
    if tape is not None and a.requires:
        starts = [0] + list(bounds)
        for piece, start, size in zip(outs, starts, sizes):
            index = [slice(None)] * a.data.ndim
            index[axis] = slice(start, start + size)
            index = tuple(index)

            def backward(g, _index=index):
                full = np.zeros_like(a.data)
                full[_index] = g
                return (full,)
            tape.append("slice", (a,), piece, backward)
    return outs


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        original = a.data.shape

        def backward(g):
            return (g.reshape(original),)
        tape.append("reshape", (a,), out, backward)
    return out


def swap_last_axes(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"swap_last_axes: ndim >= 2 required, got {a.shape}")
    out = Tensor(a.data.swapaxes(-1, -2), a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            return (g.swapaxes(-1, -2),)
        tape.append("swap_last_axes", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable for both signs: exp of a non-positive argument only
    t = np.exp(-np.abs(x))
    out_d = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            return (g * out_d * (1.0 - out_d),)
        tape.append("sigmoid", (a,), out, backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out_d = np.tanh(a.data)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            return (g * (1.0 - out_d * out_d),)
        tape.append("tanh", (a,), out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    out_d = np.maximum(a.data, 0)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        mask = a.data > 0

        def backward(g):
            return (g * mask,)
        tape.append("relu", (a,), out, backward)
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out_d = np.maximum(a.data, floor)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        mask = a.data > floor

        def backward(g):
            return (g * mask,)
        tape.append("clamp_min", (a,), out, backward)
    return out


def sqrt(a: Tensor) -> Tensor:
    out_d = np.sqrt(a.data)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            return (g * (0.5 / out_d),)
        tape.append("sqrt", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    x = a.data
    if x.shape[-1] == 0:
        raise ShapeError("softmax_rows: empty rows have no distribution")
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out_d = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            inner = (g * out_d).sum(axis=-1, keepdims=True)
            return (out_d * (g - inner),)
        tape.append("row_softmax", (a,), out, backward)
    return out


def l2_norm(a: Tensor, keepdims: bool = True) -> Tensor:
    """Euclidean norm over the last axis; gradient is 0 at the origin."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    out_d = norm if keepdims else norm[..., 0]
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            if not keepdims:
                g = g[..., None]
            return (g * x / np.maximum(norm, NORM_GUARD),)
        tape.append("l2_norm", (a,), out, backward)
    return out


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis with broadcast leading axes.

    A zero-norm operand yields similarity 0 and propagates no gradient
    through either side of that pair.
    """
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-1]:
        raise ShapeError(f"cosine: last-axis widths disagree, {ad.shape} vs {bd.shape}")
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    valid = (na > NORM_GUARD) & (nb > NORM_GUARD)
    denom = na * nb + NORM_GUARD
    out_d = np.where(valid, dot / denom, 0.0)
    out = Tensor(out_d, a.requires or b.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            gv = np.where(valid, g / denom, 0.0)[..., None]
            cos = out_d[..., None]
            na_s = np.maximum(na, NORM_GUARD)[..., None]
            nb_s = np.maximum(nb, NORM_GUARD)[..., None]
            ga = gb = None
            if a.requires:
                ga = _unbroadcast(gv * (bd - cos * (nb_s / na_s) * ad), ad.shape)
            if b.requires:
                gb = _unbroadcast(gv * (ad - cos * (na_s / nb_s) * bd), bd.shape)
            return ga, gb
        tape.append("cosine", (a, b), out, backward)
    return out


def mean_pairwise_cosine(a: Tensor) -> Tensor:
    """Mean cosine similarity over all row pairs of the last two axes.

    For rows r_i, equals ||sum_i r_i/||r_i||||^2 / n^2, including the
    i == j self terms. Zero-norm rows contribute 0 to every pair and
    receive no gradient, matching the guarded `cosine` primitive.
    """
    x = a.data
    if x.ndim < 2:
        raise ShapeError(f"mean_pairwise_cosine: ndim >= 2 required, got {x.shape}")
    n = x.shape[-2]
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    valid = norms > NORM_GUARD
    unit = np.where(valid, x / np.maximum(norms, NORM_GUARD), 0.0)
    total = unit.sum(axis=-2)                        # (..., width)
    out_d = (total * total).sum(axis=-1) / float(n * n)
    out = Tensor(out_d, a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            # d/dz_i of ||sum u||^2 with u = z/||z||: project the pulled-back
            # direction onto the tangent of the unit sphere, then rescale
            pulled = (2.0 / (n * n)) * g[..., None, None] * total[..., None, :]
            radial = (pulled * unit).sum(axis=-1, keepdims=True)
            grad = (pulled - radial * unit) / np.maximum(norms, NORM_GUARD)
            return (np.where(valid, grad, 0.0),)
        tape.append("mean_pairwise_cosine", (a,), out, backward)
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_d = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(np.asarray(out_d), a.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        in_shape = a.data.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).copy(),)
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                for ax in sorted(ax % len(in_shape) for ax in axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, in_shape).copy(),)
        tape.append("reduce_sum", (a,), out, backward)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    total = reduce_sum(a, axis=axis, keepdims=keepdims)
    return scale(total, 1.0 / count)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    width = x.data.shape[-1]
    if gain.data.shape != (width,) or bias.data.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = Tensor(normed * gain.data + bias.data, x.requires or gain.requires or bias.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        def backward(g):
            gx = ggain = gbias = None
            if gain.requires:
                ggain = (g * normed).reshape(-1, width).sum(axis=0)
            if bias.requires:
                gbias = g.reshape(-1, width).sum(axis=0)
            if x.requires:
                gn = g * gain.data
                gx = inv_std * (
                    gn
                    - gn.mean(axis=-1, keepdims=True)
                    - normed * (gn * normed).mean(axis=-1, keepdims=True)
                )
            return gx, ggain, gbias
        tape.append("layer_norm", (x, gain, bias), out, backward)
    return out


# ---------------------------------------------------------------------------
# lookup and loss
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer id; ids are not differentiable."""
    ids = np.asarray(ids)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise DataError(
            f"embedding_lookup: ids must lie in [0, {rows}), got range "
            f"[{ids.min()}, {ids.max()}]")
    out = Tensor(table.data[ids], table.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        width = table.data.shape[1]

        def backward(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
            return (gt,)
        tape.append("embedding_lookup", (table,), out, backward)
    return out


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all target positions, in nats."""
    targets = np.asarray(targets)
    x = logits.data
    if x.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {x.shape} do not align with targets {targets.shape}")
    vocab = x.shape[-1]
    if vocab == 0:
        raise ShapeError("cross_entropy: empty class axis")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise DataError(f"cross_entropy: target ids must lie in [0, {vocab})")
    flat = x.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    count = tgt.shape[0]
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_z - shifted[np.arange(count), tgt]
    out = Tensor(np.asarray(nll.mean(), dtype=x.dtype), logits.requires)
    tape = active_tape()
    if tape is not None and out.requires:
        probs = np.exp(shifted - log_z[:, None])

        def backward(g):
            gl = probs.copy()
            gl[np.arange(count), tgt] -= 1.0
            gl *= float(g) / count
            return (gl.reshape(x.shape),)
        tape.append("cross_entropy_from_logits", (logits,), out, backward)
    return out


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator,
                 training: bool = True, dtype=None) -> Tensor:
    """Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).

    Evaluation mode (training=False) returns all ones so no rescale is
    ever needed at inference.
    """
    if not 0.0 <= rate < 1.0:
        raise DataError(f"dropout_mask: rate must lie in [0, 1), got {rate}")
    from .tensor import TRAIN_DTYPE
    dtype = dtype if dtype is not None else TRAIN_DTYPE
    if not training or rate == 0.0:
        return Tensor(np.ones(shape, dtype=dtype), requires=False)
    keep = (rng.random(shape) >= rate).astype(dtype)
    keep /= (1.0 - rate)
    return Tensor(keep, requires=False)


def dropout_apply(a: Tensor, mask: Tensor) -> Tensor:
    """Apply a precomputed dropout mask (elementwise product)."""
    return mul(a, mask)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "concat": concat,
    "split": split,
    "reshape": reshape,
    "swap_last_axes": swap_last_axes,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "clamp_min": clamp_min,
    "sqrt": sqrt,
    "row_softmax": softmax_rows,
    "l2_norm": l2_norm,
    "cosine": cosine,
    "mean_pairwise_cosine": mean_pairwise_cosine,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "dropout_apply": dropout_apply,
    "cross_entropy_from_logits": cross_entropy_from_logits,
}


def forward_primitive(op: str, inputs, **kwargs) -> Tensor:
    """Apply a primitive by id. Unknown ids raise ShapeError."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ShapeError(f"forward_primitive: unknown primitive id {op!r}")
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)
