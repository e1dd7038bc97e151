"""Reverse sweep, gradient clipping, and the finite-difference checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ShapeError
from .params import ParamStore
from .tensor import Tape, Tensor


def reverse_sweep(tape: Tape, loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(parameter) through the tape.

    Walks the records once, newest to oldest; fan-out contributions
    accumulate additively. Parameters unreachable from the loss map to
    zero tensors.
    """
    if loss.size != 1:
        raise ShapeError(f"reverse_sweep: loss must be scalar, got shape {loss.shape}")
    partials: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records):
        grad_out = partials.pop(id(record.output), None)
        if grad_out is None:
            continue
        for operand, grad in zip(record.inputs, record.backward(grad_out)):
            if grad is None or not operand.requires:
                continue
            key = id(operand)
            existing = partials.get(key)
            # never accumulate in place: backward outputs may be shared
            partials[key] = grad if existing is None else existing + grad
    result = {}
    for name, tensor in params.items():
        grad = partials.get(id(tensor))
        result[name] = grad if grad is not None else np.zeros_like(tensor.data)
    return result


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def global_norm_clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/||g|| when the global norm exceeds it."""
    if max_norm <= 0:
        raise ShapeError(f"global_norm_clip: max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    for g in grads.values():
        g *= factor
    return grads


@dataclass
class ParamCheck:
    name: str
    coords_checked: int
    max_rel_error: float
    worst_coord: tuple = ()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    per_param: list[ParamCheck] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] max rel. error {self.max_rel_error:.3e} (tol {self.tolerance:.1e})"


def gradient_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
                   eps: float = 1e-5, tol: float = 1e-4,
                   max_coords_per_param: int = 200,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be deterministic (fixed data, dropout disabled) and is
    evaluated under recording once for the analytic gradients, then
    twice per sampled coordinate without recording. Use a
    checking-grade (float64) store; float32 cancellation swamps the
    comparison otherwise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    from .tensor import recording

    tape = Tape()
    with recording(tape):
        base = f(params)
    if not np.isfinite(base.data).all():
        raise FloatingPointError("gradient_check: f produced a non-finite value")
    analytic = reverse_sweep(tape, base, params)

    report = GradCheckReport(max_rel_error=0.0, tolerance=tol, passed=True)
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        worst = 0.0
        worst_coord = ()
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            plus = float(f(params).data)
            flat[c] = original - eps
            minus = float(f(params).data)
            flat[c] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[c])
            denom = max(abs(numeric) + abs(exact), 1e-8)
            rel = abs(numeric - exact) / denom
            if rel > worst:
                worst = rel
                worst_coord = np.unravel_index(int(c), tensor.data.shape)
        report.per_param.append(ParamCheck(name, len(coords), worst, worst_coord))
        if worst > report.max_rel_error:
            report.max_rel_error = worst
    report.passed = report.max_rel_error < tol
    return report
