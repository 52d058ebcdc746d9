"""Central-difference verification of reverse-mode gradients."""

import numpy as np

from .errors import ContractViolation, NumericError
from .tensor import Tensor, record_branches


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_difference_check(fn, input, step=1e-5, indices=None, skip_kinks=False, details=None):
    """Worst relative error between central differences and ``backward`` for ``fn(input)``.

    ``fn`` maps a tensor to a scalar tensor. ``input`` must have ``requires_grad``
    set; its data is perturbed in place and restored. ``indices`` restricts the
    check to a subset of flat positions.

    With ``skip_kinks`` a position is skipped when the +step or -step evaluation
    takes a different relu/pooling branch than the unperturbed one, since central
    differences are meaningless across a kink. Returns ``(max_error, n_skipped)``
    in that case and ``max_error`` otherwise.

    ``details``, when a list, receives ``(index, numeric, analytic, value)`` for every
    compared position, ``value`` being the unperturbed function value.
    """
    if step <= 0:
        raise ContractViolation(f"step must be positive, got {step}")
    if not input.requires_grad:
        raise ContractViolation("input must require grad")

    input.grad = None
    with record_branches() as base_branches:
        out = fn(input)
    _check_scalar(out)
    out.backward()
    value = float(out.data.reshape(()))
    analytic = input.grad.reshape(-1).copy()
    base_branches = [b.copy() for b in base_branches]

    flat = input.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst, skipped = 0.0, 0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        with record_branches() as plus_branches:
            fp = _check_scalar(fn(input))
        flat[i] = orig - step
        with record_branches() as minus_branches:
            fm = _check_scalar(fn(input))
        flat[i] = orig
        if skip_kinks and not (_same(base_branches, plus_branches) and _same(base_branches, minus_branches)):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * step)
        if details is not None:
            details.append((i, numeric, float(analytic[i]), value))
        worst = max(worst, float(relative_error(numeric, analytic[i])))
    input.grad = None
    return (worst, skipped) if skip_kinks else worst


def _check_scalar(out):
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractViolation("fn must return a scalar tensor")
    value = float(out.data.reshape(()))
    if not np.isfinite(value):
        raise NumericError("function value is not finite")
    return value


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
