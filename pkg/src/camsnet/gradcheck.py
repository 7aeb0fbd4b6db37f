"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """Max absolute deviation, scaled by the larger gradient magnitude of the pair.

    Scaling by the tensor-wide magnitude keeps near-zero entries from
    dominating through round-off in the finite difference. ``scale`` raises
    the floor of the denominator, e.g. to the magnitude of the whole tensor
    when only a sample of its entries is compared.
    """
    scale = max(scale, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                 max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of the scalar ``fn()`` w.r.t. (a sample of) ``x``'s entries."""
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.zeros(idx.size)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.sum())
            flat[i] = orig - h
            fm = float(fn().data.sum())
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return idx, out


def check_gradients(fn: Callable[[], Tensor], inputs: dict[str, Tensor] | Sequence[Tensor],
                    h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare autodiff and finite-difference gradients of a scalar-valued ``fn``.

    Args:
        fn: closure recomputing the scalar output from the current input values.
        inputs: float64 tensors with ``requires_grad=True``.
        max_entries: if set, check a random subset of that many entries per input.

    Returns:
        Max relative error per input name, scaled by that input's full
        analytic gradient magnitude.
    """
    if not isinstance(inputs, dict):
        inputs = {str(i): t for i, t in enumerate(inputs)}
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradient checking needs float64, {name} is {t.dtype}")
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    report = {}
    for name, t in inputs.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx, numeric = numeric_grad(fn, t, h=h, max_entries=max_entries, rng=rng)
        report[name] = relative_error(analytic.reshape(-1)[idx], numeric, float(np.abs(analytic).max()))
    return report


def directional_check(fn: Callable[[], Tensor], inputs: dict[str, Tensor] | Sequence[Tensor],
                      h: float = 1e-5, seed: int = 0) -> tuple[float, float]:
    """Analytic vs central-difference derivative of ``fn`` along one random unit direction.

    All inputs move together along a direction of unit L2 norm, so ``h`` is
    the length of the step. The comparison is dominated by the groups with
    the largest gradients and is insensitive to near-zero groups.

    Returns:
        ``(analytic, numeric)`` directional derivatives.
    """
    tensors = list(inputs.values()) if isinstance(inputs, dict) else list(inputs)
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = sum(float((t.grad * d).sum()) for t, d in zip(tensors, dirs) if t.grad is not None)
    base = [t.data.copy() for t in tensors]
    vals = []
    with no_grad():
        for sign in (1.0, -1.0):
            for t, b, d in zip(tensors, base, dirs):
                t.data = b + sign * h * d
            vals.append(float(fn().data.sum()))
    for t, b in zip(tensors, base):
        t.data = b
    return analytic, (vals[0] - vals[1]) / (2 * h)


def weighted_sum(y: Tensor, seed: int = 1) -> Tensor:
    """Reduce ``y`` to a scalar with fixed random weights (avoids symmetric cancellation)."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return (y * Tensor(w.astype(y.dtype))).sum()
