"""Central finite differences against tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tape, Var


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-6,
                       indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (perturbed in place).

    Only the flat ``indices`` are probed when given; other entries stay 0.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build: Callable[[Tape, Mapping[str, Var]], Var],
                    arrays: Mapping[str, np.ndarray], step: float = 1e-6,
                    max_probes: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict[str, float]:
    """Compare tape gradients of ``build`` to finite differences.

    ``build(tape, leaves)`` must return a scalar Var computed from the leaves
    named as in ``arrays``. Returns relative error per array. With
    ``max_probes`` only that many randomly chosen entries per array are probed.
    """
    arrays = {name: np.array(a, dtype=np.float64) for name, a in arrays.items()}

    def evaluate() -> float:
        tape = Tape()
        leaves = {n: tape.leaf(a) for n, a in arrays.items()}
        return float(build(tape, leaves).value)

    tape = Tape()
    leaves = {n: tape.leaf(a) for n, a in arrays.items()}
    grads = tape.backward(build(tape, leaves))
    errors = {}
    for name, arr in arrays.items():
        analytic = grads[leaves[name]]
        idx = None
        if max_probes is not None and arr.size > max_probes:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(arr.size, size=max_probes, replace=False))
        numeric = numerical_gradient(evaluate, arr, step, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors[name] = relative_error(analytic, numeric)
    return errors
