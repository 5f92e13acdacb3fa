"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import ContractError, NumericError


def finite_difference_grad(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Estimate ``df/dparam`` coordinate by coordinate.

    ``f`` receives a dict of (perturbed copies of) the parameter arrays and
    must return a scalar.
    """
    if step <= 0:
        raise ContractError(f"finite_difference_grad: step must be > 0, got {step}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(work))
            flat[i] = orig - step
            lo = float(f(work))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"finite_difference_grad: non-finite f at {name}[{i}]")
            gflat[i] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, abs_floor)`` over all coordinates."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def grads_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, abs_floor: float = 1e-6) -> bool:
    """Relative agreement within ``rtol``; differences below ``abs_floor`` always pass."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(a - n)
    return bool(np.all((diff <= abs_floor) | (diff <= rtol * np.maximum(np.abs(a), np.abs(n)))))
