"""Numeric hot kernels: numba-jitted fast path with a pure-numpy fallback.

The kernels here are the fused row-wise/element-wise loops that dominate
runtime together with BLAS: softmax forward and its vector-Jacobian product,
the exponential kernel map, and the AdamW parameter update. Matrix products
are deliberately *not* routed through numba -- numpy already hands them to
BLAS, which a jitted loop cannot beat.

Backend selection:
  * default is "numba" when numba imports, "numpy" otherwise;
  * the environment variable KADAPTERS_BACKEND ("numba" | "numpy") overrides
    the default at import time;
  * select_backend() switches at runtime (used by tests and the benchmark).

Both backends are deterministic run-to-run; they are not required to agree
bit-for-bit with each other (summation order differs), only to a few ulps.
"""

from __future__ import annotations

import math
import os

import numpy as np

ENV_VAR = "KADAPTERS_BACKEND"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _softmax_rows_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_vjp_np(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d/dz of softmax rows: s * (g - <g, s>_row)
    dot = (g * s).sum(axis=1, keepdims=True)
    return s * (g - dot)


def _exp_scaled_np(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.exp(alpha * x)


def _adamw_update_np(p, g, m, v, t, lr, b1, b2, eps, wd):
    # Decoupled weight decay; m and v are updated in place, new params returned.
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    return p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


_NUMPY_IMPLS = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_vjp": _softmax_rows_vjp_np,
    "exp_scaled": _exp_scaled_np,
    "adamw_update": _adamw_update_np,
}


# ---------------------------------------------------------------------------
# numba implementations (single-threaded loops: bit-deterministic per run)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, c):
                if x[i, j] > mx:
                    mx = x[i, j]
            total = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                total += e
            for j in range(c):
                out[i, j] = out[i, j] / total
        return out

    @njit(cache=True)
    def _softmax_rows_vjp_nb(s, g):
        n, c = s.shape
        out = np.empty((n, c))
        for i in range(n):
            dot = 0.0
            for j in range(c):
                dot += g[i, j] * s[i, j]
            for j in range(c):
                out[i, j] = s[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _exp_scaled_nb(x, alpha):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            for j in range(c):
                out[i, j] = math.exp(alpha * x[i, j])
        return out

    @njit(cache=True)
    def _adamw_update_nb(p, g, m, v, t, lr, b1, b2, eps, wd):
        n, c = p.shape
        out = np.empty((n, c))
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for i in range(n):
            for j in range(c):
                gij = g[i, j]
                m[i, j] = b1 * m[i, j] + (1.0 - b1) * gij
                v[i, j] = b2 * v[i, j] + (1.0 - b2) * gij * gij
                mhat = m[i, j] / bc1
                vhat = v[i, j] / bc2
                out[i, j] = p[i, j] - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i, j])
        return out

    _NUMBA_IMPLS = {
        "softmax_rows": _softmax_rows_nb,
        "softmax_rows_vjp": _softmax_rows_vjp_nb,
        "exp_scaled": _exp_scaled_nb,
        "adamw_update": _adamw_update_nb,
    }
else:  # pragma: no cover
    _NUMBA_IMPLS = {}


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

_BACKENDS = {"numpy": _NUMPY_IMPLS}
if HAVE_NUMBA:
    _BACKENDS["numba"] = _NUMBA_IMPLS

_active_name = "numpy"
_active = _NUMPY_IMPLS


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def select_backend(name: str) -> str:
    """Activate a backend by name; returns the previously active name."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown backend {name!r}; available: {', '.join(available_backends())}"
        )
    previous = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return previous


def current_backend() -> str:
    return _active_name


def _default_backend() -> str:
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ValueError(
                f"{ENV_VAR}={requested!r} is not available; "
                f"choose one of: {', '.join(available_backends())}"
            )
        return requested
    return "numba" if HAVE_NUMBA else "numpy"


select_backend(_default_backend())


# ---------------------------------------------------------------------------
# public kernel entry points
# ---------------------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    return _active["softmax_rows"](x)


def softmax_rows_vjp(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _active["softmax_rows_vjp"](np.ascontiguousarray(s), np.ascontiguousarray(g))


def exp_scaled(x: np.ndarray, alpha: float) -> np.ndarray:
    return _active["exp_scaled"](np.ascontiguousarray(x), float(alpha))


def adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd) -> np.ndarray:
    return _active["adamw_update"](
        p, np.ascontiguousarray(g), m, v, int(t),
        float(lr), float(b1), float(b2), float(eps), float(wd),
    )
