"""Fused recurrence kernels for the selective scan.

The scan is the one genuinely sequential loop in the model:

    h_k = a_k * h_{k-1} + b_k * x_k        (elementwise over [D, N])
    y_k = sum_n c_k[n] * h_k[:, n]

Forward returns the output together with the full state history, which the
hand-derived backward kernel consumes. Two implementations exist: numba
@njit loops (default when numba imports) and a per-step numpy path.
``SORMAMBA_BACKEND`` picks one: ``auto`` (default), ``numba`` or ``numpy``.
"""

from __future__ import annotations

import os

import numpy as np

_BACKEND_ENV = "SORMAMBA_BACKEND"

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    """The kernel backend in effect: 'numba' or 'numpy'."""
    choice = os.environ.get(_BACKEND_ENV, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_BACKEND_ENV} must be auto, numba or numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("SORMAMBA_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy path: loop over steps, vectorized over batch/channel/state


def scan_forward_numpy(a_bar, b_bar, c, x):
    batch, steps, dim, _ = a_bar.shape
    h = np.zeros_like(a_bar[:, 0])
    hs = np.empty_like(a_bar)
    y = np.empty_like(x)
    for k in range(steps):
        h = a_bar[:, k] * h + b_bar[:, k] * x[:, k, :, None]
        hs[:, k] = h
        y[:, k] = np.einsum("bdn,bn->bd", h, c[:, k])
    return y, hs


def scan_backward_numpy(a_bar, b_bar, c, x, hs, gy):
    batch, steps, dim, state = a_bar.shape
    ga = np.empty_like(a_bar)
    gb = np.empty_like(b_bar)
    gc = np.empty_like(c)
    gx = np.empty_like(x)
    gh = np.zeros_like(a_bar[:, 0])
    for k in range(steps - 1, -1, -1):
        gh = gh + gy[:, k, :, None] * c[:, k, None, :]
        gc[:, k] = np.einsum("bdn,bd->bn", hs[:, k], gy[:, k])
        h_prev = hs[:, k - 1] if k > 0 else np.zeros_like(gh)
        ga[:, k] = gh * h_prev
        gb[:, k] = gh * x[:, k, :, None]
        gx[:, k] = np.einsum("bdn,bdn->bd", gh, b_bar[:, k])
        gh = gh * a_bar[:, k]
    return ga, gb, gc, gx


# ---------------------------------------------------------------------------
# numba path: same recurrence, explicit loops


@njit(cache=True)
def _scan_forward_numba(a_bar, b_bar, c, x, hs, y):  # pragma: no cover - compiled
    batch, steps, dim, state = a_bar.shape
    for b in range(batch):
        h = np.zeros((dim, state))
        for k in range(steps):
            for d in range(dim):
                acc = 0.0
                for n in range(state):
                    h[d, n] = a_bar[b, k, d, n] * h[d, n] + b_bar[b, k, d, n] * x[b, k, d]
                    hs[b, k, d, n] = h[d, n]
                    acc += c[b, k, n] * h[d, n]
                y[b, k, d] = acc


@njit(cache=True)
def _scan_backward_numba(a_bar, b_bar, c, x, hs, gy, ga, gb, gc, gx):  # pragma: no cover
    batch, steps, dim, state = a_bar.shape
    for b in range(batch):
        gh = np.zeros((dim, state))
        for k in range(steps - 1, -1, -1):
            for n in range(state):
                gc[b, k, n] = 0.0
            for d in range(dim):
                gxv = 0.0
                for n in range(state):
                    gh[d, n] += gy[b, k, d] * c[b, k, n]
                    gc[b, k, n] += hs[b, k, d, n] * gy[b, k, d]
                    h_prev = hs[b, k - 1, d, n] if k > 0 else 0.0
                    ga[b, k, d, n] = gh[d, n] * h_prev
                    gb[b, k, d, n] = gh[d, n] * x[b, k, d]
                    gxv += gh[d, n] * b_bar[b, k, d, n]
                    gh[d, n] *= a_bar[b, k, d, n]
                gx[b, k, d] = gxv


def scan_forward_numba(a_bar, b_bar, c, x):
    hs = np.empty_like(a_bar)
    y = np.empty_like(x)
    _scan_forward_numba(a_bar, b_bar, c, x, hs, y)
    return y, hs


def scan_backward_numba(a_bar, b_bar, c, x, hs, gy):
    ga = np.empty_like(a_bar)
    gb = np.empty_like(b_bar)
    gc = np.empty_like(c)
    gx = np.empty_like(x)
    _scan_backward_numba(a_bar, b_bar, c, x, hs, gy, ga, gb, gc, gx)
    return ga, gb, gc, gx


def scan_forward(a_bar, b_bar, c, x):
    """Run the recurrence; returns (y, state history)."""
    args = tuple(np.ascontiguousarray(v) for v in (a_bar, b_bar, c, x))
    if backend() == "numba":
        return scan_forward_numba(*args)
    return scan_forward_numpy(*args)


def scan_backward(a_bar, b_bar, c, x, hs, gy):
    """Vector-Jacobian product of the recurrence wrt all four inputs."""
    args = tuple(np.ascontiguousarray(v) for v in (a_bar, b_bar, c, x, hs, gy))
    if backend() == "numba":
        return scan_backward_numba(*args)
    return scan_backward_numpy(*args)
