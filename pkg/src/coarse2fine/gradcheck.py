"""Central finite-difference gradient checking.

The checker perturbs parameter entries in place and re-evaluates the loss
under no_grad, so it is independent of the reverse-mode path it verifies.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def finite_difference_grads(fn, params, h=1e-5):
    """d fn / d p by central differences; fn() rebuilds the graph each call."""
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                hi = float(fn().data)
            flat[i] = orig - h
            with T.no_grad():
                lo = float(fn().data)
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def check_gradients(fn, params, rel_tol=1e-4, abs_floor=1e-7, h=1e-5):
    """Compare reverse-mode grads of fn() against finite differences.

    Returns the worst (absolute error, tolerance) pair; a result is passing
    when every entry satisfies |ad - fd| <= max(abs_floor, rel_tol * |fd|).
    """
    for p in params.values():
        p.grad = None
    with T.Tape():
        loss = fn()
        T.backward(loss)
    fd = finite_difference_grads(fn, params, h=h)
    worst_err, worst_tol = 0.0, abs_floor
    for name, p in params.items():
        ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = np.abs(ad - fd[name])
        tol = np.maximum(abs_floor, rel_tol * np.abs(fd[name]))
        idx = np.argmax(err - tol)
        if (err - tol).reshape(-1)[idx] > (worst_err - worst_tol):
            worst_err = float(err.reshape(-1)[idx])
            worst_tol = float(tol.reshape(-1)[idx])
    return worst_err, worst_tol


def assert_gradients_close(fn, params, rel_tol=1e-4, abs_floor=1e-7, h=1e-5):
    err, tol = check_gradients(fn, params, rel_tol=rel_tol, abs_floor=abs_floor, h=h)
    if err > tol:
        raise AssertionError(f"gradient mismatch: |ad - fd| = {err:.3e} > tol {tol:.3e}")
