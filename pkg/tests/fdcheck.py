"""Central finite-difference gradient checking used across the test suite.

The numeric gradient perturbs the array in place, one entry at a time, so
the function under test must rebuild its forward pass on every call.  All
checks run at double precision where the truncation error of the central
difference (~h^2) sits far below the acceptance threshold.
"""

import numpy as np

H = 1e-6
REL_TOL = 1e-4


def numeric_gradient(f, x, h=H):
    """d f / d x by central differences; ``f`` is a closure over ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def assert_gradients_match(analytic, numeric, tol=REL_TOL, label=""):
    err = relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch{' for ' + label if label else ''}: rel err {err:.3g} >= {tol}"
