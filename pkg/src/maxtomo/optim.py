"""Thin wrapper around scipy's L-BFGS-B with a per-iteration hook."""

import numpy as np
from scipy.optimize import minimize


def minimize_lbfgsb(fun, x0, bounds, max_iter, memory=10, on_iterate=None, gtol=0.0, ftol=0.0):
    """Minimize ``fun(x) -> (f, grad)`` under box ``bounds``.

    ``on_iterate(x)`` runs after every accepted iterate. Tolerances default to
    zero so that the iteration budget, not a heuristic, ends the run; the
    line search still stops early at an exact stationary point.
    """

    def callback(intermediate_result):
        if on_iterate is not None:
            on_iterate(np.array(intermediate_result.x, float))

    return minimize(
        fun,
        np.asarray(x0, float),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=callback,
        options={"maxiter": int(max_iter), "maxcor": int(memory), "gtol": gtol, "ftol": ftol, "maxfun": 20 * int(max_iter) + 20},
    )
