"""Backend dispatch for the hot computational kernels.

Set MIXENV_BACKEND=numpy to force the pure-numpy implementations; the
default is the numba-compiled backend, with automatic fallback to numpy
when numba is not importable.  Both backends expose the same three
functions with identical signatures and semantics:

    obs_loglik_parts(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps, sigma_b)
    e_step_suffstats(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps_inv, sigma_b_inv)
    oned_greedy(M, U, u, starts, max_inner, tol)

Results are deterministic within a backend; across backends they agree to
floating-point reduction-order differences (far below all fit tolerances).
"""

import os

_requested = os.environ.get("MIXENV_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    _requested = "numba"

HAS_NUMBA = False
if _requested == "numba":
    try:
        from . import _numba as _impl
        HAS_NUMBA = True
        BACKEND = "numba"
    except ImportError:
        from . import _numpy as _impl
        BACKEND = "numpy"
else:
    from . import _numpy as _impl
    BACKEND = "numpy"

obs_loglik_parts = _impl.obs_loglik_parts
e_step_suffstats = _impl.e_step_suffstats
oned_greedy = _impl.oned_greedy


def backend_name():
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND
