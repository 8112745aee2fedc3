"""Kernel backend selection.

The batched residual/Jacobian/cost/gradient kernels exist twice: a compiled
Cython extension (``_native``) and a vectorized NumPy fallback
(``numpy_impl``). Selection happens once at import:

+ ``PROBPNP_BACKEND=native`` requires the extension (ImportError if absent)
+ ``PROBPNP_BACKEND=numpy`` forces the fallback
+ unset / ``auto``: native when available, else numpy

``backend_name()`` reports the active choice. All public wrappers accept
the pose-space string tags from `probpnp.geometry` and take care of array
contiguity, so the two implementations stay drop-in interchangeable.
"""
import os

import numpy as np

from ..geometry import SPACE_QUAT6, SPACE_YAW1, SPACE_YAW4

SPACE_ID = {SPACE_YAW1: 1, SPACE_YAW4: 4, SPACE_QUAT6: 6}
# columns of a raw parameter row per space
PARAM_WIDTH = {SPACE_YAW1: 1, SPACE_YAW4: 4, SPACE_QUAT6: 7}

_ENV = "PROBPNP_BACKEND"


def _select():
    choice = os.environ.get(_ENV, "auto")
    if choice not in ("auto", "native", "numpy"):
        raise ValueError(f"{_ENV} must be auto|native|numpy, got {choice!r}")
    if choice in ("auto", "native"):
        try:
            from . import _native

            return _native, "native"
        except ImportError:
            if choice == "native":
                raise ImportError(
                    "PROBPNP_BACKEND=native but the compiled extension is "
                    "missing; reinstall with a C compiler available"
                ) from None
    from . import numpy_impl

    return numpy_impl, "numpy"


_impl, _name = _select()


def backend_name():
    return _name


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _t_fixed_arr(t_fixed):
    if t_fixed is None:
        return np.zeros(3)
    return _c(t_fixed)


def _w2d_rows(w2d, n_poses):
    """Expand weights to one (N, 2) table per pose row."""
    w = np.asarray(w2d, dtype=np.float64)
    if w.ndim == 2:
        w = np.broadcast_to(w, (n_poses,) + w.shape)
    return _c(w)


def cost_batch(space, params, t_fixed, x3d, x2d, w2d, intr, delta, z_min, strict, impl=None):
    impl = impl or _impl
    params = _c(params)
    return impl.cost_batch(
        SPACE_ID[space], params, _t_fixed_arr(t_fixed), _c(x3d), _c(x2d),
        _w2d_rows(w2d, params.shape[0]), _c(intr), float(delta), float(z_min),
        bool(strict),
    )


def build_system_batch(space, params, t_fixed, x3d, x2d, w2d, intr, delta, z_min, impl=None):
    impl = impl or _impl
    params = _c(params)
    return impl.build_system_batch(
        SPACE_ID[space], params, _t_fixed_arr(t_fixed), _c(x3d), _c(x2d),
        _w2d_rows(w2d, params.shape[0]), _c(intr), float(delta), float(z_min),
    )


def corr_grad_batch(space, params, weights, t_fixed, x3d, x2d, w2d, intr, delta, z_min, impl=None):
    impl = impl or _impl
    params = _c(params)
    return impl.corr_grad_batch(
        SPACE_ID[space], params, _c(weights), _t_fixed_arr(t_fixed), _c(x3d),
        _c(x2d), _w2d_rows(w2d, params.shape[0]), _c(intr), float(delta),
        float(z_min),
    )
