"""Backend selection for the hot kinematics/skinning kernels.

The compiled Cython extension is preferred when importable; the pure NumPy
twin is the fallback.  Set the environment variable ``SKELFIT_PURE_PYTHON=1``
before import to force the fallback (used by the benchmark driver and for
debugging).  Both backends implement the same functions with identical
numerical semantics; ``tests/test_kernels.py`` asserts their equivalence.
"""

import os

if os.environ.get("SKELFIT_PURE_PYTHON"):
    from . import _kernels_py as impl
else:
    try:
        from . import _kernels_c as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as impl

BACKEND = impl.BACKEND

local_transforms = impl.local_transforms
fk_forward = impl.fk_forward
fk_backward = impl.fk_backward
skin_forward = impl.skin_forward
skin_backward = impl.skin_backward
dof_gradients = impl.dof_gradients
