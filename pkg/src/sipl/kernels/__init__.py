"""Kernel backend selection, decided once at import.

The compiled extension is preferred when it imports cleanly; set
``SIPL_KERNELS=reference`` to force the numpy implementation (used by the
benchmark and the backend-equivalence tests), or ``SIPL_KERNELS=native`` to
fail loudly when the extension is missing.
"""

import os

from . import reference

_requested = os.environ.get("SIPL_KERNELS", "").strip().lower()

if _requested in ("reference", "py", "python"):
    impl = reference
    BACKEND = "reference"
elif _requested == "native":
    from . import _native as impl  # noqa: F401  (ImportError is intentional here)

    BACKEND = "native"
else:
    try:
        from . import _native as impl

        BACKEND = "native"
    except ImportError:
        impl = reference
        BACKEND = "reference"

conv3d_forward = impl.conv3d_forward
conv3d_backward_input = impl.conv3d_backward_input
conv3d_backward_weight = impl.conv3d_backward_weight
trilinear_forward = impl.trilinear_forward
trilinear_backward = impl.trilinear_backward


def backend_name() -> str:
    return BACKEND
