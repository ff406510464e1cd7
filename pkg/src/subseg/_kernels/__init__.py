"""Hot-loop kernels with a compiled backend and a numpy fallback.

The backend is chosen at import time. Set ``SUBSEG_KERNELS=python`` to force
the fallback, ``SUBSEG_KERNELS=native`` to require the extension.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

_choice = os.environ.get("SUBSEG_KERNELS", "auto").lower()
if _choice not in ("auto", "python", "native"):
    raise ImportError(f"SUBSEG_KERNELS must be auto, python or native, got {_choice!r}")
if _choice != "python":
    try:
        from . import _native as _impl  # noqa: F811
        BACKEND = "native"
    except ImportError:
        if _choice == "native":
            raise
        _impl = _fallback

im2col3 = _impl.im2col3
col2im3 = _impl.col2im3
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
upsample2_backward = _impl.upsample2_backward
xoshiro_fill = _impl.xoshiro_fill

__all__ = [
    "BACKEND", "im2col3", "col2im3", "maxpool2_forward", "maxpool2_backward",
    "upsample2_backward", "xoshiro_fill",
]
