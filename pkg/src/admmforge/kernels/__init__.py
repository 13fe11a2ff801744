"""Kernel backend selection.

The compiled Cython kernels are preferred when importable; the pure
numpy fallback is used otherwise. ``ADMM_FORGE_KERNELS=py`` or ``=c``
forces a backend (the latter raises if the extension is missing).
Both backends produce identical layouts and argmax tie-breaking.
"""

import os

from . import fallback

_forced = os.environ.get("ADMM_FORGE_KERNELS", "").strip().lower()

compiled = None
if _forced != "py":
    try:
        from admmforge import _ckernels as compiled
    except ImportError:
        compiled = None
        if _forced == "c":
            raise

active = compiled if compiled is not None else fallback

BACKEND = active.BACKEND
conv_out_size = fallback.conv_out_size
im2col = active.im2col
col2im = active.col2im
maxpool_forward = active.maxpool_forward
maxpool_backward = active.maxpool_backward
