"""Hot-kernel backend selection.

The compiled extension is optional; a NumPy fallback ships alongside and the
two are bit-identical. Set ``DOMAINFORGE_PURE=1`` to force the fallback (the
benchmark and the equivalence tests use this).
"""
import os

from . import _fallback

if os.environ.get("DOMAINFORGE_PURE") == "1":
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _ext as _impl
        BACKEND = "ext"
    except ImportError:
        _impl = _fallback
        BACKEND = "fallback"

minhash_mix = _impl.minhash_mix
signed_counts = _impl.signed_counts

__all__ = ["BACKEND", "minhash_mix", "signed_counts"]
