"""Retrieval scoring kernels, compiled when available.

The Cython extension is selected at import time; the numpy fallback is used
when it is not built or when TABLEFILL_PURE is set. Both backends implement
identical semantics (see benchmarks/bench_kernels.py for the comparison).
"""

import os

if os.environ.get("TABLEFILL_PURE"):
    from . import _fallback as _impl

    BACKEND = "fallback"
else:
    try:
        from . import _scoring as _impl  # type: ignore[attr-defined]

        BACKEND = "native"
    except ImportError:
        from . import _fallback as _impl

        BACKEND = "fallback"

bm25_accumulate = _impl.bm25_accumulate
phrase_occurs = _impl.phrase_occurs

__all__ = ["BACKEND", "bm25_accumulate", "phrase_occurs"]
