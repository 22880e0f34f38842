"""Backend selection for the hot loops.

The compiled extension is used when importable; otherwise, or when
``BALLISTA_PURE_PYTHON=1`` is set, the numpy implementation is used. Both
expose ``min_distance_batch``, ``hand_state`` and ``plant_step`` with
identical signatures.
"""
import os

from ballista import _pykernels

python_backend = _pykernels

if os.environ.get("BALLISTA_PURE_PYTHON") == "1":
    backend = _pykernels
    compiled_backend = None
else:
    try:
        from ballista import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None
    backend = compiled_backend if compiled_backend is not None else _pykernels

BACKEND_NAME = "compiled" if backend is not _pykernels else "python"


def thread_count():
    """Worker-thread cap from ``BALLISTA_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("BALLISTA_THREADS", "1")))
    except ValueError:
        return 1
