"""Backend selection for the loss/gradient kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``. Set ``FEDWARM_BACKEND=python`` to
force the fallback, or ``FEDWARM_BACKEND=cython`` to fail loudly when the
extension is missing.

The two backends agree to rounding (about 1e-13 relative), not bit for bit:
numpy hands matrix products to BLAS, which sums in its own order. A single run
uses one backend throughout, so its results are reproducible.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

_KERNEL_NAMES = ("linear_logits", "linear_loss_grad", "mlp_logits", "mlp_loss_grad")


def _load(choice: str) -> tuple[str, ModuleType]:
    if choice == "python":
        return "python", _pykernels
    try:
        from . import _ckernels
    except ImportError:
        if choice == "cython":
            raise
        return "python", _pykernels
    return "cython", _ckernels


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name: str) -> ModuleType:
    """Kernel module by name (``"python"`` or ``"cython"``)."""
    return _load(name)[1]


BACKEND, _impl = _load(os.environ.get("FEDWARM_BACKEND", "auto").lower())

linear_logits = _impl.linear_logits
linear_loss_grad = _impl.linear_loss_grad
mlp_logits = _impl.mlp_logits
mlp_loss_grad = _impl.mlp_loss_grad
