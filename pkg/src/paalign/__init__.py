"""Prototype-driven adversarial alignment for cross-corpus adaptation."""

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]


def __getattr__(name):
    # Lazy so the CLI can pin BLAS thread env vars before numpy loads.
    if name == "KERNEL_BACKEND":
        from ._kernels import BACKEND

        return BACKEND
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
