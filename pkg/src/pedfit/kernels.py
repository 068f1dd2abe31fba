"""Kernel backend selection.

The compiled Cython module is used when importable; otherwise (or when the
``PEDFIT_PURE_PYTHON`` environment variable is set to a non-empty value)
the numpy fallback is used. ``BACKEND`` names the active choice.
"""
import os

if os.environ.get("PEDFIT_PURE_PYTHON"):
    from ._kernels_py import chain_gradient, nearest_facing, posed_chain, ray_capsules

    BACKEND = "python"
else:
    try:
        from ._kernels import chain_gradient, nearest_facing, posed_chain, ray_capsules

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        from ._kernels_py import chain_gradient, nearest_facing, posed_chain, ray_capsules

        BACKEND = "python"

__all__ = ["BACKEND", "chain_gradient", "nearest_facing", "posed_chain", "ray_capsules"]
