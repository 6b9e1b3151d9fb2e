"""Kernel families used by the activation layers and by kernel ridge regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .exceptions import ConfigurationError, UsageError

KERNEL_FAMILIES = ("gaussian", "wendland0", "linear")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus a fixed shape parameter.

    ``gaussian`` is ``exp(-(eps * r)**2)``; ``wendland0`` is ``max(1 - r, 0)``;
    ``linear`` is the vector-valued inner-product kernel realised by
    :class:`~sdkn.model.LinearKernelLayer` and cannot be evaluated here.
    """

    family: str = "gaussian"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigurationError(
                f"unknown kernel family {self.family!r}; expected one of {KERNEL_FAMILIES}"
            )
        if not self.epsilon > 0:
            raise ConfigurationError(f"kernel shape parameter must be positive, got {self.epsilon}")

    def _check_scalar(self):
        if self.family == "linear":
            raise UsageError("the linear kernel is vector-valued; use LinearKernelLayer")


def apply_to_difference(spec: KernelSpec, diff):
    """Kernel value as a function of ``x - z`` (tensor or array, elementwise)."""
    spec._check_scalar()
    if isinstance(diff, ad.Tensor):
        if spec.family == "gaussian":
            return ad.exp(ad.scale(ad.square(diff), -spec.epsilon**2))
        return ad.maximum(ad.shift(ad.neg(ad.abs_(diff)), 1.0), 0.0)
    diff = np.asarray(diff, dtype=np.float64)
    if spec.family == "gaussian":
        return np.exp(-(spec.epsilon**2) * diff * diff)
    return np.maximum(1.0 - np.abs(diff), 0.0)


def eval_scalar(spec: KernelSpec, x, z):
    """``k(x, z)`` for scalars; returns a taped tensor if either argument is a Tensor."""
    spec._check_scalar()
    if isinstance(x, ad.Tensor) or isinstance(z, ad.Tensor):
        return apply_to_difference(spec, ad.sub(ad.as_tensor(x), ad.as_tensor(z)))
    return float(apply_to_difference(spec, float(x) - float(z)))


def gram_matrix(spec: KernelSpec, X, Z) -> np.ndarray:
    """Matrix of ``k(X_i, Z_j)`` using the Euclidean distance between rows."""
    spec._check_scalar()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if X.shape[1] != Z.shape[1]:
        raise ConfigurationError(f"gram_matrix: dimension mismatch {X.shape} vs {Z.shape}")
    if spec.family == "gaussian":
        return np.exp(-(spec.epsilon**2) * cdist(X, Z, "sqeuclidean"))
    return np.maximum(1.0 - cdist(X, Z, "euclidean"), 0.0)
