"""Sharpness-aware gradients.

The worst-case perturbation inside an L2 ball of radius rho is
approximated by the normalized gradient direction; the sharpness-aware
gradient is the plain gradient re-evaluated at the perturbed parameters,
with the second-order correction dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .nn import Batch, GradientSet, ModalityModel, _loss_and_gradient

__all__ = ["SamConfig", "perturbation", "sam_gradient"]


@dataclass(frozen=True)
class SamConfig:
    """L2-ball radius and the cutoff below which a gradient counts as zero.

    rho may be a single radius or one per modality.
    """

    rho: float | tuple[float, ...] = 0.05
    zero_grad_threshold: float = 1e-12

    def __post_init__(self):
        rhos = self.rho if isinstance(self.rho, tuple) else (self.rho,)
        if any(r < 0 for r in rhos):
            raise ValidationError(f"rho must be non-negative, got {self.rho}")


def perturbation(
    grad: GradientSet, rho: float, zero_grad_threshold: float = 1e-12
) -> GradientSet:
    """Ascent step of norm rho along the gradient direction.

    The norm is taken over all parameters flattened together. A gradient
    with norm below the threshold yields an all-zero perturbation, which
    keeps training well-defined at exact critical points.
    """
    if rho < 0:
        raise ValidationError(f"rho must be non-negative, got {rho}")
    norm = grad.l2_norm()
    if norm < zero_grad_threshold:
        return grad.scaled(0.0)
    return grad.scaled(rho / norm)


def sam_gradient(model: ModalityModel, batch: Batch, config: SamConfig) -> GradientSet:
    """Gradient of the batch loss at the adversarially perturbed parameters.

    Two passes on the same minibatch: the first gradient defines the
    perturbation, the second is taken at theta + epsilon and returned.
    Model parameters are bit-identical before and after the call.
    """
    loss, grad = _loss_and_gradient(model, batch)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss at unperturbed parameters")
    eps = perturbation(grad, config.rho, config.zero_grad_threshold)
    if eps.l2_norm() == 0.0:
        # theta + 0 is a no-op; the second pass would reproduce `grad`.
        return grad

    layers = model.layers
    saved = [(layer.weights, layer.biases) for layer in layers]
    try:
        for layer, dw, db in zip(layers, eps.weight_grads, eps.bias_grads):
            layer.weights = layer.weights + dw
            layer.biases = layer.biases + db
        loss_perturbed, grad_perturbed = _loss_and_gradient(model, batch)
    finally:
        for layer, (w, b) in zip(layers, saved):
            layer.weights = w
            layer.biases = b
    if not np.isfinite(loss_perturbed):
        raise NumericError("non-finite loss at perturbed parameters")
    return grad_perturbed
