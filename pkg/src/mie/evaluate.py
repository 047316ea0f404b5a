"""Late fusion, classification metrics, and loss-landscape slices.

Fusion works on per-modality probability matrices; metrics are the
usual accuracy, mean average precision from per-class rankings, and
macro-F1 from argmax decisions. The landscape slice samples the loss on
a 2-d grid spanned by two random filter-normalized directions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError
from .nn import Batch, GradientSet, LayerParams, ModalityModel, batch_loss

__all__ = [
    "LandscapeSlice",
    "MetricsReport",
    "PredictionSet",
    "accuracy",
    "fuse_average",
    "fuse_weighted",
    "landscape_slice",
    "macro_f1",
    "mean_average_precision",
    "metrics_report",
    "slice_directions",
]


@dataclass
class PredictionSet:
    """Per-modality probability matrices plus the matching labels."""

    per_modality: list[np.ndarray]  # m arrays, each n x c
    labels: np.ndarray  # n x c one-hot

    def __post_init__(self):
        if not self.per_modality:
            raise ValidationError("prediction set needs at least one modality")
        self.per_modality = [np.asarray(p, dtype=np.float64) for p in self.per_modality]
        self.labels = np.asarray(self.labels, dtype=np.float64)
        shape = self.per_modality[0].shape
        for j, preds in enumerate(self.per_modality):
            if preds.ndim != 2 or preds.shape != shape:
                raise ValidationError(f"modality {j + 1} predictions have shape {preds.shape}")
            if np.any(np.abs(preds.sum(axis=1) - 1.0) > 1e-9) or np.any(preds < -1e-12):
                raise ValidationError(f"modality {j + 1} rows are not on the simplex")
        if self.labels.shape != shape:
            raise ValidationError("labels do not match prediction shape")


def fuse_average(preds: PredictionSet) -> np.ndarray:
    """Row-wise arithmetic mean of the per-modality predictions."""
    return np.mean(preds.per_modality, axis=0)


def fuse_weighted(preds: PredictionSet) -> np.ndarray:
    """Confidence-weighted fusion.

    Per sample, each modality gets weight softmax(-entropy): confident
    (low-entropy) predictions dominate, and symmetric uncertainty reduces
    to plain averaging. This is a stated stand-in; the reference
    weighting scheme it replaces is not public.
    """
    stacked = np.stack(preds.per_modality)  # m x n x c
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(stacked > 0.0, stacked * np.log(stacked), 0.0)
    entropy = -plogp.sum(axis=2)  # m x n
    weights = np.exp(-entropy)
    weights = weights / weights.sum(axis=0, keepdims=True)
    return np.einsum("mn,mnc->nc", weights, stacked)


def _validate_scored(pred, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.ndim != 2 or p.shape != y.shape or p.shape[0] < 1:
        raise ValidationError("predictions and labels must be matching non-empty 2-d arrays")
    return p, y


def accuracy(pred, labels) -> float:
    """Fraction of rows whose argmax hits the true class (ties: lowest index)."""
    p, y = _validate_scored(pred, labels)
    return float(np.mean(np.argmax(p, axis=1) == np.argmax(y, axis=1)))


def mean_average_precision(pred, labels) -> float:
    """Mean over classes of average precision from per-class score rankings.

    Per class, rows are ranked by score descending with ties kept in row
    order; average precision is the mean of precision-at-r over positive
    ranks r. Classes with no positive rows are skipped with a warning.
    """
    p, y = _validate_scored(pred, labels)
    n, c = p.shape
    ranks = np.arange(1, n + 1)
    aps = []
    for k in range(c):
        positives = y[:, k]
        if not np.any(positives == 1.0):
            warnings.warn(f"class {k} has no positive samples; skipped in MAP")
            continue
        order = np.argsort(-p[:, k], kind="stable")
        hits = positives[order]
        precision_at = np.cumsum(hits) / ranks
        aps.append(float(np.mean(precision_at[hits == 1.0])))
    if not aps:
        raise ValidationError("no class has positive samples")
    return float(np.mean(aps))


def macro_f1(pred, labels) -> float:
    """Unweighted mean of per-class F1 from argmax decisions.

    Precision or recall with an empty denominator counts as zero, so a
    class the classifier never predicts contributes F1 = 0.
    """
    p, y = _validate_scored(pred, labels)
    decided = np.argmax(p, axis=1)
    true = np.argmax(y, axis=1)
    scores = []
    for k in range(p.shape[1]):
        tp = float(np.sum((decided == k) & (true == k)))
        fp = float(np.sum((decided == k) & (true != k)))
        fn = float(np.sum((decided != k) & (true == k)))
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(scores))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    mean_average_precision: float
    macro_f1: float


def metrics_report(pred, labels) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(pred, labels),
        mean_average_precision=mean_average_precision(pred, labels),
        macro_f1=macro_f1(pred, labels),
    )


def slice_directions(model: ModalityModel, seed) -> tuple[GradientSet, GradientSet]:
    """Two random landscape directions over the weight matrices.

    Biases are excluded (zero direction components). The second direction
    is orthogonalized against the first over the flattened weights, then
    both are filter-normalized: each layer block is rescaled to that
    layer's weight norm so the slice is comparable across layers.
    """
    rng = np.random.default_rng(seed)
    layers = model.layers
    d1 = [rng.standard_normal(layer.weights.shape) for layer in layers]
    d2 = [rng.standard_normal(layer.weights.shape) for layer in layers]

    flat1 = np.concatenate([d.ravel() for d in d1])
    flat2 = np.concatenate([d.ravel() for d in d2])
    coeff = float(flat1 @ flat2) / float(flat1 @ flat1)
    d2 = [b - coeff * a for a, b in zip(d1, d2)]

    for direction in (d1, d2):
        for i, layer in enumerate(layers):
            norm = float(np.linalg.norm(direction[i]))
            if norm > 0.0:
                direction[i] *= float(np.linalg.norm(layer.weights)) / norm

    zeros = [np.zeros_like(layer.biases) for layer in layers]
    return (
        GradientSet(weight_grads=d1, bias_grads=[z.copy() for z in zeros]),
        GradientSet(weight_grads=d2, bias_grads=zeros),
    )


@dataclass
class LandscapeSlice:
    """Loss values over the (alpha, beta) grid; losses[i, j] is at (alphas[i], betas[j])."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray


def landscape_slice(
    model: ModalityModel,
    batch: Batch,
    grid_radius: float,
    grid_points: int,
    seed,
    loss_fn: Callable[[ModalityModel, Batch], float] | None = None,
) -> LandscapeSlice:
    """Sample the loss on a centered 2-d slice through parameter space.

    grid_points must be odd so the center cell evaluates the unperturbed
    model. The model itself is never mutated; perturbed copies are built
    per grid point. Non-finite losses are recorded as NaN rather than
    raised.
    """
    if grid_points < 1 or grid_points % 2 == 0:
        raise ValidationError("grid_points must be odd so the grid is centered")
    if grid_radius <= 0:
        raise ValidationError("grid_radius must be positive")
    evaluate = loss_fn if loss_fn is not None else batch_loss
    d1, d2 = slice_directions(model, seed)
    coords = np.linspace(-grid_radius, grid_radius, grid_points)
    layers = model.layers
    losses = np.empty((grid_points, grid_points))
    for i, alpha in enumerate(coords):
        for j, beta in enumerate(coords):
            if alpha == 0.0 and beta == 0.0:
                probe = model
            else:
                moved = [
                    LayerParams(
                        weights=layer.weights
                        + alpha * d1.weight_grads[k]
                        + beta * d2.weight_grads[k],
                        biases=layer.biases,
                        activation=layer.activation,
                    )
                    for k, layer in enumerate(layers)
                ]
                n_enc = len(model.encoder_layers)
                probe = ModalityModel(
                    encoder_layers=moved[:n_enc], head_layers=moved[n_enc:]
                )
            try:
                value = evaluate(probe, batch)
            except FloatingPointError:
                value = float("nan")
            losses[i, j] = value if np.isfinite(value) else float("nan")
    return LandscapeSlice(alphas=coords.copy(), betas=coords.copy(), losses=losses)
