"""Flat-direction gradient modification from cumulative feature covariance.

Each monitored layer accumulates the outer product of its batch-mean
input activations. Eigendecomposing that running sum gives the
directions along which the layer's output moves most; the modification
matrix damps weight-gradient components along high-variance directions
(factor exp(-tau) at the top of the spectrum, 1 at the bottom), steering
updates toward directions that barely change a well-learned model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix, as_vector, mean_rows, outer, sym_eigen
from .nn import ModalityModel

__all__ = [
    "GmConfig",
    "GradModState",
    "SingularRecord",
    "accumulate",
    "build_t_matrix",
    "flatness_response",
    "modify",
    "monitored_layer_indices",
    "parse_scope",
    "singular_report",
]


def parse_scope(scope: str) -> tuple[str, float | None]:
    """Parse a scope spec: "head_only" or "deep:<fraction in [0,1]>"."""
    if scope == "head_only":
        return "head_only", None
    if scope.startswith("deep:"):
        try:
            fraction = float(scope.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"bad scope fraction in {scope!r}") from exc
        if not 0.0 <= fraction <= 1.0:
            raise ValidationError(f"scope fraction must be in [0, 1], got {fraction}")
        return "deep", fraction
    raise ValidationError(f"unknown scope {scope!r} (use head_only or deep:<f>)")


@dataclass(frozen=True)
class GmConfig:
    """Damping strength, monitored-layer selection, and degeneracy cutoff."""

    tau: float = 0.4
    scope: str = "head_only"
    degenerate_tolerance: float = 1e-12

    def __post_init__(self):
        if self.tau < 0:
            raise ValidationError(f"tau must be non-negative, got {self.tau}")
        parse_scope(self.scope)


@dataclass
class GradModState:
    """Running covariance and current modification matrix for one layer."""

    layer_index: int
    dim: int
    cumulative_cov: np.ndarray = field(init=False)
    t_matrix: np.ndarray = field(init=False)
    batches_seen: int = 0
    last_eigenvalues: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("state dimension must be >= 1")
        self.cumulative_cov = np.zeros((self.dim, self.dim))
        self.t_matrix = np.eye(self.dim)


def monitored_layer_indices(model: ModalityModel, scope: str) -> list[int]:
    """Global layer indices covered by the scope, in forward order.

    "deep:f" walks layers from the output backwards, adding layers until
    at least fraction f of all parameters is covered; f = 0 selects none
    and f = 1 selects every layer.
    """
    kind, fraction = parse_scope(scope)
    layers = model.layers
    if kind == "head_only":
        return list(range(len(model.encoder_layers), len(layers)))
    if fraction == 0.0:
        return []
    sizes = [layer.weights.size + layer.biases.size for layer in layers]
    target = fraction * sum(sizes)
    chosen: list[int] = []
    covered = 0
    for idx in range(len(layers) - 1, -1, -1):
        chosen.append(idx)
        covered += sizes[idx]
        if covered >= target:
            break
    return sorted(chosen)


def accumulate(state: GradModState, layer_inputs) -> GradModState:
    """Add one batch's mean-activation outer product to the running sum."""
    z = as_matrix(layer_inputs, "layer inputs")
    if z.shape[1] != state.dim:
        raise ValidationError(
            f"layer inputs have dim {z.shape[1]}, state expects {state.dim}"
        )
    mean = mean_rows(z)
    state.cumulative_cov += outer(mean, mean)
    state.batches_seen += 1
    return state


def build_t_matrix(state: GradModState, config: GmConfig) -> GradModState:
    """Rebuild the modification matrix from the accumulated covariance.

    T = V diag(exp(-tau (lambda_i - lambda_min) / (lambda_max - lambda_min))) V^T.
    The spectrum normalization makes T invariant to positive rescaling of
    the covariance. A degenerate spectrum (lambda_max ~ lambda_min) gives
    T = I. The covariance and batch count reset afterwards so the next
    training phase starts a fresh accumulation; the eigenvalues of the
    decomposed covariance stay cached for reporting.
    """
    if state.batches_seen == 0:
        raise ValidationError("build_t_matrix requires at least one accumulated batch")
    eig = sym_eigen(state.cumulative_cov)
    evals = eig.eigenvalues
    state.last_eigenvalues = evals.copy()
    lam_max = float(evals[0])
    lam_min = float(evals[-1])
    spread = lam_max - lam_min
    if config.tau == 0.0 or spread < config.degenerate_tolerance * max(1.0, lam_max):
        # tau = 0 must leave updates bitwise unchanged, so T is exactly I,
        # not the V V^T round-trip.
        state.t_matrix = np.eye(state.dim)
    else:
        damping = np.exp(-config.tau * (evals - lam_min) / spread)
        v = eig.eigenvectors
        state.t_matrix = (v * damping) @ v.T
    state.cumulative_cov = np.zeros((state.dim, state.dim))
    state.batches_seen = 0
    return state


def modify(t_matrix, weight_grad) -> np.ndarray:
    """Left-multiply a weight gradient by the modification matrix.

    Only weight gradients pass through here; bias gradients have no
    input-dimension axis and are left untouched by design.
    """
    t = as_matrix(t_matrix, "modification matrix")
    g = as_matrix(weight_grad, "weight gradient")
    if t.shape[0] != t.shape[1] or t.shape[1] != g.shape[0]:
        raise ValidationError(
            f"shape mismatch: T is {t.shape}, gradient is {g.shape}"
        )
    return t @ g


def flatness_response(cov, v, gamma: float) -> float:
    """Output change ||cov . gamma v|| for a unit direction v.

    For the i-th eigenvector of the covariance this equals gamma times
    the i-th eigenvalue, which is what makes small-eigenvalue directions
    "flat".
    """
    c = as_matrix(cov, "covariance")
    direction = as_vector(v, "direction")
    if c.shape[1] != direction.shape[0]:
        raise ValidationError("direction length does not match covariance")
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-9:
        raise ValidationError(f"direction must be unit-norm, got {norm}")
    return float(np.linalg.norm(c @ (gamma * direction)))


@dataclass(frozen=True)
class SingularRecord:
    """Spectrum statistics of one monitored layer's last built covariance."""

    layer_index: int
    max_singular: float
    mean_singular: float


def singular_report(states: dict[int, GradModState]) -> list[SingularRecord]:
    """Max/mean eigenvalue of the last covariance decomposed per layer.

    Raises if no layer has completed an accumulate/build cycle yet.
    """
    records = []
    for idx in sorted(states):
        evals = states[idx].last_eigenvalues
        if evals is None:
            continue
        records.append(
            SingularRecord(
                layer_index=idx,
                max_singular=float(evals[0]),
                mean_singular=float(np.mean(evals)),
            )
        )
    if not records:
        raise ValidationError("no covariance has been built yet; nothing to report")
    return records
