"""Alternating per-modality training with cross-modality gradient modification.

One outer iteration trains each modality in turn. Within a modality's
phase, gradients are sharpness-aware (optional), left-multiplied on
monitored layers by the modification matrix of the cyclic predecessor
modality (optional), then applied with momentum SGD and weight decay.
After the phase, the just-trained modality's covariance is re-accumulated
over a fixed batch partition and its modification matrix is rebuilt, so
the next modality trains against a fresh snapshot.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import evaluate as ev
from .data import MultimodalDataset, batches, ordered_batches
from .errors import NumericError, ValidationError
from .gradmod import (
    GmConfig,
    GradModState,
    accumulate,
    build_t_matrix,
    modify,
    monitored_layer_indices,
    singular_report,
)
from .nn import (
    GradientSet,
    ModalityModel,
    backward,
    batch_loss,
    forward,
    init_model,
    zero_gradients,
)
from .sam import SamConfig, sam_gradient

__all__ = [
    "AblationCell",
    "AblationGrid",
    "AblationSwitches",
    "OptimizerState",
    "PhaseRecord",
    "TrainConfig",
    "TrainResult",
    "ablate",
    "apply_overrides",
    "modality_index",
    "sgd_step",
    "train",
]

# A phase "improves" only if its mean train loss drops by at least this
# much; otherwise it counts toward the learning-rate plateau.
PLATEAU_MIN_DELTA = 1e-4


def modality_index(j: int, m: int) -> int:
    """Cyclic predecessor of 1-based modality j among m modalities."""
    if m < 1:
        raise ValidationError("modality count must be >= 1")
    if not 1 <= j <= m:
        raise ValidationError(f"modality index {j} out of range 1..{m}")
    return (j + m - 2) % m + 1


@dataclass(frozen=True)
class AblationSwitches:
    """Feature switches; gm_mask[k-1][j-1] gates modality k modifying j."""

    sam_on: bool = True
    gm_on: bool = True
    gm_mask: tuple[tuple[bool, ...], ...] | None = None

    def allows(self, source: int, target: int) -> bool:
        """Whether 1-based source modality may modify the target's gradient."""
        if self.gm_mask is None:
            return True
        return bool(self.gm_mask[source - 1][target - 1])


@dataclass(frozen=True)
class TrainConfig:
    out_iters: int = 5
    inner_iters: int | None = None  # None: one pass over the train split
    batch_size: int = 12
    lr: float | tuple[float, ...] = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_patience: int = 2
    feature_dim: int = 64
    encoder_hidden: int = 128
    sam: SamConfig = field(default_factory=SamConfig)
    gm: GmConfig = field(default_factory=GmConfig)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    seed: int = 0

    def __post_init__(self):
        if self.out_iters < 1 or self.batch_size < 1:
            raise ValidationError("out_iters and batch_size must be >= 1")
        if self.inner_iters is not None and self.inner_iters < 1:
            raise ValidationError("inner_iters must be >= 1 when given")
        if self.plateau_patience < 1:
            raise ValidationError("plateau_patience must be >= 1")
        if self.feature_dim < 1 or self.encoder_hidden < 1:
            raise ValidationError("model dims must be >= 1")
        lrs = self.lr if isinstance(self.lr, tuple) else (self.lr,)
        if any(v <= 0 for v in lrs):
            raise ValidationError("learning rates must be positive")

    def lr_for(self, j: int, m: int) -> float:
        """Learning rate for 1-based modality j."""
        if isinstance(self.lr, tuple):
            if len(self.lr) != m:
                raise ValidationError(f"lr tuple has {len(self.lr)} entries for {m} modalities")
            return float(self.lr[j - 1])
        return float(self.lr)

    def rho_for(self, j: int, m: int) -> float:
        if isinstance(self.sam.rho, tuple):
            if len(self.sam.rho) != m:
                raise ValidationError(
                    f"rho tuple has {len(self.sam.rho)} entries for {m} modalities"
                )
            return float(self.sam.rho[j - 1])
        return float(self.sam.rho)


@dataclass
class OptimizerState:
    """Momentum buffer, shape-congruent with its model's gradients."""

    velocity: GradientSet


@dataclass(frozen=True)
class PhaseRecord:
    outer_iter: int
    modality_index: int
    phase_end_multi_accuracy: float
    phase_end_per_modality_accuracy: tuple[float, ...]
    mean_train_loss: float


@dataclass
class TrainResult:
    models: list[ModalityModel]
    phase_trace: list[PhaseRecord]
    final_metrics: dict
    singular_records: list[dict]


def sgd_step(
    model: ModalityModel,
    grad_modified: GradientSet,
    opt: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One momentum-SGD update: v <- momentum v + (g + wd theta); theta -= lr v."""
    layers = model.layers
    for i, layer in enumerate(layers):
        gw = grad_modified.weight_grads[i] + weight_decay * layer.weights
        gb = grad_modified.bias_grads[i] + weight_decay * layer.biases
        vw = opt.velocity.weight_grads[i]
        vb = opt.velocity.bias_grads[i]
        vw *= momentum
        vw += gw
        vb *= momentum
        vb += gb
        layer.weights = layer.weights - lr * vw
        layer.biases = layer.biases - lr * vb
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
            raise NumericError(
                f"non-finite parameters after update of layer {i} "
                f"(lr={lr}, momentum={momentum})"
            )


def _predictions(models: Sequence[ModalityModel], dataset: MultimodalDataset, idx) -> ev.PredictionSet:
    preds = [forward(model, dataset.features[j][idx]).prediction for j, model in enumerate(models)]
    return ev.PredictionSet(per_modality=preds, labels=dataset.labels[idx])


def _phase_accuracies(models, dataset, idx) -> tuple[float, tuple[float, ...]]:
    preds = _predictions(models, dataset, idx)
    fused = ev.fuse_average(preds)
    multi = ev.accuracy(fused, preds.labels)
    per_mod = tuple(ev.accuracy(p, preds.labels) for p in preds.per_modality)
    return multi, per_mod


def train(dataset: MultimodalDataset, config: TrainConfig) -> TrainResult:
    """Run the full alternating schedule on the dataset's train split.

    Deterministic for a fixed (dataset, config): initialization and every
    shuffle derive from config.seed. Phase-end accuracies in the trace
    are computed on the test split. The covariance pass and matrix
    rebuild run regardless of the gm switch so spectrum reports exist for
    every variant; the switch only gates whether matrices touch updates.
    """
    m = dataset.m
    train_idx = dataset.split_indices("train")
    if train_idx.size == 0:
        raise ValidationError("train split is empty")
    test_idx = dataset.split_indices("test")
    if test_idx.size == 0:
        raise ValidationError("test split is empty")

    init_rng = np.random.default_rng([config.seed, 0xA11])
    models = [
        init_model(
            dataset.dims[j],
            dataset.c,
            init_rng,
            feature_dim=config.feature_dim,
            encoder_hidden=config.encoder_hidden,
        )
        for j in range(m)
    ]
    opts = [OptimizerState(velocity=zero_gradients(model)) for model in models]
    monitored = [monitored_layer_indices(model, config.gm.scope) for model in models]
    gm_states: list[dict[int, GradModState]] = [
        {
            idx: GradModState(layer_index=idx, dim=models[j].layers[idx].in_dim)
            for idx in monitored[j]
        }
        for j in range(m)
    ]
    lrs = [config.lr_for(j + 1, m) for j in range(m)]
    best_loss = [np.inf] * m
    stall = [0] * m

    steps_per_epoch = int(np.ceil(train_idx.size / config.batch_size))
    inner_iters = config.inner_iters if config.inner_iters is not None else steps_per_epoch

    trace: list[PhaseRecord] = []
    for outer in range(1, config.out_iters + 1):
        for j1 in range(1, m + 1):
            j = j1 - 1
            model = models[j]
            source = modality_index(j1, m)
            source_states = gm_states[source - 1]
            apply_gm = config.ablation.gm_on and config.ablation.allows(source, j1)
            rho = config.rho_for(j1, m)
            sam_cfg = replace(config.sam, rho=rho)

            losses = []
            step = 0
            epoch = 0
            while step < inner_iters:
                epoch += 1
                epoch_batches = batches(
                    dataset, "train", config.batch_size,
                    [config.seed, outer, j1, epoch],
                )
                for idx in epoch_batches:
                    if step >= inner_iters:
                        break
                    batch = (dataset.features[j][idx], dataset.labels[idx])
                    losses.append(batch_loss(model, batch))
                    if config.ablation.sam_on:
                        grad = sam_gradient(model, batch, sam_cfg)
                    else:
                        grad = backward(model, batch)
                    if apply_gm:
                        for layer_idx in monitored[j]:
                            state = source_states.get(layer_idx)
                            if state is None:
                                continue
                            g = grad.weight_grads[layer_idx]
                            if state.dim != g.shape[0]:
                                continue  # heterogeneous layer, no transfer
                            grad.weight_grads[layer_idx] = modify(state.t_matrix, g)
                    sgd_step(
                        model, grad, opts[j], lrs[j], config.momentum, config.weight_decay
                    )
                    step += 1

            # Fresh covariance snapshot of the just-trained modality.
            for idx in ordered_batches(dataset, "train", config.batch_size):
                tr = forward(model, dataset.features[j][idx])
                for layer_idx in monitored[j]:
                    accumulate(gm_states[j][layer_idx], tr.layer_inputs[layer_idx])
            for layer_idx in monitored[j]:
                build_t_matrix(gm_states[j][layer_idx], config.gm)

            mean_loss = float(np.mean(losses)) if losses else float("nan")
            if best_loss[j] - mean_loss >= PLATEAU_MIN_DELTA:
                best_loss[j] = mean_loss
                stall[j] = 0
            else:
                stall[j] += 1
                if stall[j] >= config.plateau_patience:
                    lrs[j] /= 10.0
                    stall[j] = 0

            multi_acc, per_mod_acc = _phase_accuracies(models, dataset, test_idx)
            trace.append(
                PhaseRecord(
                    outer_iter=outer,
                    modality_index=j1,
                    phase_end_multi_accuracy=multi_acc,
                    phase_end_per_modality_accuracy=per_mod_acc,
                    mean_train_loss=mean_loss,
                )
            )

    preds = _predictions(models, dataset, test_idx)
    final_metrics = {
        "split": "test",
        "per_modality": [
            dataclasses.asdict(ev.metrics_report(p, preds.labels)) for p in preds.per_modality
        ],
        "fused_average": dataclasses.asdict(
            ev.metrics_report(ev.fuse_average(preds), preds.labels)
        ),
        "fused_weighted": dataclasses.asdict(
            ev.metrics_report(ev.fuse_weighted(preds), preds.labels)
        ),
    }
    singular_records = []
    for j in range(m):
        if not gm_states[j]:
            continue
        for rec in singular_report(gm_states[j]):
            layer = models[j].layers[rec.layer_index]
            singular_records.append(
                {
                    "modality": j + 1,
                    "layer_index": rec.layer_index,
                    "layer": f"fc{rec.layer_index + 1} ({layer.in_dim}x{layer.out_dim})",
                    "max": rec.max_singular,
                    "mean": rec.mean_singular,
                }
            )
    return TrainResult(
        models=models,
        phase_trace=trace,
        final_metrics=final_metrics,
        singular_records=singular_records,
    )


@dataclass(frozen=True)
class AblationCell:
    """One grid cell: a label plus dotted-path overrides onto the base config."""

    label: str
    overrides: dict


@dataclass(frozen=True)
class AblationGrid:
    cells: tuple[AblationCell, ...]
    seeds: tuple[int, ...]

    def __post_init__(self):
        if len(self.seeds) == 0:
            raise ValidationError("ablation grid needs at least one seed")


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply dotted-path overrides (e.g. "gm.tau") to a config."""
    plain: dict = {}
    nested: dict[str, dict] = {}
    for key, value in overrides.items():
        if "." in key:
            head, rest = key.split(".", 1)
            nested.setdefault(head, {})[rest] = value
        else:
            plain[key] = value
    for head, sub in nested.items():
        if not hasattr(config, head):
            raise ValidationError(f"unknown config section {head!r}")
        plain[head] = replace(getattr(config, head), **sub)
    try:
        return replace(config, **plain)
    except TypeError as exc:
        raise ValidationError(f"bad override: {exc}") from exc


def run_ablation_cell(args) -> dict:
    """Single run of one (cell, seed) pair; module-level so pools can pickle it."""
    dataset, base_config, cell, seed = args
    config = apply_overrides(base_config, dict(cell.overrides))
    config = replace(config, seed=seed)
    result = train(dataset, config)
    return {
        "cell": cell.label,
        "overrides": dict(cell.overrides),
        "seed": seed,
        "metrics": result.final_metrics,
        "singular": result.singular_records,
    }


def _aggregate(records: list[dict]) -> list[dict]:
    cells: dict[str, list[dict]] = {}
    for rec in records:
        cells.setdefault(rec["cell"], []).append(rec)
    summary = []
    for label, runs in cells.items():
        entry = {"cell": label, "n_runs": len(runs), "metrics": {}}
        for fusion in ("fused_average", "fused_weighted"):
            for metric in ("accuracy", "mean_average_precision", "macro_f1"):
                values = [r["metrics"][fusion][metric] for r in runs]
                entry["metrics"][f"{fusion}.{metric}"] = {
                    "mean": float(np.mean(values)),
                    "stddev": float(np.std(values)),
                }
        m = len(runs[0]["metrics"]["per_modality"])
        for j in range(m):
            for metric in ("accuracy", "mean_average_precision", "macro_f1"):
                values = [r["metrics"]["per_modality"][j][metric] for r in runs]
                entry["metrics"][f"modality{j + 1}.{metric}"] = {
                    "mean": float(np.mean(values)),
                    "stddev": float(np.std(values)),
                }
        summary.append(entry)
    return summary


def ablate(
    dataset: MultimodalDataset,
    base_config: TrainConfig,
    grid: AblationGrid,
    workers: int = 1,
) -> dict:
    """Run every (cell, seed) combination; returns runs plus per-cell stats.

    Cells run independently; `workers` > 1 fans them out to a process
    pool. Results are ordered by (cell, seed) regardless of scheduling.
    """
    jobs = [
        (dataset, base_config, cell, seed) for cell in grid.cells for seed in grid.seeds
    ]
    if not jobs:
        return {"runs": [], "summary": []}
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            records = list(pool.map(run_ablation_cell, jobs))
    else:
        records = [run_ablation_cell(job) for job in jobs]
    return {"runs": records, "summary": _aggregate(records)}
