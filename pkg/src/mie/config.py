"""Flat `key = value` run configuration with dotted sections.

Lines are `section.key = value`; `#` starts a comment. Unknown keys are
hard errors so sweep typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ValidationError
from .gradmod import GmConfig
from .sam import SamConfig
from .trainer import AblationCell, AblationGrid, AblationSwitches, TrainConfig

__all__ = [
    "RunConfig",
    "load_grid",
    "load_run_config",
    "parse_kv_file",
    "parse_mask",
]


def parse_kv_file(path) -> dict[str, str]:
    """Read a key = value file into an ordered dict of raw strings."""
    entries: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ValidationError(f"{path}:{lineno}: empty key or value")
        if key in entries:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "on", "yes", "1"):
        return True
    if low in ("false", "off", "no", "0"):
        return False
    raise ValidationError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ValidationError(f"{key}: expected an integer, got {value!r}") from exc


def _parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ValidationError(f"{key}: expected a number, got {value!r}") from exc


def _parse_floats(value: str, key: str) -> tuple[float, ...]:
    return tuple(_parse_float(part.strip(), key) for part in value.split(","))


def _parse_ints(value: str, key: str) -> tuple[int, ...]:
    return tuple(_parse_int(part.strip(), key) for part in value.split(","))


def _scalar_or_tuple(values: tuple[float, ...]) -> float | tuple[float, ...]:
    return values[0] if len(values) == 1 else values


def parse_mask(value: str, m: int, key: str = "gm.mask") -> tuple[tuple[bool, ...], ...] | None:
    """Parse a modification mask: "full" or pairs like "1->2+2->1"."""
    if value == "full":
        return None
    mask = [[False] * m for _ in range(m)]
    for pair in value.split("+"):
        pair = pair.strip()
        if "->" not in pair:
            raise ValidationError(f"{key}: expected 'full' or 'K->J' pairs, got {value!r}")
        src_s, dst_s = pair.split("->", 1)
        src = _parse_int(src_s.strip(), key)
        dst = _parse_int(dst_s.strip(), key)
        if not (1 <= src <= m and 1 <= dst <= m):
            raise ValidationError(f"{key}: pair {pair!r} out of range for {m} modalities")
        mask[src - 1][dst - 1] = True
    return tuple(tuple(row) for row in mask)


@dataclass
class RunConfig:
    """Everything a CLI invocation needs, resolved against defaults."""

    seed: int = 0
    out_dir: str = "runs/default"
    dataset_path: str | None = None
    fusion: str = "average"
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    landscape_grid_points: int = 41
    landscape_radius: float = 1.0
    landscape_samples: int = 256
    landscape_split: str = "test"
    landscape_modality: int = 1

    def __post_init__(self):
        if self.fusion not in ("average", "weighted"):
            raise ValidationError(f"fusion must be average or weighted, got {self.fusion!r}")


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse a config file; every key is optional, unknown keys reject."""
    entries = parse_kv_file(path)
    taken: set[str] = set()

    def pop(key: str) -> str | None:
        if key in entries:
            taken.add(key)
            return entries[key]
        return None

    def get(key: str, parser, default):
        raw = pop(key)
        return default if raw is None else parser(raw, key)

    seed = get("seed", _parse_int, 0)
    if seed_override is not None:
        seed = seed_override

    data_kwargs = dict(
        n=get("data.n", _parse_int, 2000),
        c=get("data.c", _parse_int, 10),
        m=get("data.m", _parse_int, 2),
        seed=seed,
    )
    dims = pop("data.dims")
    snr = pop("data.snr")
    splits = pop("data.splits")
    if dims is not None:
        data_kwargs["dims"] = tuple(_parse_ints(dims, "data.dims"))
    else:
        data_kwargs["dims"] = tuple([32] * data_kwargs["m"])
    if snr is not None:
        data_kwargs["snr"] = _parse_floats(snr, "data.snr")
    else:
        base = (3.0, 0.8)
        data_kwargs["snr"] = tuple(
            base[j] if j < len(base) else 0.8 for j in range(data_kwargs["m"])
        )
    if splits is not None:
        fracs = _parse_floats(splits, "data.splits")
        if len(fracs) != 3:
            raise ValidationError("data.splits: expected three fractions")
        data_kwargs["split_fractions"] = fracs
    data = SyntheticSpec(**data_kwargs)

    inner_raw = pop("train.inner_iters")
    if inner_raw is None or inner_raw == "auto":
        inner_iters = None
    else:
        inner_iters = _parse_int(inner_raw, "train.inner_iters")

    sam_cfg = SamConfig(
        rho=_scalar_or_tuple(get("sam.rho", _parse_floats, (0.05,))),
        zero_grad_threshold=get("sam.zero_grad_threshold", _parse_float, 1e-12),
    )
    gm_cfg = GmConfig(
        tau=get("gm.tau", _parse_float, 0.4),
        scope=get("gm.scope", lambda v, k: v, "head_only"),
        degenerate_tolerance=get("gm.degenerate_tolerance", _parse_float, 1e-12),
    )
    mask_raw = pop("gm.mask")
    mask = parse_mask(mask_raw, data.m) if mask_raw is not None else None
    switches = AblationSwitches(
        sam_on=get("sam.on", _parse_bool, True),
        gm_on=get("gm.on", _parse_bool, True),
        gm_mask=mask,
    )
    train = TrainConfig(
        out_iters=get("train.out_iters", _parse_int, 5),
        inner_iters=inner_iters,
        batch_size=get("train.batch_size", _parse_int, 12),
        lr=_scalar_or_tuple(get("train.lr", _parse_floats, (1e-2,))),
        momentum=get("train.momentum", _parse_float, 0.9),
        weight_decay=get("train.weight_decay", _parse_float, 1e-4),
        plateau_patience=get("train.plateau_patience", _parse_int, 2),
        feature_dim=get("train.feature_dim", _parse_int, 64),
        encoder_hidden=get("train.encoder_hidden", _parse_int, 128),
        sam=sam_cfg,
        gm=gm_cfg,
        ablation=switches,
        seed=seed,
    )

    config = RunConfig(
        seed=seed,
        out_dir=get("out.dir", lambda v, k: v, "runs/default"),
        dataset_path=pop("dataset.path"),
        fusion=get("fusion", lambda v, k: v, "average"),
        data=data,
        train=train,
        landscape_grid_points=get("landscape.grid_points", _parse_int, 41),
        landscape_radius=get("landscape.radius", _parse_float, 1.0),
        landscape_samples=get("landscape.samples", _parse_int, 256),
        landscape_split=get("landscape.split", lambda v, k: v, "test"),
        landscape_modality=get("landscape.modality", _parse_int, 1),
    )
    unknown = set(entries) - taken
    if unknown:
        raise ValidationError(f"{path}: unknown config keys: {sorted(unknown)}")
    return config


_GRID_KEYS = ("grid.sam", "grid.gm", "grid.tau", "grid.rho", "grid.scope", "grid.mask")


def load_grid(path, m: int) -> AblationGrid:
    """Parse a sweep file into ablation cells (Cartesian product) and seeds.

    Axes: grid.sam / grid.gm (booleans), grid.tau / grid.rho (numbers),
    grid.scope (head_only, deep fractions, or off), grid.mask (full or
    K->J pair lists). grid.seeds is required.
    """
    entries = parse_kv_file(path)
    unknown = set(entries) - set(_GRID_KEYS) - {"grid.seeds"}
    if unknown:
        raise ValidationError(f"{path}: unknown grid keys: {sorted(unknown)}")
    if "grid.seeds" not in entries:
        raise ValidationError(f"{path}: grid.seeds is required")
    seeds = _parse_ints(entries["grid.seeds"], "grid.seeds")
    if not seeds:
        raise ValidationError(f"{path}: grid.seeds must list at least one seed")

    axes: list[list[tuple[str, dict]]] = []
    if "grid.sam" in entries:
        axes.append(
            [
                (f"sam={'on' if v else 'off'}", {"ablation.sam_on": v})
                for v in _parse_bools(entries["grid.sam"], "grid.sam")
            ]
        )
    if "grid.gm" in entries:
        axes.append(
            [
                (f"gm={'on' if v else 'off'}", {"ablation.gm_on": v})
                for v in _parse_bools(entries["grid.gm"], "grid.gm")
            ]
        )
    if "grid.tau" in entries:
        axes.append(
            [
                (f"tau={v:g}", {"gm.tau": v})
                for v in _parse_floats(entries["grid.tau"], "grid.tau")
            ]
        )
    if "grid.rho" in entries:
        axes.append(
            [
                (f"rho={v:g}", {"sam.rho": v})
                for v in _parse_floats(entries["grid.rho"], "grid.rho")
            ]
        )
    if "grid.scope" in entries:
        values = []
        for part in entries["grid.scope"].split(","):
            part = part.strip()
            if part == "off":
                values.append(("scope=off", {"ablation.gm_on": False}))
            elif part == "head_only":
                values.append(("scope=head_only", {"gm.scope": "head_only"}))
            else:
                frac = _parse_float(part, "grid.scope")
                values.append((f"scope=deep:{frac:g}", {"gm.scope": f"deep:{frac:g}"}))
        axes.append(values)
    if "grid.mask" in entries:
        values = []
        for part in entries["grid.mask"].split(","):
            part = part.strip()
            values.append((f"mask={part}", {"ablation.gm_mask": parse_mask(part, m, "grid.mask")}))
        axes.append(values)

    cells: list[AblationCell] = []
    combos: list[tuple[str, dict]] = [("", {})]
    for axis in axes:
        combos = [
            (f"{label},{alabel}" if label else alabel, {**overrides, **aover})
            for label, overrides in combos
            for alabel, aover in axis
        ]
    if axes:
        cells = [AblationCell(label=label, overrides=ov) for label, ov in combos]
    return AblationGrid(cells=tuple(cells), seeds=seeds)


def _parse_bools(value: str, key: str) -> tuple[bool, ...]:
    return tuple(_parse_bool(part.strip(), key) for part in value.split(","))
