"""Declarative experiment files: one YAML document describes the universe,
the synthetic datasets, the session order, and every training knob.

Validation is strict: unknown keys are rejected and every error names the
offending field path, so a typo fails fast instead of silently using a
default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .domain import ModalityUniverse
from .losses import LossConfig
from .synthdata import DatasetSpec, LesionParams
from .trainer import SequenceConfig, Strategy


class ExperimentError(ValueError):
    """Schema violation; message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.field_path = path


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ExperimentError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(doc: dict, allowed, path: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ExperimentError(
            f"{path}.{unknown[0]}" if path else unknown[0], "unknown key"
        )


def _get(doc: dict, key: str, kind, path: str, default=..., required: bool = False):
    full = f"{path}.{key}" if path else key
    if key not in doc:
        if required:
            raise ExperimentError(full, "missing required key")
        return default
    value = doc[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ExperimentError(full, "expected an integer, got a boolean")
    if not isinstance(value, kind):
        raise ExperimentError(
            full, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}"
        )
    return value


def _int_pair(doc, key, path, default):
    value = _get(doc, key, list, path, default=None)
    if value is None:
        return default
    full = f"{path}.{key}"
    if len(value) != 2 or not all(isinstance(v, (int, float)) for v in value):
        raise ExperimentError(full, "expected a pair of numbers")
    return tuple(value)


@dataclass
class Experiment:
    """A parsed, validated experiment document."""

    name: str
    seed: int
    output_root: str
    data_root: str
    universe: ModalityUniverse
    dataset_specs: list[DatasetSpec]
    sequence: list[str]
    strategy: Strategy
    loss: LossConfig
    trainer_kwargs: dict = field(default_factory=dict)

    def runs_root(self) -> Path:
        return Path(os.environ.get("BRAINCL_RUNS_ROOT", self.output_root))

    def sequence_config(
        self, strategy: Strategy | None = None, seed: int | None = None
    ) -> SequenceConfig:
        by_id = {s.id: s for s in self.dataset_specs}
        return SequenceConfig(
            name=self.name,
            datasets=[by_id[i] for i in self.sequence],
            universe=self.universe,
            strategy=strategy if strategy is not None else self.strategy,
            loss=self.loss,
            seed=self.seed if seed is None else seed,
            **self.trainer_kwargs,
        )


_STRATEGY_PRESETS = {
    "proposed": {"use_kld": True, "use_cosine": True, "token_mode": "d+m"},
    "naive": {"use_kld": False, "use_cosine": False, "token_mode": "none"},
    "static_kd": {"use_kld": True, "use_cosine": False, "token_mode": "none"},
    "ablation": {"use_kld": True, "use_cosine": True, "token_mode": "d+m"},
}


def build_strategy(doc: dict, path: str = "strategy") -> Strategy:
    doc = _require_mapping(doc, path)
    _check_keys(
        doc,
        ("name", "use_kld", "use_cosine", "token_mode", "use_modality_drop", "static_alpha"),
        path,
    )
    name = _get(doc, "name", str, path, default="proposed")
    if name not in _STRATEGY_PRESETS:
        raise ExperimentError(
            f"{path}.name", f"must be one of {sorted(_STRATEGY_PRESETS)}"
        )
    merged = {"name": name, "use_modality_drop": True, **_STRATEGY_PRESETS[name]}
    for key in ("use_kld", "use_cosine", "use_modality_drop"):
        if key in doc:
            merged[key] = _get(doc, key, bool, path)
    if "token_mode" in doc:
        merged["token_mode"] = _get(doc, "token_mode", str, path)
    if "static_alpha" in doc:
        merged["static_alpha"] = _get(doc, "static_alpha", float, path)
    try:
        return Strategy(**merged)
    except ValueError as exc:
        raise ExperimentError(path, str(exc)) from None


def _build_dataset(doc: dict, universe: ModalityUniverse, path: str) -> DatasetSpec:
    doc = _require_mapping(doc, path)
    _check_keys(
        doc,
        ("id", "modalities", "pathology", "n_train", "n_test", "volume_shape",
         "lesion_params", "seed"),
        path,
    )
    lesion = LesionParams()
    if "lesion_params" in doc:
        lp = _require_mapping(doc["lesion_params"], f"{path}.lesion_params")
        _check_keys(lp, ("count_range", "radius_range", "contrast"), f"{path}.lesion_params")
        contrast = None
        if "contrast" in lp:
            contrast = _require_mapping(lp["contrast"], f"{path}.lesion_params.contrast")
            for mod, value in contrast.items():
                if mod not in universe.names:
                    raise ExperimentError(
                        f"{path}.lesion_params.contrast.{mod}", "unknown modality"
                    )
                if not isinstance(value, (int, float)):
                    raise ExperimentError(
                        f"{path}.lesion_params.contrast.{mod}", "expected a number"
                    )
        lesion = LesionParams(
            count_range=_int_pair(lp, "count_range", f"{path}.lesion_params", None),
            radius_range=_int_pair(lp, "radius_range", f"{path}.lesion_params", None),
            contrast=dict(contrast) if contrast else None,
        )

    modalities = _get(doc, "modalities", list, path, required=True)
    for i, mod in enumerate(modalities):
        if mod not in universe.names:
            raise ExperimentError(f"{path}.modalities[{i}]", f"unknown modality {mod!r}")
    pathology = _get(doc, "pathology", str, path, required=True)
    if pathology not in universe.pathology_names:
        raise ExperimentError(f"{path}.pathology", f"unknown pathology {pathology!r}")

    shape = _get(doc, "volume_shape", list, path, default=[16, 16, 16])
    if len(shape) != 3 or not all(isinstance(v, int) and v >= 8 for v in shape):
        raise ExperimentError(f"{path}.volume_shape", "expected 3 integers >= 8")

    spec = DatasetSpec(
        id=_get(doc, "id", str, path, required=True),
        modalities=tuple(modalities),
        pathology=pathology,
        n_train=_get(doc, "n_train", int, path, required=True),
        n_test=_get(doc, "n_test", int, path, required=True),
        volume_shape=tuple(shape),
        lesion_params=lesion,
        seed=_get(doc, "seed", int, path, default=0),
    )
    try:
        spec.validate(universe)
    except ValueError as exc:
        raise ExperimentError(path, str(exc)) from None
    return spec


_TRAINER_KEYS = {
    "epochs": int,
    "batch_size": int,
    "patch_shape": list,
    "lr": float,
    "betas": list,
    "p_drop": float,
    "fg_bias": float,
    "eval_overlap": float,
    "widths": list,
    "experts": int,
}

_LOSS_KEYS = {
    "temperature": float,
    "beta": float,
    "alpha_min": float,
    "alpha_max": float,
    "dice_smooth": float,
    "kld_direction": str,
}


def load_experiment(path) -> Experiment:
    """Parse and validate an experiment YAML file."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ExperimentError("<file>", f"invalid YAML: {exc}") from None
    doc = _require_mapping(doc, "")
    _check_keys(
        doc,
        ("name", "seed", "output_root", "data_root", "universe", "datasets",
         "sequence", "strategy", "loss", "trainer"),
        "",
    )

    universe = ModalityUniverse()
    if "universe" in doc:
        u = _require_mapping(doc["universe"], "universe")
        _check_keys(u, ("modalities", "pathologies"), "universe")
        try:
            universe = ModalityUniverse(
                tuple(_get(u, "modalities", list, "universe", required=True)),
                tuple(_get(u, "pathologies", list, "universe", required=True)),
            )
        except ValueError as exc:
            raise ExperimentError("universe", str(exc)) from None

    raw_datasets = _get(doc, "datasets", list, "", required=True)
    if not raw_datasets:
        raise ExperimentError("datasets", "at least one dataset is required")
    specs = [
        _build_dataset(d, universe, f"datasets[{i}]") for i, d in enumerate(raw_datasets)
    ]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ExperimentError("datasets", "dataset ids must be unique")

    sequence = _get(doc, "sequence", list, "", required=True)
    for i, ds_id in enumerate(sequence):
        if ds_id not in ids:
            raise ExperimentError(f"sequence[{i}]", f"undefined dataset id {ds_id!r}")
    if len(sequence) != len(set(sequence)):
        raise ExperimentError("sequence", "dataset ids may appear only once")
    if len(sequence) < 2:
        raise ExperimentError("sequence", "a sequence needs at least 2 datasets")

    strategy = Strategy.proposed()
    if "strategy" in doc:
        strategy = build_strategy(doc["strategy"])

    loss_kwargs = {}
    if "loss" in doc:
        loss_doc = _require_mapping(doc["loss"], "loss")
        _check_keys(loss_doc, _LOSS_KEYS, "loss")
        for key, kind in _LOSS_KEYS.items():
            if key in loss_doc:
                loss_kwargs[key] = _get(loss_doc, key, kind, "loss")
    try:
        loss = LossConfig(**loss_kwargs)
    except ValueError as exc:
        raise ExperimentError("loss", str(exc)) from None

    trainer_kwargs = {}
    if "trainer" in doc:
        tr = _require_mapping(doc["trainer"], "trainer")
        _check_keys(tr, _TRAINER_KEYS, "trainer")
        for key, kind in _TRAINER_KEYS.items():
            if key in tr:
                value = _get(tr, key, kind, "trainer")
                trainer_kwargs[key] = tuple(value) if kind is list else value

    return Experiment(
        name=_get(doc, "name", str, "", required=True),
        seed=_get(doc, "seed", int, "", default=0),
        output_root=_get(doc, "output_root", str, "", default="runs"),
        data_root=_get(doc, "data_root", str, "", default="data"),
        universe=universe,
        dataset_specs=specs,
        sequence=list(sequence),
        strategy=strategy,
        loss=loss,
        trainer_kwargs=trainer_kwargs,
    )
