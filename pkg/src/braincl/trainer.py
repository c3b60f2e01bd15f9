"""Sequential-session training engine.

One session trains the student on a single dataset. From the second
session on, the model that finished the previous session is frozen as the
teacher: its responses and bottleneck features on the current (augmented)
inputs regularize the student, with the response term weighted by a
coefficient fixed per session from the teacher's Dice deficit on the
incoming data. No sample from an earlier dataset is ever read while
training (enforced by an access-auditing wrapper around every train split).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .domain import ModalityUniverse, ValidationError, gate_input_bits
from .losses import LossConfig, dynamic_alpha, total_loss
from .metrics import TrainTestMatrix, dsc
from .moe_unet import ModelConfig, MoEUNet3D, parameter_checksum, save_checkpoint
from .synthdata import DatasetSpec, SyntheticDataset, VolumeSample

STRATEGY_NAMES = ("proposed", "naive", "static_kd", "ablation")


class SessionDiverged(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic record."""

    def __init__(self, record: dict):
        super().__init__(f"non-finite loss in session {record.get('session')}")
        self.record = record


@dataclass(frozen=True)
class Strategy:
    """Which pieces of the training objective and conditioning are active."""

    name: str = "proposed"
    use_kld: bool = True
    use_cosine: bool = True
    token_mode: str = "d+m"
    use_modality_drop: bool = True
    static_alpha: float | None = None

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ValidationError(f"strategy name must be one of {STRATEGY_NAMES}")
        if self.name == "naive" and (self.use_kld or self.use_cosine):
            raise ValidationError("naive strategy cannot use distillation terms")
        if self.name == "static_kd":
            if not self.use_kld or self.use_cosine:
                raise ValidationError("static_kd uses the response term only")
            if self.static_alpha is None:
                raise ValidationError("static_kd requires static_alpha")
        if self.static_alpha is not None and self.static_alpha < 0:
            raise ValidationError("static_alpha must be >= 0")

    @classmethod
    def proposed(cls) -> "Strategy":
        return cls()

    @classmethod
    def naive(cls) -> "Strategy":
        return cls(name="naive", use_kld=False, use_cosine=False, token_mode="none")

    @classmethod
    def static_kd(cls, alpha: float, token_mode: str = "none") -> "Strategy":
        return cls(
            name="static_kd",
            use_kld=True,
            use_cosine=False,
            token_mode=token_mode,
            static_alpha=alpha,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "use_kld": self.use_kld,
            "use_cosine": self.use_cosine,
            "token_mode": self.token_mode,
            "use_modality_drop": self.use_modality_drop,
            "static_alpha": self.static_alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Strategy":
        return cls(**d)


@dataclass
class SequenceConfig:
    """Everything needed to reproduce one sequential run."""

    name: str
    datasets: list[DatasetSpec]
    universe: ModalityUniverse
    strategy: Strategy = field(default_factory=Strategy.proposed)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 30
    batch_size: int = 4
    patch_shape: tuple[int, int, int] = (16, 16, 16)
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    p_drop: float = 0.3
    fg_bias: float = 0.5
    eval_overlap: float = 0.5
    widths: tuple[int, ...] = (8, 16, 32)
    experts: int = 4
    seed: int = 0

    def __post_init__(self):
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        self.widths = tuple(int(v) for v in self.widths)
        self.betas = tuple(float(v) for v in self.betas)
        if len(self.datasets) < 2:
            raise ValidationError("a sequence needs at least 2 datasets")
        ids = [spec.id for spec in self.datasets]
        if len(set(ids)) != len(ids):
            raise ValidationError("dataset ids in a sequence must be unique")
        for spec in self.datasets:
            spec.validate(self.universe)
        mult = 2 ** (len(self.widths) - 1)
        if any(p % mult != 0 for p in self.patch_shape):
            raise ValidationError(
                f"patch shape {self.patch_shape} must be multiples of {mult}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.eval_overlap < 1.0:
            raise ValidationError("eval overlap must be in [0, 1)")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValidationError("p_drop must be in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.universe.num_modalities,
            token_len=self.universe.token_length,
            widths=self.widths,
            experts=self.experts,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "datasets": [s.to_dict() for s in self.datasets],
            "universe": self.universe.to_dict(),
            "strategy": self.strategy.to_dict(),
            "loss": self.loss.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patch_shape": list(self.patch_shape),
            "lr": self.lr,
            "betas": list(self.betas),
            "p_drop": self.p_drop,
            "fg_bias": self.fg_bias,
            "eval_overlap": self.eval_overlap,
            "widths": list(self.widths),
            "experts": self.experts,
            "seed": self.seed,
        }


def derive_seed(base: int, *parts) -> int:
    """Stable sub-seed from a base seed and a label path."""
    blob = json.dumps([base, *parts]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") % (2**63)


# ---------------------------------------------------------------------------
# Buffer-freedom audit


class AccessAuditor:
    """Records every train-split sample read against the session's dataset."""

    def __init__(self):
        self.events: list[dict] = []
        self._session = 0
        self._active: str | None = None

    def activate(self, session: int, dataset_id: str) -> None:
        self._session = session
        self._active = dataset_id

    def record(self, dataset_id: str) -> None:
        self.events.append(
            {"session": self._session, "active": self._active, "read": dataset_id}
        )

    def violations(self) -> list[dict]:
        return [e for e in self.events if e["read"] != e["active"]]


class AuditedTrainSplit:
    """The only handle the trainer holds on a dataset's training samples."""

    def __init__(self, dataset_id: str, samples: list[VolumeSample], auditor: AccessAuditor):
        self.dataset_id = dataset_id
        self._samples = samples
        self._auditor = auditor

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, idx: int) -> VolumeSample:
        self._auditor.record(self.dataset_id)
        return self._samples[idx]


# ---------------------------------------------------------------------------
# Inference


def sliding_window_infer(
    model: MoEUNet3D,
    sample: VolumeSample,
    patch_shape,
    overlap: float = 0.5,
    token_mode: str = "d+m",
    tile_batch: int = 8,
) -> np.ndarray:
    """Tile the volume, average overlapping foreground softmax, threshold at 0.5.

    The stride is patch * (1 - overlap); the final tile along each axis is
    snapped to the boundary. Volumes smaller than the patch are zero-padded
    and the prediction cropped back.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValidationError("overlap must be in [0, 1)")
    patch_shape = tuple(int(p) for p in patch_shape)
    vol_shape = sample.volume_shape
    padded_shape = tuple(max(v, p) for v, p in zip(vol_shape, patch_shape))

    packed = sample.packed
    if padded_shape != vol_shape:
        pad = [(0, ps - vs) for vs, ps in zip(vol_shape, padded_shape)]
        packed = np.pad(packed, [(0, 0)] + pad)

    starts_per_axis = []
    for dim, p in zip(padded_shape, patch_shape):
        stride = max(1, int(round(p * (1.0 - overlap))))
        starts = list(range(0, dim - p + 1, stride))
        if starts[-1] != dim - p:
            starts.append(dim - p)
        starts_per_axis.append(starts)

    corners = [
        (a, b, c)
        for a in starts_per_axis[0]
        for b in starts_per_axis[1]
        for c in starts_per_axis[2]
    ]

    dtype = next(model.parameters()).dtype
    bits = torch.as_tensor(
        gate_input_bits(sample.token, token_mode), dtype=dtype
    )
    prob = np.zeros(padded_shape, dtype=np.float64)
    count = np.zeros(padded_shape, dtype=np.float64)

    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(corners), tile_batch):
            chunk = corners[i : i + tile_batch]
            tiles = np.stack(
                [
                    packed[
                        :,
                        a : a + patch_shape[0],
                        b : b + patch_shape[1],
                        c : c + patch_shape[2],
                    ]
                    for a, b, c in chunk
                ]
            )
            x = torch.as_tensor(tiles, dtype=dtype)
            logits, _ = model(x, bits.expand(len(chunk), -1))
            fg = torch.softmax(logits, dim=1)[:, 1].numpy()
            for tile_fg, (a, b, c) in zip(fg, chunk):
                sl = (
                    slice(a, a + patch_shape[0]),
                    slice(b, b + patch_shape[1]),
                    slice(c, c + patch_shape[2]),
                )
                prob[sl] += tile_fg
                count[sl] += 1.0
    if was_training:
        model.train()

    mask = (prob / count > 0.5).astype(np.uint8)
    crop = tuple(slice(0, v) for v in vol_shape)
    return mask[crop]


def evaluate_dataset(
    model: MoEUNet3D, samples: list[VolumeSample], cfg: SequenceConfig
) -> float:
    """Mean DSC of sliding-window predictions over a list of test samples."""
    scores = [
        dsc(
            sliding_window_infer(
                model,
                s,
                cfg.patch_shape,
                cfg.eval_overlap,
                cfg.strategy.token_mode,
            ),
            s.mask,
        )
        for s in samples
    ]
    return float(np.mean(scores))


def estimate_shift(
    teacher: MoEUNet3D, split: AuditedTrainSplit, cfg: SequenceConfig
) -> float:
    """Frozen teacher's mean DSC on the incoming dataset's train split.

    Run once at session start with no augmentation or modality drop; the
    deficit (1 - value) drives the response-distillation coefficient.
    """
    samples = [split[i] for i in range(len(split))]
    return evaluate_dataset(teacher, samples, cfg)


# ---------------------------------------------------------------------------
# Training


@dataclass
class SessionState:
    session_index: int
    student: MoEUNet3D
    teacher: MoEUNet3D | None = None
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    checkpoints: list[str] = field(default_factory=list)

    def __post_init__(self):
        if (self.teacher is not None) != (self.session_index >= 2):
            raise ValidationError("teacher must exist exactly from session 2 on")


def _rotate90(sample: VolumeSample, rng: np.random.Generator) -> VolumeSample:
    axes = ((0, 1), (0, 2), (1, 2))[int(rng.integers(3))]
    k = int(rng.integers(4))
    shape = sample.volume_shape
    if shape[axes[0]] != shape[axes[1]] and k % 2 == 1:
        k = (k + 1) % 4  # odd quarter-turns only swap equal-length axes
    if k == 0:
        return sample
    packed = np.ascontiguousarray(
        np.rot90(sample.packed, k, axes=(axes[0] + 1, axes[1] + 1))
    )
    mask = np.ascontiguousarray(np.rot90(sample.mask, k, axes=axes))
    return VolumeSample(packed, mask, sample.token, sample.present.copy())


def _assemble_batch(
    split: AuditedTrainSplit,
    indices,
    cfg: SequenceConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    xs, masks, bits = [], [], []
    for idx in indices:
        sample = split[int(idx)]
        patch = synthdata.sample_patch(sample, cfg.patch_shape, rng, cfg.fg_bias)
        patch = _rotate90(patch, rng)
        if cfg.strategy.use_modality_drop and cfg.p_drop > 0:
            patch = synthdata.drop_modalities(patch, cfg.p_drop, rng)
        xs.append(patch.packed)
        masks.append(patch.mask)
        bits.append(gate_input_bits(patch.token, cfg.strategy.token_mode))
    return (
        torch.as_tensor(np.stack(xs), dtype=torch.float32),
        torch.as_tensor(np.stack(masks).astype(np.int64)),
        torch.as_tensor(np.stack(bits), dtype=torch.float32),
    )


def resolve_alpha(
    state: SessionState, split: AuditedTrainSplit, cfg: SequenceConfig
) -> float | None:
    """Session-constant response-distillation weight, or None when unused."""
    if state.session_index == 1 or not cfg.strategy.use_kld:
        return None
    if cfg.strategy.name == "static_kd":
        return float(cfg.strategy.static_alpha)
    shift = estimate_shift(state.teacher, split, cfg)
    return dynamic_alpha(shift, cfg.loss.alpha_min, cfg.loss.alpha_max)


def train_session(
    state: SessionState, split: AuditedTrainSplit, cfg: SequenceConfig
) -> dict:
    """Optimize the student on one dataset with the strategy's objective.

    Returns a session log: the alpha in effect, per-step loss breakdowns,
    and the teacher parameter checksum verified unchanged. Raises
    SessionDiverged on a non-finite loss.
    """
    t = state.session_index
    student = state.student
    teacher = state.teacher
    use_teacher = teacher is not None and (
        cfg.strategy.use_kld or cfg.strategy.use_cosine
    )
    alpha = resolve_alpha(state, split, cfg)

    teacher_checksum = parameter_checksum(teacher) if teacher is not None else None
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = state.data_rng

    steps: list[dict] = []
    epoch_means: list[float] = []
    student.train()
    step_idx = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(split))
        epoch_totals = []
        for start in range(0, len(order), cfg.batch_size):
            x, mask, bits = _assemble_batch(
                split, order[start : start + cfg.batch_size], cfg, rng
            )
            logits, features = student(x, bits)

            teacher_logits = student_feats = teacher_feats = None
            if use_teacher:
                with torch.no_grad():
                    t_logits, t_feats = teacher(x, bits)
                if cfg.strategy.use_kld:
                    teacher_logits = t_logits
                if cfg.strategy.use_cosine:
                    student_feats, teacher_feats = features, t_feats

            breakdown = total_loss(
                logits,
                mask,
                teacher_logits=teacher_logits,
                student_features=student_feats,
                teacher_features=teacher_feats,
                alpha_t=alpha if (alpha is not None and cfg.strategy.use_kld) else 0.0,
                cfg=cfg.loss,
            )
            if not np.isfinite(breakdown.total):
                raise SessionDiverged(
                    {
                        "session": t,
                        "epoch": epoch,
                        "step": step_idx,
                        "breakdown": breakdown.to_dict(),
                    }
                )
            optimizer.zero_grad()
            breakdown.tensor.backward()
            optimizer.step()

            steps.append(
                {"session": t, "epoch": epoch, "step": step_idx, **breakdown.to_dict()}
            )
            epoch_totals.append(breakdown.total)
            step_idx += 1
        epoch_means.append(float(np.mean(epoch_totals)))

    if teacher is not None and parameter_checksum(teacher) != teacher_checksum:
        raise RuntimeError("teacher parameters changed during session")
    return {
        "session": t,
        "alpha_t": alpha,
        "steps": steps,
        "epoch_mean_total": epoch_means,
        "teacher_checksum": teacher_checksum,
    }


# ---------------------------------------------------------------------------
# Full sequence


def _write_matrix_file(path: Path, cfg, rows, alphas, failure: dict | None = None):
    doc = {
        "datasets": [s.id for s in cfg.datasets],
        "dsc": [[float(v) for v in row] for row in rows],
        "alpha_t": alphas,
        "strategy": cfg.strategy.to_dict(),
    }
    if failure is not None:
        doc["failed_session"] = failure["session"]
        doc["error"] = failure.get("error", "non-finite loss")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def run_sequence(
    cfg: SequenceConfig,
    run_dir,
    datasets: list[SyntheticDataset] | None = None,
) -> tuple[TrainTestMatrix, dict]:
    """Train through all sessions, evaluating every test set after each one.

    Returns the filled train-test matrix and an artifact summary (alphas,
    audit events, paths). Everything is deterministic given cfg.seed. On a
    diverged session the partial matrix is persisted with a failure marker
    and SessionDiverged is re-raised.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    if datasets is None:
        datasets = [synthdata.generate_dataset(spec, cfg.universe) for spec in cfg.datasets]
    else:
        by_id = {d.spec.id: d for d in datasets}
        datasets = [by_id[spec.id] for spec in cfg.datasets]

    auditor = AccessAuditor()
    train_splits = []
    test_splits = []
    for ds in datasets:
        train_norm = [synthdata.znormalize(s) for s in ds.train]
        test_splits.append([synthdata.znormalize(s) for s in ds.test])
        train_splits.append(AuditedTrainSplit(ds.spec.id, train_norm, auditor))

    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    student = MoEUNet3D(cfg.model_config())

    rows: list[list[float]] = []
    alphas: list[float | None] = []
    session_logs: list[dict] = []
    failure = None
    matrix = None

    try:
        teacher = None
        for t in range(1, len(datasets) + 1):
            split = train_splits[t - 1]
            auditor.activate(t, split.dataset_id)
            state = SessionState(
                session_index=t,
                student=student,
                teacher=teacher,
                data_rng=np.random.default_rng(derive_seed(cfg.seed, "session", t)),
            )
            session_dir = run_dir / f"session_{t}"
            session_dir.mkdir(exist_ok=True)

            log = train_session(state, split, cfg)
            alphas.append(log["alpha_t"])
            session_logs.append(log)
            with open(session_dir / "log.jsonl", "w") as fh:
                for rec in log["steps"]:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            save_checkpoint(student, session_dir / "checkpoint.zip")

            rows.append([evaluate_dataset(student, ts, cfg) for ts in test_splits])

            teacher = copy.deepcopy(student)
            teacher.eval()
            for p in teacher.parameters():
                p.requires_grad_(False)
    except SessionDiverged as exc:
        failure = {"session": exc.record["session"], "error": str(exc)}
        _write_matrix_file(run_dir / "matrix.json", cfg, rows, alphas, failure)
        _write_audit(run_dir, auditor)
        raise

    matrix = TrainTestMatrix([s.id for s in cfg.datasets], np.array(rows))
    _write_matrix_file(run_dir / "matrix.json", cfg, rows, alphas)
    _write_audit(run_dir, auditor)

    artifacts = {
        "run_dir": str(run_dir),
        "alphas": alphas,
        "audit_events": len(auditor.events),
        "audit_violations": auditor.violations(),
        "session_logs": session_logs,
    }
    return matrix, artifacts


def _write_audit(run_dir: Path, auditor: AccessAuditor) -> None:
    doc = {
        "events": len(auditor.events),
        "past_dataset_reads": auditor.violations(),
    }
    (run_dir / "audit.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
