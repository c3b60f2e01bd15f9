"""Synthetic multi-modality 3D lesion datasets.

Volumes are packed into a fixed channel layout of length m (the universe's
modality count): channels of absent modalities are zero-filled, so a single
network can consume datasets with different modality sets. Each present
channel shares one smoothed anatomy field and adds a lesion contrast whose
sign and magnitude depend on (pathology, modality); different pathologies
therefore look genuinely different, which is what creates domain shift
between datasets in a sequence.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .domain import DomainToken, ModalityUniverse, ValidationError, build_domain_token

# Per pathology position in universe order: lesion count range (inclusive),
# lesion radius range (fraction of the smallest volume dim), and the same two
# for unlabeled distractor blobs. Distractor sizes are deliberately inverted
# against lesion sizes (large lesions come with small distractors and vice
# versa), so each dataset's "segment this, ignore that" rule contradicts the
# others' at the scale-selectivity level; that contradiction is what makes
# plain sequential fine-tuning forget.
# Per pathology position in universe order: lesion count range (inclusive),
# lesion radius range (fraction of the smallest volume dim), and the list of
# unlabeled distractor populations as (count_range, radius_frac, polarity).
# Each pathology's distractors are look-alikes of earlier pathologies'
# lesions (same size band and polarity): learning to ignore them actively
# contradicts what an earlier dataset learned to segment, which is what makes
# plain sequential fine-tuning forget, while a carried-over model still
# responds to them, so response distillation can defend the old rule.
_PATHOLOGY_PRIORS = (
    # bright large lesion; tiny dark distractors (neutral toward the others)
    ((1, 1), (0.20, 0.28), (((1, 2), (0.05, 0.08), -1.0),)),
    # dark medium lesions; bright large look-alikes of pathology 0
    ((1, 2), (0.12, 0.17), (((1, 1), (0.20, 0.28), 1.0),)),
    # bright small lesions; bright large look-alikes of pathology 0
    ((2, 4), (0.06, 0.09), (((1, 1), (0.20, 0.28), 1.0),)),
    # dark tiny lesions; bright small look-alikes of pathology 2
    ((3, 5), (0.05, 0.08), (((2, 3), (0.06, 0.09), 1.0),)),
)


def default_lesion_contrast(pathology_idx: int, modality_idx: int) -> float:
    """Signed lesion intensity offset for a (pathology, modality) pair.

    The sign is uniform within a pathology and alternates across pathologies
    (bright tumors, dark strokes, ...), so a detector tuned to one pathology
    conflicts with the next instead of all datasets being the same
    "bright blob" task. Magnitude varies mildly per modality.
    """
    sign = 1.0 if pathology_idx % 2 == 0 else -1.0
    mag = 4.0 + 0.4 * ((pathology_idx + 2 * modality_idx) % 3)
    return sign * mag


@dataclass(frozen=True)
class LesionParams:
    """Generator knobs; fields left as None fall back to pathology priors."""

    count_range: tuple[int, int] | None = None
    radius_range: tuple[float, float] | None = None  # voxels
    contrast: dict[str, float] | None = None  # per-modality signed offset

    def to_dict(self) -> dict:
        return {
            "count_range": list(self.count_range) if self.count_range else None,
            "radius_range": list(self.radius_range) if self.radius_range else None,
            "contrast": dict(self.contrast) if self.contrast else None,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "LesionParams":
        if not d:
            return cls()
        return cls(
            count_range=tuple(d["count_range"]) if d.get("count_range") else None,
            radius_range=tuple(d["radius_range"]) if d.get("radius_range") else None,
            contrast=dict(d["contrast"]) if d.get("contrast") else None,
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Identity and generation parameters of one synthetic dataset."""

    id: str
    modalities: tuple[str, ...]
    pathology: str
    n_train: int
    n_test: int
    volume_shape: tuple[int, int, int] = (16, 16, 16)
    lesion_params: LesionParams = field(default_factory=LesionParams)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "volume_shape", tuple(int(v) for v in self.volume_shape))

    def validate(self, universe: ModalityUniverse) -> None:
        if not self.id:
            raise ValidationError("dataset id must be non-empty")
        if not self.modalities:
            raise ValidationError(f"dataset {self.id}: modality set must be non-empty")
        for name in self.modalities:
            universe.modality_index(name)
        universe.pathology_index(self.pathology)
        if self.n_train < 1 or self.n_test < 1:
            raise ValidationError(f"dataset {self.id}: split sizes must be >= 1")
        if len(self.volume_shape) != 3 or any(s < 8 for s in self.volume_shape):
            raise ValidationError(
                f"dataset {self.id}: volume_shape must be 3 dims, each >= 8"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "modalities": list(self.modalities),
            "pathology": self.pathology,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "volume_shape": list(self.volume_shape),
            "lesion_params": self.lesion_params.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            id=d["id"],
            modalities=tuple(d["modalities"]),
            pathology=d["pathology"],
            n_train=int(d["n_train"]),
            n_test=int(d["n_test"]),
            volume_shape=tuple(d["volume_shape"]),
            lesion_params=LesionParams.from_dict(d.get("lesion_params")),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class VolumeSample:
    """K-channel packed volume with ground-truth mask and domain token."""

    packed: np.ndarray  # [m, D, H, W] float32; absent channels all zero
    mask: np.ndarray  # [D, H, W] uint8, values {0, 1}
    token: DomainToken
    present: np.ndarray  # [m] bool

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.packed.shape[1:])


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    universe: ModalityUniverse
    train: list[VolumeSample]
    test: list[VolumeSample]


def _resolve_lesion_params(spec: DatasetSpec, universe: ModalityUniverse) -> dict:
    p_idx = universe.pathology_index(spec.pathology)
    count_prior, radius_frac, distractor_priors = _PATHOLOGY_PRIORS[
        p_idx % len(_PATHOLOGY_PRIORS)
    ]
    lp = spec.lesion_params
    short = min(spec.volume_shape)
    count_range = lp.count_range or count_prior
    if lp.radius_range is not None:
        radius_range = lp.radius_range
    else:
        radius_range = (radius_frac[0] * short, radius_frac[1] * short)
    if count_range[0] < 1 or count_range[0] > count_range[1]:
        raise ValidationError(f"dataset {spec.id}: bad lesion count range {count_range}")
    if radius_range[0] <= 0 or radius_range[0] > radius_range[1]:
        raise ValidationError(f"dataset {spec.id}: bad lesion radius range {radius_range}")
    contrast = {}
    for name in spec.modalities:
        k = universe.modality_index(name)
        if lp.contrast and name in lp.contrast:
            contrast[k] = float(lp.contrast[name])
        else:
            contrast[k] = default_lesion_contrast(p_idx, k)
    distractors = [
        {"count_range": d_count, "radius_range": (d_frac[0] * short, d_frac[1] * short),
         "polarity": polarity}
        for d_count, d_frac, polarity in distractor_priors
    ]
    return {
        "count_range": count_range,
        "radius_range": radius_range,
        "distractors": distractors,
        "contrast": contrast,
    }


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field3d = gaussian_filter(rng.standard_normal(shape), sigma)
    field3d -= field3d.mean()
    std = field3d.std()
    if std > 0:
        field3d /= std
    return field3d


def _ellipsoid_union(
    rng: np.random.Generator,
    shape,
    count_range: tuple[int, int],
    radius_range: tuple[float, float],
) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    for _ in range(n):
        center = [rng.uniform(0.2 * s, 0.8 * s) for s in shape]
        base_r = rng.uniform(*radius_range)
        radii = [max(1.0, base_r * rng.uniform(0.9, 1.1)) for _ in shape]
        dist2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        mask |= dist2 <= 1.0
    return mask


def _lesion_mask(
    rng: np.random.Generator,
    shape,
    count_range: tuple[int, int],
    radius_range: tuple[float, float],
) -> np.ndarray:
    mask = _ellipsoid_union(rng, shape, count_range, radius_range)
    if not mask.any():
        # ellipsoids degenerate below one voxel: force a single-voxel lesion
        mask[tuple(s // 2 for s in shape)] = True
    return mask


def _make_sample(
    spec: DatasetSpec,
    universe: ModalityUniverse,
    rng: np.random.Generator,
    token: DomainToken,
    params: dict,
) -> VolumeSample:
    shape = spec.volume_shape
    m = universe.num_modalities
    # background texture statistics depend on the pathology too, adding a
    # second axis of domain shift between datasets beyond lesion appearance
    p_idx = universe.pathology_index(spec.pathology)
    sigma = max(1.2, (0.10 + 0.02 * (p_idx % 3)) * min(shape))
    anatomy = _smooth_field(rng, shape, sigma)
    mask = _lesion_mask(rng, shape, params["count_range"], params["radius_range"])
    profile = gaussian_filter(mask.astype(np.float64), 0.6)
    peak = profile.max()
    if peak > 0:
        profile /= peak

    # signed sum of the unlabeled distractor populations (lesion voxels win)
    signed_distractors = np.zeros(shape, dtype=np.float64)
    for dist in params["distractors"]:
        blob = (
            _ellipsoid_union(rng, shape, dist["count_range"], dist["radius_range"])
            & ~mask
        )
        d_profile = gaussian_filter(blob.astype(np.float64), 0.6)
        d_peak = d_profile.max()
        if d_peak > 0:
            d_profile /= d_peak
        d_profile[mask] = 0.0
        signed_distractors += dist["polarity"] * d_profile

    contrast = params["contrast"]
    packed = np.zeros((m,) + shape, dtype=np.float32)
    present = np.zeros(m, dtype=bool)
    for k in sorted(contrast):
        texture = 0.15 * _smooth_field(rng, shape, 1.0)
        channel = (
            anatomy
            + texture
            + contrast[k] * profile
            + abs(contrast[k]) * signed_distractors
        )
        packed[k] = channel.astype(np.float32)
        present[k] = True
    return VolumeSample(packed, mask.astype(np.uint8), token, present)


def generate_dataset(spec: DatasetSpec, universe: ModalityUniverse) -> SyntheticDataset:
    """Deterministically generate the train/test splits described by a spec.

    Every sample contains at least one lesion voxel; per-sample RNG streams
    are derived from (spec.seed, split, index) so generation can be repeated
    or parallelized without changing results.
    """
    spec.validate(universe)
    params = _resolve_lesion_params(spec, universe)
    token = build_domain_token(spec.modalities, spec.pathology, universe)

    splits = []
    for split_code, n in ((0, spec.n_train), (1, spec.n_test)):
        samples = []
        for i in range(n):
            rng = np.random.default_rng([spec.seed, split_code, i])
            samples.append(_make_sample(spec, universe, rng, token, params))
        splits.append(samples)
    return SyntheticDataset(spec, universe, splits[0], splits[1])


def znormalize(sample: VolumeSample) -> VolumeSample:
    """Z-score each present channel over its own voxels; absent channels stay zero.

    A present channel with zero variance is only mean-centered (ending up all
    zero) and a warning is recorded.
    """
    packed = sample.packed.astype(np.float64)
    out = np.zeros_like(packed)
    for k in range(packed.shape[0]):
        if not sample.present[k]:
            continue
        chan = packed[k]
        mean = chan.mean()
        std = chan.std()
        if std < 1e-12:
            warnings.warn(
                f"channel {k} has zero variance; normalized to zero", stacklevel=2
            )
            out[k] = chan - mean
        else:
            out[k] = (chan - mean) / std
    return replace(sample, packed=out.astype(np.float32))


def drop_modalities(
    sample: VolumeSample, p_drop: float, rng: np.random.Generator
) -> VolumeSample:
    """Randomly zero present channels, always keeping at least one.

    Each present channel is dropped independently with probability p_drop;
    the pattern is redrawn whenever it would drop everything. Token modality
    bits and the present vector track the surviving channels.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValidationError(f"p_drop must be in [0, 1), got {p_drop}")
    present_idx = np.flatnonzero(sample.present)
    if present_idx.size == 0:
        raise ValidationError("sample has no present modality")
    if p_drop == 0.0 or present_idx.size == 1:
        return sample

    while True:
        keep = rng.random(present_idx.size) >= p_drop
        if keep.any():
            break
    if keep.all():
        return sample

    surviving = present_idx[keep]
    packed = sample.packed.copy()
    present = np.zeros_like(sample.present)
    present[surviving] = True
    packed[~present] = 0.0
    m = sample.token.num_modalities
    bits = [1 if present[k] else 0 for k in range(m)] + list(sample.token.pathology_bits)
    token = DomainToken(tuple(bits), m)
    return VolumeSample(packed, sample.mask, token, present)


def sample_patch(
    sample: VolumeSample,
    patch_shape,
    rng: np.random.Generator,
    fg_bias: float = 0.5,
) -> VolumeSample:
    """Crop a spatial patch, identically across channels and mask.

    With probability fg_bias the crop is centered on a uniformly chosen
    lesion voxel (clamped to the volume bounds); otherwise the corner is
    uniform over all valid positions.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    vol_shape = sample.volume_shape
    if len(patch_shape) != 3 or any(p < 1 for p in patch_shape):
        raise ValidationError(f"bad patch shape {patch_shape}")
    if any(p > v for p, v in zip(patch_shape, vol_shape)):
        raise ValidationError(f"patch {patch_shape} exceeds volume {vol_shape}")

    fg_voxels = np.argwhere(sample.mask > 0)
    if fg_voxels.size and rng.random() < fg_bias:
        center = fg_voxels[rng.integers(len(fg_voxels))]
        start = [
            int(np.clip(c - p // 2, 0, v - p))
            for c, p, v in zip(center, patch_shape, vol_shape)
        ]
    else:
        start = [int(rng.integers(0, v - p + 1)) for p, v in zip(patch_shape, vol_shape)]

    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
    packed = np.ascontiguousarray(sample.packed[(slice(None),) + sl])
    mask = np.ascontiguousarray(sample.mask[sl])
    return VolumeSample(packed, mask, sample.token, sample.present.copy())


# ---------------------------------------------------------------------------
# Persistence: header-free little-endian raw arrays + one JSON manifest.

MANIFEST_NAME = "manifest.json"


def dataset_fingerprint(spec: DatasetSpec, universe: ModalityUniverse) -> str:
    import hashlib

    blob = json.dumps(
        {"spec": spec.to_dict(), "universe": universe.to_dict()}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_dataset(dataset: SyntheticDataset, root) -> "str":
    """Write raw sample files and a manifest under <root>/<dataset_id>/."""
    from pathlib import Path

    base = Path(root) / dataset.spec.id
    manifest: dict = {
        "format_version": 1,
        "fingerprint": dataset_fingerprint(dataset.spec, dataset.universe),
        "universe": dataset.universe.to_dict(),
        "spec": dataset.spec.to_dict(),
        "dtype": "<f4",
        "mask_dtype": "u1",
        "order": "C",
        "splits": {},
    }
    for split_name, samples in (("train", dataset.train), ("test", dataset.test)):
        split_dir = base / split_name
        split_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i, s in enumerate(samples):
            rel = f"{split_name}/sample_{i:04d}.raw"
            rel_mask = f"{split_name}/sample_{i:04d}.mask.raw"
            s.packed.astype("<f4").tofile(base / rel)
            s.mask.astype("u1").tofile(base / rel_mask)
            records.append(
                {
                    "file": rel,
                    "mask_file": rel_mask,
                    "shape": list(s.packed.shape),
                    "present": [bool(v) for v in s.present],
                    "token": list(s.token.bits),
                }
            )
        manifest["splits"][split_name] = records
    (base / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return str(base)


def load_dataset(root, dataset_id: str) -> SyntheticDataset:
    """Reload a dataset previously written by save_dataset."""
    from pathlib import Path

    base = Path(root) / dataset_id
    manifest = json.loads((base / MANIFEST_NAME).read_text())
    universe = ModalityUniverse.from_dict(manifest["universe"])
    spec = DatasetSpec.from_dict(manifest["spec"])
    m = universe.num_modalities

    def load_split(records):
        samples = []
        for rec in records:
            shape = tuple(rec["shape"])
            packed = np.fromfile(base / rec["file"], dtype="<f4").reshape(shape)
            mask = np.fromfile(base / rec["mask_file"], dtype="u1").reshape(shape[1:])
            token = DomainToken(tuple(rec["token"]), m)
            present = np.asarray(rec["present"], dtype=bool)
            samples.append(VolumeSample(packed, mask, token, present))
        return samples

    return SyntheticDataset(
        spec,
        universe,
        load_split(manifest["splits"]["train"]),
        load_split(manifest["splits"]["test"]),
    )
