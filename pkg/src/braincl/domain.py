"""Modality/pathology universe and the binary domain token derived from it.

The universe fixes the channel ordering of packed volumes and the bit layout
of domain tokens for the lifetime of an experiment: modality bits first (in
universe order), then one-hot pathology bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MODALITIES = ("PD", "FLAIR", "T1", "T1c", "T2", "DWI")
DEFAULT_PATHOLOGIES = (
    "Tumor",
    "Stroke lesion",
    "Sclerosis lesions",
    "White matter hyperintensity",
)


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


@dataclass(frozen=True)
class ModalityUniverse:
    """Ordered modality and pathology vocabularies shared by all datasets."""

    names: tuple[str, ...] = DEFAULT_MODALITIES
    pathology_names: tuple[str, ...] = DEFAULT_PATHOLOGIES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "pathology_names", tuple(self.pathology_names))
        if len(self.names) < 1:
            raise ValidationError("universe needs at least one modality")
        if len(self.pathology_names) < 1:
            raise ValidationError("universe needs at least one pathology")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("modality names must be unique")
        if len(set(self.pathology_names)) != len(self.pathology_names):
            raise ValidationError("pathology names must be unique")

    @property
    def num_modalities(self) -> int:
        return len(self.names)

    @property
    def num_pathologies(self) -> int:
        return len(self.pathology_names)

    @property
    def token_length(self) -> int:
        return self.num_modalities + self.num_pathologies

    def modality_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown modality {name!r}") from None

    def pathology_index(self, name: str) -> int:
        try:
            return self.pathology_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown pathology {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.names),
            "pathologies": list(self.pathology_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityUniverse":
        return cls(tuple(d["modalities"]), tuple(d["pathologies"]))


@dataclass(frozen=True)
class DomainToken:
    """Binary vector: modality-presence bits followed by one-hot pathology bits."""

    bits: tuple[int, ...]
    num_modalities: int = field(default=0)

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if any(b not in (0, 1) for b in bits):
            raise ValidationError("token bits must be 0/1")
        m = self.num_modalities
        if not 0 < m < len(bits):
            raise ValidationError("num_modalities must split the bit vector")
        if sum(bits[:m]) < 1:
            raise ValidationError("token needs at least one modality bit set")
        if sum(bits[m:]) != 1:
            raise ValidationError("token needs exactly one pathology bit set")

    @property
    def modality_bits(self) -> tuple[int, ...]:
        return self.bits[: self.num_modalities]

    @property
    def pathology_bits(self) -> tuple[int, ...]:
        return self.bits[self.num_modalities :]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)


def build_domain_token(
    modalities, pathology: str, universe: ModalityUniverse
) -> DomainToken:
    """Encode an available-modality set and a pathology as a domain token.

    Bit k of the modality part is set iff universe.names[k] is available;
    the pathology part is one-hot in universe order.
    """
    modalities = set(modalities)
    if not modalities:
        raise ValidationError("modality set must be non-empty")
    for name in modalities:
        universe.modality_index(name)
    p = universe.pathology_index(pathology)
    mod_bits = [1 if name in modalities else 0 for name in universe.names]
    path_bits = [1 if j == p else 0 for j in range(universe.num_pathologies)]
    return DomainToken(tuple(mod_bits + path_bits), universe.num_modalities)


TOKEN_MODES = ("d", "m", "d+m", "none")


def gate_input_bits(token: DomainToken, mode: str = "d+m") -> np.ndarray:
    """Bit vector actually fed to the MoE gate under a token ablation mode.

    "d+m" passes the token through; "d" keeps only pathology bits, "m" only
    modality bits (the other part zeroed); "none" is a constant all-ones
    vector, making the gating input-independent.
    """
    if mode not in TOKEN_MODES:
        raise ValidationError(f"unknown token mode {mode!r}")
    bits = token.as_array().copy()
    m = token.num_modalities
    if mode == "d":
        bits[:m] = 0.0
    elif mode == "m":
        bits[m:] = 0.0
    elif mode == "none":
        bits[:] = 1.0
    return bits
