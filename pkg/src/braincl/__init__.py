"""Buffer-free continual learning for variable-modality 3D lesion segmentation."""

from .domain import (
    DomainToken,
    ModalityUniverse,
    ValidationError,
    build_domain_token,
    gate_input_bits,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    ce_loss,
    cosine_loss,
    dice_loss,
    dynamic_alpha,
    kld_loss,
    total_loss,
)
from .metrics import TrainTestMatrix, avg, bwt, dsc, fwt, ilm
from .moe_unet import (
    ForwardOutput,
    ModelConfig,
    MoEConvBlock,
    MoEUNet3D,
    gate_weights,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)
from .synthdata import (
    DatasetSpec,
    LesionParams,
    SyntheticDataset,
    VolumeSample,
    drop_modalities,
    generate_dataset,
    load_dataset,
    sample_patch,
    save_dataset,
    znormalize,
)
from .trainer import (
    SequenceConfig,
    SessionDiverged,
    SessionState,
    Strategy,
    estimate_shift,
    run_sequence,
    sliding_window_infer,
    train_session,
)

__version__ = "0.1.0"

__all__ = [
    "DomainToken",
    "ModalityUniverse",
    "ValidationError",
    "build_domain_token",
    "gate_input_bits",
    "LossBreakdown",
    "LossConfig",
    "ce_loss",
    "cosine_loss",
    "dice_loss",
    "dynamic_alpha",
    "kld_loss",
    "total_loss",
    "TrainTestMatrix",
    "avg",
    "bwt",
    "dsc",
    "fwt",
    "ilm",
    "ForwardOutput",
    "ModelConfig",
    "MoEConvBlock",
    "MoEUNet3D",
    "gate_weights",
    "load_checkpoint",
    "parameter_checksum",
    "save_checkpoint",
    "DatasetSpec",
    "LesionParams",
    "SyntheticDataset",
    "VolumeSample",
    "drop_modalities",
    "generate_dataset",
    "load_dataset",
    "sample_patch",
    "save_dataset",
    "znormalize",
    "SequenceConfig",
    "SessionDiverged",
    "SessionState",
    "Strategy",
    "estimate_shift",
    "run_sequence",
    "sliding_window_infer",
    "train_session",
    "__version__",
]
