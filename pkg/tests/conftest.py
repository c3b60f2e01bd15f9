import numpy as np
import pytest
import torch

from braincl import DatasetSpec, ModalityUniverse


@pytest.fixture(scope="session")
def universe():
    return ModalityUniverse()


@pytest.fixture()
def small_specs():
    """Two small disjoint-modality datasets for fast trainer tests."""
    a = DatasetSpec(
        id="tiny_a", modalities=("FLAIR", "T1"), pathology="Tumor",
        n_train=6, n_test=3, volume_shape=(8, 8, 8), seed=101,
    )
    b = DatasetSpec(
        id="tiny_b", modalities=("T2", "DWI"), pathology="Stroke lesion",
        n_train=6, n_test=3, volume_shape=(8, 8, 8), seed=202,
    )
    return a, b


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(torch.as_tensor(fn(x)).detach())
        flat[i] = orig - eps
        lo = float(torch.as_tensor(fn(x)).detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Elementwise |a-b| / max(1, |a|+|b|), reduced with max."""
    a = a.detach().double()
    b = b.detach().double()
    denom = torch.clamp(a.abs() + b.abs(), min=1.0)
    return float(((a - b).abs() / denom).max())
