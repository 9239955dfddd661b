import numpy as np
import pytest
import torch

from hli.datagen import DatasetSpec, generate_domain_pair


def central_diff(fn, x: torch.Tensor, eps: float = 1e-6, entries=None) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``x``
    (modified in place and restored).  ``entries`` limits the flat indices."""
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if entries is None else entries
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.view_as(x)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.flatten().double(), b.flatten().double()
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


@pytest.fixture
def tiny_spec():
    return DatasetSpec(
        n_identities_source=4, n_identities_target=4, samples_per_identity=6, image_height=32, image_width=16, seed=3
    )


@pytest.fixture
def tiny_pair(tiny_spec):
    return generate_domain_pair(tiny_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
