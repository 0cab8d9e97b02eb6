"""Finite-difference oracle shared by the gradient tests."""
import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-6, indices=None) -> torch.Tensor:
    """(fn(x + h e_i) - fn(x - h e_i)) / 2h for every i (or only ``indices``, others left 0)."""
    x = x.detach().clone()
    out = torch.zeros_like(x)
    flat, gflat = x.view(-1), out.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    for i in idx:
        orig = float(flat[i])
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a = torch.as_tensor(a).reshape(-1)
    b = torch.as_tensor(b).reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), 1e-300)
    return float((a - b).norm()) / denom


def sample_indices(numel: int, k: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(numel, size=min(k, numel), replace=False).tolist())
