"""Pixel-level domain adversarial losses.

Both losses are cross-entropies between the per-pixel domain logits and a
domain label: the local loss takes the label of the pooled region that owns the
pixel, the global loss one label per image. They are averaged over pixels (and
images) so the weight ``lam`` does not scale with the feature-map size.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from gbdal.errors import ConfigError, ContractError


def _check_labels(labels: torch.Tensor, k: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ContractError(f"domain label out of range [0, {k})")


def _batched(pixel_logits: torch.Tensor) -> torch.Tensor:
    if pixel_logits.dim() == 3:
        return pixel_logits.unsqueeze(0)
    if pixel_logits.dim() != 4:
        raise ContractError(f"pixel logits must be [K, H, W] or [B, K, H, W], got {tuple(pixel_logits.shape)}")
    return pixel_logits


def local_domain_loss(pixel_logits: torch.Tensor, region_labels, regions) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[label of the pixel's region].

    ``region_labels`` is [N] (or [B, N]); ``regions`` is the [H, W] map of
    region indices produced alongside the pooled features.
    """
    logits = _batched(pixel_logits)
    b, k, h, w = logits.shape
    regions = torch.as_tensor(np.asarray(regions), dtype=torch.long)
    if tuple(regions.shape) != (h, w):
        raise ContractError(f"region map {tuple(regions.shape)} does not match logits {(h, w)}")
    labels = torch.as_tensor(np.asarray(region_labels), dtype=torch.long).reshape(b, -1)
    if int(regions.max()) >= labels.shape[1] or int(regions.min()) < 0:
        raise ContractError("region map refers to regions without a label")
    _check_labels(labels, k)
    target = labels[:, regions.reshape(-1)].reshape(b, h, w)
    return F.cross_entropy(logits, target)


def global_domain_loss(pixel_logits: torch.Tensor, image_labels) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[image label]."""
    logits = _batched(pixel_logits)
    b, k, h, w = logits.shape
    labels = torch.as_tensor(np.asarray(image_labels), dtype=torch.long).reshape(-1)
    if labels.numel() != b:
        raise ContractError(f"need one label per image ({b}), got {labels.numel()}")
    _check_labels(labels, k)
    target = labels[:, None, None].expand(b, h, w)
    return F.cross_entropy(logits, target)


def total_loss(det_loss, local, global_, lam: float):
    """L_det + lam * (L_local + L_global)."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return det_loss + lam * (local + global_)


def pixel_accuracy(pixel_logits: torch.Tensor, target: torch.Tensor) -> float:
    return float((pixel_logits.argmax(dim=1) == target).double().mean())
