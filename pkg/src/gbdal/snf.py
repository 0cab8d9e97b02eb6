"""Simulated non-causal factors: targeted one-step sign perturbations.

For a randomly drawn label y_r the perturbation is -eps * sign(grad_x CE(x, y_r)),
which nudges the image towards being classified as y_r. The perturbed image
keeps the clean image's annotations and is used as an extra training sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from gbdal import nnkit
from gbdal.errors import ConfigError, ContractError, NumericalError

LABEL_MODES = ("random_excluding_true", "random_any", "true")


@dataclass(frozen=True)
class SnfConfig:
    epsilon: float = 0.01
    label_mode: str = "random_excluding_true"
    clamp: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {self.label_mode!r}")


def draw_labels(true_labels, num_classes: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if mode == "true":
        return true_labels.copy()
    if mode == "random_any":
        return rng.integers(0, num_classes, size=true_labels.shape)
    if mode == "random_excluding_true":
        # uniform over the other num_classes - 1 labels
        offset = rng.integers(1, num_classes, size=true_labels.shape)
        return (true_labels + offset) % num_classes
    raise ConfigError(f"unknown label mode {mode!r}")


def snf_loss(model: nnkit.Detector, image, label) -> torch.Tensor:
    """Cross-entropy of the class logits against ``label`` (mean over a batch)."""
    logits, _ = nnkit.forward_task(model, nnkit.forward_features(model, image))
    return nnkit.classification_loss(logits, label)


def sign_perturbation(grad: torch.Tensor, epsilon: float) -> torch.Tensor:
    """-eps * sign(grad) with sign(0) = 0."""
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite gradient in perturbation")
    return -epsilon * torch.sign(grad)


def perturb(model: nnkit.Detector, image, rand_label, cfg: SnfConfig) -> torch.Tensor:
    grad = nnkit.grad_wrt_input(model, image, rand_label, "cls")
    return sign_perturbation(grad, cfg.epsilon)


def make_adversarial(image, adv, cfg: SnfConfig) -> torch.Tensor:
    x = torch.as_tensor(image, dtype=torch.float64)
    adv = torch.as_tensor(adv, dtype=torch.float64)
    if x.shape != adv.shape:
        raise ContractError(f"perturbation shape {tuple(adv.shape)} != image shape {tuple(x.shape)}")
    out = x + adv
    # x + adv can round one ulp past the step; pull such entries back towards x
    for _ in range(4):
        over = (out - x).abs() > adv.abs()
        if not bool(over.any()):
            break
        out = torch.where(over, torch.nextafter(out, x), out)
    return out.clamp(0.0, 1.0) if cfg.clamp else out


def simulate(model: nnkit.Detector, images, true_labels, num_classes: int, cfg: SnfConfig,
             rng: np.random.Generator) -> tuple[torch.Tensor, np.ndarray]:
    """Random labels -> perturbation -> adversarial batch. Parameters are not touched."""
    labels = draw_labels(true_labels, num_classes, cfg.label_mode, rng)
    adv = perturb(model, images, labels, cfg)
    return make_adversarial(images, adv, cfg), labels
