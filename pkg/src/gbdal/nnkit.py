"""Tiny single-object detector surrogate with a pixel-level domain classifier.

extractor:  conv3x3(3->C) ReLU, conv3x3 stride 2 ReLU, conv3x3 stride 2 ReLU
task head:  global average pool -> linear class logits, linear box deltas
            (box = anchor + std * delta, anchor (0.5, 0.5, 0.5, 0.5), std 0.1)
domain:     GRL -> conv1x1(C->hidden) ReLU -> conv1x1(hidden->K), one head per level

Everything runs in float64. Parameters are initialised uniformly in
[-a, a] with a = init_gain * sqrt(1 / fan_in) from a seeded generator.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gbdal.errors import ContractError, FormatError, NumericalError

torch.set_default_dtype(torch.float64)

DOMAIN_LEVELS = ("local", "global")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    num_domains: int = 5
    channels: int = 16
    domain_hidden: int = 16
    canvas_size: int = 32
    init_gain: float = 1.0
    box_anchor: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)
    box_std: float = 0.1
    # pixels enter the first conv as (x - input_shift) * input_scale
    input_shift: float = 0.5
    input_scale: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "box_anchor" in d:
            d["box_anchor"] = tuple(d["box_anchor"])
        return cls(**d)

    @property
    def downsample(self) -> int:
        return 4

    @property
    def fmap_size(self) -> int:
        return self.canvas_size // self.downsample


class GradReverse(torch.autograd.Function):
    """Identity forward; multiplies the incoming gradient by -scale on the way back."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    return GradReverse.apply(x, scale)


class Detector(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        if config.canvas_size % config.downsample:
            raise ContractError("canvas size must be divisible by 4")
        self.config = config
        c = config.channels
        self.conv1 = nn.Conv2d(3, c, 3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.cls_head = nn.Linear(c, config.num_classes)
        self.box_head = nn.Linear(c, 4)
        self.domain = nn.ModuleDict(
            {
                level: nn.Sequential(
                    nn.Conv2d(c, config.domain_hidden, 1),
                    nn.ReLU(),
                    nn.Conv2d(config.domain_hidden, config.num_domains, 1),
                )
                for level in DOMAIN_LEVELS
            }
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    fan_in = module.weight[0].numel()
                    bound = self.config.init_gain * math.sqrt(1.0 / fan_in)
                    for p in (module.weight, module.bias):
                        p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)

    def extractor_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("conv")]

    def domain_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("domain")]


def _as_batch(image: torch.Tensor, config: ModelConfig) -> tuple[torch.Tensor, bool]:
    image = torch.as_tensor(image, dtype=torch.float64)
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
    s = config.canvas_size
    if image.dim() != 4 or tuple(image.shape[1:]) != (3, s, s):
        raise ContractError(f"expected image of shape [3, {s}, {s}] (optionally batched), got {tuple(image.shape)}")
    return image, single


def forward_features(model: Detector, image) -> torch.Tensor:
    """Feature map [C, H, W] (or [B, C, H, W] for a batch)."""
    x, single = _as_batch(image, model.config)
    x = (x - model.config.input_shift) * model.config.input_scale
    f = F.relu(model.conv1(x))
    f = F.relu(model.conv2(f))
    f = F.relu(model.conv3(f))
    return f[0] if single else f


def forward_task(model: Detector, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    single = fmap.dim() == 3
    f = fmap.unsqueeze(0) if single else fmap
    if f.dim() != 4 or f.shape[1] != model.config.channels:
        raise ContractError(f"feature map must have {model.config.channels} channels, got {tuple(fmap.shape)}")
    pooled = f.mean(dim=(2, 3))
    logits, box = model.cls_head(pooled), model.box_head(pooled)
    return (logits[0], box[0]) if single else (logits, box)


def forward_domain(model: Detector, fmap: torch.Tensor, grl_scale: float = 1.0, level: str = "global",
                   num_domains: int | None = None) -> torch.Tensor:
    """Per-pixel domain logits [K, H, W] behind a gradient reversal layer."""
    if grl_scale < 0:
        raise ContractError("grl_scale must be >= 0")
    if level not in model.domain:
        raise ContractError(f"unknown domain level {level!r}")
    if num_domains is not None and num_domains != model.config.num_domains:
        raise ContractError(f"domain head has {model.config.num_domains} outputs, caller expects {num_domains}")
    single = fmap.dim() == 3
    f = fmap.unsqueeze(0) if single else fmap
    out = model.domain[level](grad_reverse(f, grl_scale))
    return out[0] if single else out


def classification_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy; ``logits`` is [num_classes] or [B, num_classes]."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"class label out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def encode_boxes(boxes, config: ModelConfig) -> torch.Tensor:
    """Normalized regression targets: (box - anchor) / std."""
    boxes = torch.as_tensor(np.asarray(boxes), dtype=torch.float64)
    return (boxes - torch.tensor(config.box_anchor)) / config.box_std


def decode_boxes(deltas, config: ModelConfig):
    return np.asarray(config.box_anchor) + config.box_std * np.asarray(deltas, dtype=np.float64)


def box_loss(box_pred: torch.Tensor, box_target) -> torch.Tensor:
    """Mean squared error between predicted deltas and (already encoded) targets."""
    box_target = torch.as_tensor(box_target, dtype=torch.float64).reshape(box_pred.shape)
    return F.mse_loss(box_pred, box_target)


def detection_loss(logits, box_pred, labels, box_targets) -> torch.Tensor:
    """Cross-entropy on classes plus MSE on encoded box targets."""
    return classification_loss(logits, labels) + box_loss(box_pred, box_targets)


LOSS_SPECS = ("cls",)


def grad_wrt_input(model: Detector, image, labels, loss_spec: str = "cls", scale: float = 1.0) -> torch.Tensor:
    """Exact gradient of the (summed over batch) classification loss w.r.t. the image.

    The batch loss is a sum of per-sample cross-entropies, so each sample's slice
    of the result is that sample's own input gradient.
    """
    if loss_spec not in LOSS_SPECS:
        raise ContractError(f"unknown loss spec {loss_spec!r}")
    x, single = _as_batch(image, model.config)
    x = x.detach().clone().requires_grad_(True)
    logits, _ = forward_task(model, forward_features(model, x))
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    loss = scale * classification_loss(logits, labels) * len(labels)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite input gradient")
    return grad[0] if single else grad


def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], lr: float,
             momentum: float = 0.0, velocity: dict[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """p <- p - lr * g (heavy-ball momentum only when ``momentum`` > 0).

    Returns new tensors; ``velocity`` is updated in place when given.
    """
    if lr <= 0:
        raise ContractError("lr must be positive")
    if params.keys() != grads.keys():
        raise ContractError(f"gradient names do not match parameters: {sorted(set(params) ^ set(grads))}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        if momentum:
            if velocity is None:
                raise ContractError("momentum requires a velocity buffer")
            v = velocity.get(name)
            v = g.clone() if v is None else momentum * v + g
            velocity[name] = v
            g = v
        out[name] = p - lr * g
    return out


def apply_sgd(model: Detector, lr: float, momentum: float = 0.0, velocity: dict | None = None) -> None:
    """In-place `sgd_step` over a model's parameters using their ``.grad`` fields."""
    params = {n: p.detach() for n, p in model.named_parameters()}
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}
    new = sgd_step(params, grads, lr, momentum, velocity)
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(new[n])
            p.grad = None


def state_arrays(model: Detector) -> dict[str, np.ndarray]:
    return {n: p.detach().numpy().copy() for n, p in model.named_parameters()}


def load_state_arrays(model: Detector, arrays: dict[str, np.ndarray]) -> None:
    names = [n for n, _ in model.named_parameters()]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing}")
    with torch.no_grad():
        for n, p in model.named_parameters():
            a = arrays[n]
            if tuple(a.shape) != tuple(p.shape):
                raise FormatError(f"shape mismatch for {n}: {a.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(a, dtype=np.float64)))


# ---------------------------------------------------------------------------
# tensor container: "GBCK" | u32 version | u64 meta length | meta JSON | tensors (<f8)

CKPT_MAGIC = b"GBCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    blob = json.dumps({"meta": meta or {}, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    try:
        magic, version, n_meta = _CKPT_HEADER.unpack_from(raw, 0)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint header") from exc
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    offset = _CKPT_HEADER.size
    try:
        header = json.loads(raw[offset : offset + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint metadata") from exc
    offset += n_meta
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return tensors, header["meta"]


def save_params(model: Detector, path) -> None:
    write_tensors(path, state_arrays(model), {"model_config": asdict(model.config)})


def load_params(path) -> Detector:
    tensors, meta = read_tensors(path)
    model = Detector(ModelConfig.from_dict(meta["model_config"]))
    load_state_arrays(model, {k: v for k, v in tensors.items() if not k.startswith("__")})
    return model
