"""Held-out evaluation, robustness splits, ablation matrix and parameter sweeps.

A scene counts as a hit when the predicted class is right and the predicted
box overlaps the true box with IoU >= 0.5; the combined score is the hit rate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from gbdal import nnkit
from gbdal.errors import ConfigError, ContractError
from gbdal.synthgen import DatasetSplit, gaussian_corrupt
from gbdal.trainer import TrainConfig, train

IOU_THRESHOLD = 0.5

ABLATION_VARIANTS = ("erm", "dal", "gbdal-local", "gbdal", "gbdal-sim", "gbdal-snf")


def box_iou(pred, true) -> np.ndarray:
    """IoU of (cx, cy, w, h) boxes; negative predicted sizes count as empty."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true, dtype=np.float64))
    pw, ph = np.maximum(pred[:, 2], 0), np.maximum(pred[:, 3], 0)
    tw, th = true[:, 2], true[:, 3]
    ix = np.minimum(pred[:, 0] + pw / 2, true[:, 0] + tw / 2) - np.maximum(pred[:, 0] - pw / 2, true[:, 0] - tw / 2)
    iy = np.minimum(pred[:, 1] + ph / 2, true[:, 1] + th / 2) - np.maximum(pred[:, 1] - ph / 2, true[:, 1] - th / 2)
    inter = np.maximum(ix, 0) * np.maximum(iy, 0)
    union = pw * ph + tw * th - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class EvalReport:
    split: str
    n: int
    accuracy: float
    mean_iou: float
    score: float
    per_class: dict[int, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"split": self.split, "n": self.n, "accuracy": self.accuracy, "mean_iou": self.mean_iou,
                "score": self.score}


def score_predictions(pred_labels, pred_boxes, labels, boxes, num_classes: int | None = None, name: str = "") -> EvalReport:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    iou = box_iou(pred_boxes, boxes)
    correct = pred_labels == labels
    hits = correct & (iou >= IOU_THRESHOLD)
    classes = range(num_classes) if num_classes is not None else np.unique(labels)
    per_class = {int(c): float(hits[labels == c].mean()) for c in classes if np.any(labels == c)}
    return EvalReport(
        split=name,
        n=len(labels),
        accuracy=float(correct.mean()),
        mean_iou=float(iou.mean()),
        score=float(hits.mean()),
        per_class=per_class,
    )


@torch.no_grad()
def predict(model: nnkit.Detector, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    logits, boxes = [], []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(np.asarray(images[i : i + batch_size], dtype=np.float64))
        lg, bx = nnkit.forward_task(model, nnkit.forward_features(model, x))
        logits.append(lg.numpy())
        boxes.append(bx.numpy())
    return np.concatenate(logits).argmax(axis=1), nnkit.decode_boxes(np.concatenate(boxes), model.config)


def evaluate(model: nnkit.Detector, split: DatasetSplit) -> EvalReport:
    if len(split) == 0:
        raise ContractError("cannot evaluate an empty split")
    if int(split.labels.max()) >= model.config.num_classes:
        raise ContractError("split has classes the model does not predict")
    pred_labels, pred_boxes = predict(model, split.images)
    return score_predictions(pred_labels, pred_boxes, split.labels, split.boxes, model.config.num_classes, split.name)


def fgsm_split(model: nnkit.Detector, split: DatasetSplit, epsilon: float, batch_size: int = 256) -> DatasetSplit:
    """Untargeted one-step attack: x + eps * sign(grad of the true-label loss), clamped."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    if epsilon == 0:
        return split.with_images(split.images.copy(), f"{split.name}_adv", "target_adv")
    out = np.empty_like(split.images)
    for i in range(0, len(split), batch_size):
        x = torch.as_tensor(split.images[i : i + batch_size].astype(np.float64))
        g = nnkit.grad_wrt_input(model, x, split.labels[i : i + batch_size])
        out[i : i + batch_size] = (x + epsilon * torch.sign(g)).clamp(0.0, 1.0).numpy()
    return split.with_images(out, f"{split.name}_adv", "target_adv")


def robustness_suite(model: nnkit.Detector, target: DatasetSplit, eps_eval: float = 0.03, sigma: float = 0.1,
                     seed: int = 0) -> dict[str, EvalReport]:
    return {
        "clean": evaluate(model, target),
        "adv": evaluate(model, fgsm_split(model, target, eps_eval)),
        "gauss": evaluate(model, gaussian_corrupt(target, sigma, seed)),
    }


def run_variant(base: TrainConfig, variant: str, sources, target: DatasetSplit, seed: int,
                eps_eval: float | None = None, sigma: float | None = None) -> dict:
    config = replace(base.with_variant(variant), seed=seed)
    result = train(config, sources)
    row = {"variant": variant, "seed": seed, **evaluate(result.model, target).summary()}
    if eps_eval is not None:
        row["adv_score"] = evaluate(result.model, fgsm_split(result.model, target, eps_eval)).score
    if sigma is not None:
        row["gauss_score"] = evaluate(result.model, gaussian_corrupt(target, sigma, seed)).score
    return row


def ablation_matrix(base: TrainConfig, sources, target: DatasetSplit, seeds=(0,), variants=ABLATION_VARIANTS,
                    eps_eval: float | None = None, sigma: float | None = None, sources_for_seed=None) -> list[dict]:
    """One row per (variant, seed). ``sources_for_seed(seed) -> (sources, target)`` regenerates data per seed."""
    rows = []
    for seed in seeds:
        src, tgt = (sources, target) if sources_for_seed is None else sources_for_seed(seed)
        for variant in variants:
            rows.append(run_variant(base, variant, src, tgt, seed, eps_eval, sigma))
    return rows


SWEEPABLE = {"K": "K", "lambda": "lam", "lam": "lam", "epsilon": "epsilon", "eps": "epsilon"}


def sweep(param: str, values, base: TrainConfig, sources, target: DatasetSplit, variant: str = "gbdal-snf") -> list[dict]:
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    field_name = SWEEPABLE[param]
    rows = []
    for value in values:
        value = int(value) if field_name == "K" else float(value)
        config = replace(base.with_variant(variant), **{field_name: value})
        result = train(config, sources)
        rows.append({"param": param, "value": value, **evaluate(result.model, target).summary()})
    return rows


def summarize(rows: list[dict], key: str = "variant", metric: str = "score") -> list[dict]:
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row[metric])
    out = []
    for name, vals in groups.items():
        vals = np.asarray(vals, dtype=np.float64)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append({key: name, "n": len(vals), "mean": float(vals.mean()), "se": se})
    return out


def render_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def write_rows(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
