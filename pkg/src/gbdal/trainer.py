"""Training loop: SNF simulation, granular-ball domain alignment, supervised update.

Each iteration
  1. (SNF)        perturbs the clean batch towards random labels, gradient only;
  2. (GB-DAL)     extracts features of clean + adversarial images, labels pooled
                  features with the prototype splitter (or with dataset ids for
                  the plain DAL baseline) and scores the pixel domain heads;
  3. (supervised) adds the detection loss and takes one SGD step on
                  L_det + lam * (L_local + L_global).

All randomness is derived from (seed, step) or (seed, epoch), so a run resumed
from a checkpoint replays exactly the same batches and random labels.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from gbdal import dal, nnkit, pgbs, snf
from gbdal.errors import ConfigError, ContractError, FormatError, NumericalError
from gbdal.synthgen import DatasetSplit

log = logging.getLogger(__name__)

VARIANTS = {
    "erm": dict(use_local_dal=False, use_global_dal=False, use_snf_sim=False, use_snf_aug=False, domain_labels="pgbs"),
    "dal": dict(use_local_dal=False, use_global_dal=True, use_snf_sim=False, use_snf_aug=False, domain_labels="dataset"),
    "gbdal-local": dict(use_local_dal=True, use_global_dal=False, use_snf_sim=False, use_snf_aug=False, domain_labels="pgbs"),
    "gbdal": dict(use_local_dal=True, use_global_dal=True, use_snf_sim=False, use_snf_aug=False, domain_labels="pgbs"),
    "gbdal-sim": dict(use_local_dal=True, use_global_dal=True, use_snf_sim=True, use_snf_aug=False, domain_labels="pgbs"),
    "gbdal-snf": dict(use_local_dal=True, use_global_dal=True, use_snf_sim=True, use_snf_aug=True, domain_labels="pgbs"),
}

# Batched settings that make ten-epoch runs fit a single CPU core in about a minute.
DESK_PRESET = dict(batch_size=16, lr=0.02, momentum=0.9, init_gain=math.sqrt(6.0))


@dataclass(frozen=True)
class TrainConfig:
    K: int = 5
    lam: float = 0.1
    epsilon: float = 0.01
    grid: tuple[int, int] = (3, 3)
    buffer_capacity: int = 256
    epochs: int = 10
    batch_size: int = 1
    lr: float = 2e-3
    lr_decay_epoch: int | None = None  # None -> round(0.7 * epochs)
    lr_decay_factor: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    use_local_dal: bool = True
    use_global_dal: bool = True
    use_snf_sim: bool = True
    use_snf_aug: bool = True
    domain_labels: str = "pgbs"  # "pgbs" (dense) or "dataset" (one label per source)
    snf_label_mode: str = "random_excluding_true"
    snf_clamp: bool = True
    channels: int = 16
    domain_hidden: int = 16
    init_gain: float = 1.0
    num_classes: int | None = None  # None -> inferred from the source labels
    alpha_min: float = 0.5
    alpha_max: float = 0.99
    warmup_iters: int = 100

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.domain_labels not in ("pgbs", "dataset"):
            raise ConfigError(f"unknown domain label source {self.domain_labels!r}")
        if self.use_snf_aug and not self.use_snf_sim:
            raise ConfigError("use_snf_aug needs use_snf_sim")
        snf.SnfConfig(self.epsilon, self.snf_label_mode, self.snf_clamp)

    @property
    def decay_epoch(self) -> int:
        return round(0.7 * self.epochs) if self.lr_decay_epoch is None else self.lr_decay_epoch

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr * self.lr_decay_factor

    @property
    def uses_dal(self) -> bool:
        return self.use_local_dal or self.use_global_dal

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{**DESK_PRESET, **overrides})

    def with_variant(self, variant: str) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return replace(self, **VARIANTS[variant])

    def snapshot(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    seed: int
    rows: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def append(self, row: dict, sink: Path | None = None) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ContractError("iteration indices must increase")
        self.rows.append(row)
        if sink is not None:
            with open(sink, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class TrainState:
    model: nnkit.Detector
    banks: dict[str, pgbs.PrototypeBank]
    buffers: dict[str, pgbs.FeatureBuffer]
    velocity: dict[str, torch.Tensor]
    step: int = 0


@dataclass
class TrainResult:
    model: nnkit.Detector
    banks: dict[str, pgbs.PrototypeBank]
    record: RunRecord
    state: TrainState


# ---------------------------------------------------------------------------
# batching

def epoch_batches(sources: list[DatasetSplit], batch_size: int, seed: int, epoch: int) -> list[tuple[int, np.ndarray]]:
    """Shuffled batches of every source, interleaved round-robin across sources."""
    per_source = []
    for d, split in enumerate(sources):
        order = np.random.default_rng([seed, epoch, d, 0xBA7C]).permutation(len(split))
        per_source.append([order[i : i + batch_size] for i in range(0, len(order), batch_size)])
    out = []
    for i in range(max(len(b) for b in per_source)):
        for d, batches in enumerate(per_source):
            if i < len(batches):
                out.append((d, batches[i]))
    return out


def _step_rng(seed: int, step: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, tag])


# ---------------------------------------------------------------------------
# state

def _model_config(config: TrainConfig, sources: list[DatasetSplit]) -> nnkit.ModelConfig:
    num_classes = config.num_classes or int(max(int(s.labels.max()) for s in sources) + 1)
    k_dom = len(sources) if config.domain_labels == "dataset" else config.K
    return nnkit.ModelConfig(
        num_classes=max(num_classes, 2),
        num_domains=k_dom,
        channels=config.channels,
        domain_hidden=config.domain_hidden,
        canvas_size=sources[0].canvas_size,
        init_gain=config.init_gain,
    )


def init_state(config: TrainConfig, model_config: nnkit.ModelConfig) -> TrainState:
    model = nnkit.Detector(model_config, seed=config.seed)
    banks = {
        level: pgbs.PrototypeBank(
            k=config.K, level=level, alpha_min=config.alpha_min, alpha_max=config.alpha_max,
            warmup_iters=config.warmup_iters,
        )
        for level in pgbs.LEVELS
    }
    buffers = {level: pgbs.FeatureBuffer(config.buffer_capacity, level) for level in pgbs.LEVELS}
    return TrainState(model=model, banks=banks, buffers=buffers, velocity={})


def _check_sources(sources: list[DatasetSplit]) -> None:
    if not sources:
        raise ConfigError("need at least one source split")
    if any(len(s) == 0 for s in sources):
        raise ConfigError("source splits must be non-empty")
    sizes = {s.canvas_size for s in sources}
    if len(sizes) != 1:
        raise ContractError(f"sources disagree on canvas size: {sizes}")


# ---------------------------------------------------------------------------
# one iteration

def _domain_terms(config, state, fmap, dataset_ids, regions, rng, row):
    """Local/global domain losses for a feature batch; records deferrals in ``row``."""
    zero = fmap.sum() * 0.0
    losses = {"local": zero, "global": zero}
    accs = []
    feats = fmap.detach().numpy()
    b = fmap.shape[0]
    for level, enabled in (("local", config.use_local_dal), ("global", config.use_global_dal)):
        row[f"deferred_{level}"] = False
        if not enabled:
            continue
        if config.domain_labels == "dataset":
            labels = np.asarray(dataset_ids, dtype=np.int64)
            if level == "local":
                labels = np.repeat(labels[:, None], regions.max() + 1, axis=1)
        else:
            if level == "local":
                pooled, _ = pgbs.pool_local(feats, config.grid)
                flat = pooled.reshape(-1, pooled.shape[-1])
            else:
                flat = pgbs.pool_global(feats)
            assignment, state.banks[level], state.buffers[level] = pgbs.split(
                state.banks[level], state.buffers[level], flat, rng
            )
            if assignment is None:
                row[f"deferred_{level}"] = True
                continue
            labels = assignment.labels.reshape(b, -1) if level == "local" else assignment.labels
        logits = nnkit.forward_domain(state.model, fmap, 1.0, level)
        if level == "local":
            losses[level] = dal.local_domain_loss(logits, labels, regions)
            target = torch.as_tensor(labels)[:, torch.as_tensor(regions.reshape(-1))].reshape(b, *regions.shape)
        else:
            losses[level] = dal.global_domain_loss(logits, labels)
            target = torch.as_tensor(labels)[:, None, None].expand(b, *regions.shape)
        accs.append(dal.pixel_accuracy(logits.detach(), target))
    row["domain_acc"] = float(np.mean(accs)) if accs else None
    return losses["local"], losses["global"]


def train_step(config: TrainConfig, state: TrainState, split: DatasetSplit, idx: np.ndarray,
               dataset_index: int, lr: float) -> dict:
    model = state.model
    step = state.step
    row: dict = {"step": step, "phases": []}
    x = torch.from_numpy(split.images[idx].astype(np.float64))
    labels = split.labels[idx]
    boxes = nnkit.encode_boxes(split.boxes[idx], model.config)
    num_classes = model.config.num_classes
    regions = pgbs.region_map(model.config.fmap_size, model.config.fmap_size, config.grid)

    # SNF: gradient only, parameters untouched
    if config.use_snf_sim:
        cfg = snf.SnfConfig(config.epsilon, config.snf_label_mode, config.snf_clamp)
        x_adv, _ = snf.simulate(model, x, labels, num_classes, cfg, _step_rng(config.seed, step, 1))
        x_all = torch.cat([x, x_adv.detach()])
        row["phases"].append("snf")
    else:
        x_all = x
    n_clean = len(idx)

    fmap = nnkit.forward_features(model, x_all)
    if config.uses_dal:
        ids = np.full(len(x_all), dataset_index)
        l_local, l_global = _domain_terms(config, state, fmap, ids, regions, _step_rng(config.seed, step, 2), row)
        row["phases"].append("gbdal")
    else:
        l_local = l_global = fmap.sum() * 0.0
        row["domain_acc"] = None

    logits, box_pred = nnkit.forward_task(model, fmap)
    if config.use_snf_aug:
        det_labels, det_boxes = np.concatenate([labels, labels]), torch.cat([boxes, boxes])
        l_det = nnkit.detection_loss(logits, box_pred, det_labels, det_boxes)
    else:
        l_det = nnkit.detection_loss(logits[:n_clean], box_pred[:n_clean], labels, boxes)
    row["phases"].append("supervised")

    loss = dal.total_loss(l_det, l_local, l_global, config.lam) if config.uses_dal else l_det
    row.update(
        L_det=float(l_det.detach()), L_local=float(l_local.detach()), L_global=float(l_global.detach()),
        L_total=float(loss.detach()), lr=lr,
        dataset=int(dataset_index),
    )
    if not math.isfinite(row["L_total"]):
        row["error"] = "non-finite loss"
        raise NumericalError(f"non-finite loss at step {step}: {row}")
    loss.backward()
    nnkit.apply_sgd(model, lr, config.momentum, state.velocity)
    state.step += 1
    return row


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, config: TrainConfig, state: TrainState) -> None:
    tensors = {f"param/{k}": v for k, v in nnkit.state_arrays(state.model).items()}
    for k, v in state.velocity.items():
        tensors[f"velocity/{k}"] = v.detach().numpy()
    bank_meta = {}
    for level, bank in state.banks.items():
        if bank.prototypes is not None:
            tensors[f"bank/{level}"] = bank.prototypes
        bank_meta[level] = {"t": bank.t, "k": bank.k, "level": bank.level}
        tensors[f"buffer/{level}"] = state.buffers[level].array(state.model.config.channels)
    meta = {
        "kind": "train_state",
        "step": state.step,
        "rng": {"seed": config.seed, "scheme": "per-step"},
        "config": config.snapshot(),
        "model_config": asdict(state.model.config),
        "banks": bank_meta,
    }
    nnkit.write_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[TrainConfig, TrainState]:
    tensors, meta = nnkit.read_tensors(path)
    if meta.get("kind") != "train_state":
        raise FormatError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config, nnkit.ModelConfig.from_dict(meta["model_config"]))
    nnkit.load_state_arrays(state.model, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    state.velocity = {k[9:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("velocity/")}
    for level, bm in meta["banks"].items():
        protos = tensors.get(f"bank/{level}")
        state.banks[level] = replace(state.banks[level], prototypes=protos, t=int(bm["t"]))
        state.buffers[level].load(tensors[f"buffer/{level}"])
    state.step = int(meta["step"])
    return config, state


# ---------------------------------------------------------------------------
# driver

def steps_per_epoch(sources: list[DatasetSplit], batch_size: int) -> int:
    return sum(math.ceil(len(s) / batch_size) for s in sources)


def train(config: TrainConfig, sources: list[DatasetSplit], run_dir=None, max_steps: int | None = None,
          state: TrainState | None = None, checkpoint_steps=(), eval_split: DatasetSplit | None = None,
          record: RunRecord | None = None) -> TrainResult:
    """Run (or resume, when ``state`` is given) training until ``max_steps`` or the last epoch."""
    _check_sources(sources)
    torch.set_num_threads(1)
    run_dir = Path(run_dir) if run_dir is not None else None
    sink = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        sink = run_dir / "records.jsonl"
    if state is None:
        state = init_state(config, _model_config(config, sources))
    if record is None:
        record = RunRecord(config=config.snapshot(), seed=config.seed)
    per_epoch = steps_per_epoch(sources, config.batch_size)
    total = per_epoch * config.epochs if max_steps is None else min(max_steps, per_epoch * config.epochs)
    checkpoint_steps = set(checkpoint_steps)

    while state.step < total:
        epoch, offset = divmod(state.step, per_epoch)
        batches = epoch_batches(sources, config.batch_size, config.seed, epoch)
        lr = config.lr_at(epoch)
        for d, idx in batches[offset:]:
            if state.step >= total:
                break
            row = train_step(config, state, sources[d], idx, d, lr)
            row["epoch"] = epoch
            record.append(row, sink)
            if state.step in checkpoint_steps and run_dir is not None:
                save_checkpoint(run_dir / "checkpoints" / f"step_{state.step:06d}.ckpt", config, state)
        if state.step % per_epoch == 0 and eval_split is not None:
            from gbdal.evalkit import evaluate

            report = evaluate(state.model, eval_split)
            record.evals.append({"epoch": epoch, "step": state.step, **report.summary()})
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoints" / "final.ckpt", config, state)
    return TrainResult(model=state.model, banks=state.banks, record=record, state=state)


def dal_baseline_train(config: TrainConfig, sources: list[DatasetSplit], **kwargs) -> TrainResult:
    """Same loop with sparse domain labels: one label per source dataset."""
    return train(replace(config, domain_labels="dataset"), sources, **kwargs)
