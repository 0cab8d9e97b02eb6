"""Command-line front end: ``gbdal {gen,train,eval,ablate,sweep}``.

Exit codes: 0 success, 1 usage/config, 2 I/O or file format, 3 numerical failure.
The run-directory layout and config-file format are described in MANUAL.md.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from gbdal import __version__, evalkit, nnkit, trainer
from gbdal.errors import ConfigError, FormatError, GbdalError, NumericalError
from gbdal.synthgen import FactorSpec, gaussian_corrupt, generate_source, generate_target, load_split, save_split

log = logging.getLogger("gbdal")

CONFIG_HEADER = "# gbdal-config v1"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config files

@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval/ablate/sweep command needs, resolved from file + flags."""

    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    variant: str = "gbdal-snf"
    data: str = ""
    eps_eval: float = 0.03
    sigma: float = 0.1

    def to_pairs(self) -> dict:
        pairs = {"variant": self.variant, "data": self.data, "eps_eval": self.eps_eval, "sigma": self.sigma}
        pairs.update(self.train.snapshot())
        return pairs


_RUN_KEYS = {"variant": str, "data": str, "eps_eval": float, "sigma": float}


def _train_field_types() -> dict:
    defaults = trainer.TrainConfig()
    return {f.name: getattr(defaults, f.name) for f in fields(trainer.TrainConfig)}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if raw in ("none", "None", ""):
            return None
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple) or key == "grid":
            return tuple(int(v) for v in raw.replace("x", ",").split(","))
        if isinstance(default, int) or key in ("lr_decay_epoch", "num_classes"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def parse_config_text(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise FormatError(f"config must start with {CONFIG_HEADER!r}")
    out = {}
    for n, line in enumerate(lines[1:], start=2):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(pairs: dict) -> RunConfig:
    """Typed RunConfig from raw string pairs; unknown keys are a config error."""
    types = _train_field_types()
    train_kw, run_kw = {}, {}
    for key, raw in pairs.items():
        if key in _RUN_KEYS:
            run_kw[key] = _RUN_KEYS[key](raw) if isinstance(raw, str) else raw
        elif key in types:
            train_kw[key] = _parse_value(key, raw, types[key]) if isinstance(raw, str) else raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(train=trainer.TrainConfig(**train_kw), **run_kw)
    if cfg.variant not in trainer.VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return cfg


def write_config(path: Path, cfg: RunConfig) -> None:
    body = "\n".join(f"{k} = {_format_value(v)}" for k, v in cfg.to_pairs().items())
    path.write_text(f"{CONFIG_HEADER}\n{body}\n", encoding="utf-8")


def read_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return resolve_config(parse_config_text(path.read_text(encoding="utf-8")))


def _load_run_config(args, overrides: dict) -> RunConfig:
    if args.config and not Path(args.config).exists():
        raise FileNotFoundError(f"config file not found: {args.config}")
    pairs = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    pairs.update({k: v for k, v in overrides.items() if v is not None})
    return resolve_config(pairs)


# ---------------------------------------------------------------------------
# data directories

def load_data(data_dir) -> tuple[list, object]:
    """Source splits (ordered by dataset id) and the target split named in the manifest."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        files = manifest["splits"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{manifest_path}: {exc}") from None
    sources = [load_split(data_dir / f["file"]) for f in files if f["role"] == "source"]
    targets = [load_split(data_dir / f["file"]) for f in files if f["role"] == "target"]
    if not sources or not targets:
        raise FormatError(f"{manifest_path} must list source and target splits")
    return sources, targets[0]


def cmd_gen(args) -> int:
    spec = FactorSpec(num_classes=args.classes, shapes=_shapes_for(args.classes), color_bias=args.bias)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in range(args.sources):
        split = generate_source(spec, d, args.n, args.seed)
        name = f"source_{d}.gbd"
        save_split(split, out / name)
        entries.append({"file": name, "role": "source", "dataset_id": d, "n": len(split)})
    target_n = args.target_n if args.target_n is not None else args.n
    target = generate_target(spec, target_n, args.seed + 1_000_003)
    save_split(target, out / "target.gbd")
    entries.append({"file": "target.gbd", "role": "target", "dataset_id": -1, "n": len(target)})
    spec_dict = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
    manifest = {"version": 1, "seed": args.seed, "spec": spec_dict, "splits": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} splits to {out}")
    return EXIT_OK


def _shapes_for(classes: int) -> tuple[int, ...]:
    default = FactorSpec().shapes
    if classes == len(default):
        return default
    return tuple(range(classes))


# ---------------------------------------------------------------------------
# training

def _latest_checkpoint(run_dir: Path) -> Path:
    final = run_dir / "checkpoints" / "final.ckpt"
    steps = sorted((run_dir / "checkpoints").glob("step_*.ckpt"))
    if final.exists():
        return final
    if steps:
        return steps[-1]
    raise FileNotFoundError(f"no checkpoint under {run_dir / 'checkpoints'}")


def _read_records(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [r for r in rows if r["step"] < before_step]


def cmd_train(args) -> int:
    overrides = {"variant": args.variant, "data": args.data, "seed": args.seed, "epochs": args.epochs}
    if args.resume:
        resume = Path(args.resume)
        ckpt = _latest_checkpoint(resume) if resume.is_dir() else resume
        run_dir = Path(args.out) if args.out else (resume if resume.is_dir() else ckpt.parent.parent)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        base = read_config(run_dir / "config.txt") if (run_dir / "config.txt").exists() else _load_run_config(args, overrides)
        config, state = trainer.load_checkpoint(ckpt)
        cfg = replace(base, train=config)
        records = _read_records(run_dir / "records.jsonl", state.step)
        log.info("resuming %s at step %d", run_dir, state.step)
    else:
        if not args.out:
            raise UsageError("train needs --out (or --resume)")
        cfg = _load_run_config(args, overrides)
        cfg = replace(cfg, train=cfg.train.with_variant(cfg.variant))
        run_dir = Path(args.out)
        if (run_dir / "records.jsonl").exists():
            raise UsageError(f"{run_dir} already holds a run; use --resume or a fresh --out")
        state, records = None, []
    if not cfg.data:
        raise UsageError("train needs --data (or data = ... in the config)")
    sources, _target = load_data(cfg.data)

    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(run_dir / "config.txt", cfg)
    sink = run_dir / "records.jsonl"
    sink.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    record = trainer.RunRecord(config=cfg.train.snapshot(), seed=cfg.train.seed, rows=records)

    per_epoch = trainer.steps_per_epoch(sources, cfg.train.batch_size)
    every = args.checkpoint_every or per_epoch
    total = per_epoch * cfg.train.epochs
    try:
        result = trainer.train(cfg.train, sources, run_dir=run_dir, max_steps=args.max_steps, state=state,
                               checkpoint_steps=range(every, total + 1, every), record=record)
    except NumericalError as exc:
        (run_dir / "FAILED").write_text(f"{exc}\n", encoding="utf-8")
        raise
    summary = {"variant": cfg.variant, "seed": cfg.train.seed, "steps": result.state.step,
               "final_L_det": record.rows[-1]["L_det"] if record.rows else None}
    (run_dir / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"trained {cfg.variant} seed={cfg.train.seed} for {result.state.step} steps -> {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reports

def _emit(rows: list[dict], out_dir: Path, name: str, as_json: bool, aggregate: list[dict] | None = None) -> None:
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    evalkit.write_rows(reports / f"{name}.jsonl", rows)
    table = evalkit.render_table(aggregate or rows)
    (reports / f"{name}.txt").write_text(table + "\n", encoding="utf-8")
    if as_json:
        print(json.dumps({"rows": rows, "aggregate": aggregate}, sort_keys=True))
    else:
        print(table)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    ckpt = _latest_checkpoint(run_dir) if run_dir.is_dir() else run_dir
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    config, state = trainer.load_checkpoint(ckpt)
    cfg_path = (run_dir if run_dir.is_dir() else ckpt.parent.parent) / "config.txt"
    cfg = read_config(cfg_path) if cfg_path.exists() else RunConfig(train=config)
    data = args.data or cfg.data
    if not data:
        raise UsageError("eval needs --data")
    _, target = load_data(data)
    eps = cfg.eps_eval if args.eps_eval is None else args.eps_eval
    sigma = cfg.sigma if args.sigma is None else args.sigma
    suite = evalkit.robustness_suite(state.model, target, eps_eval=eps, sigma=sigma, seed=config.seed)
    rows = [{"split": name, **{k: v for k, v in rep.summary().items() if k != "split"}} for name, rep in suite.items()]
    out = Path(args.out) if args.out else (run_dir if run_dir.is_dir() else ckpt.parent.parent)
    _emit(rows, out, "eval", args.json)
    return EXIT_OK


def _seed_list(spec: str) -> list[int]:
    """``10`` means seeds 0..9; ``1,4,7`` lists seeds explicitly."""
    try:
        if "," in spec:
            return [int(s) for s in spec.split(",")]
        return list(range(int(spec)))
    except ValueError:
        raise UsageError(f"bad --seeds {spec!r}") from None


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args, {"data": args.data})
    if not cfg.data:
        raise UsageError("ablate needs --data")
    sources, target = load_data(cfg.data)
    variants = tuple(args.variants.split(",")) if args.variants else evalkit.ABLATION_VARIANTS
    for v in variants:
        if v not in trainer.VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    rows = evalkit.ablation_matrix(cfg.train, sources, target, seeds=_seed_list(args.seeds), variants=variants,
                                   eps_eval=cfg.eps_eval, sigma=cfg.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    _emit(rows, out, "ablate", args.json, evalkit.summarize(rows))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args, {"data": args.data, "seed": args.seed})
    if not cfg.data:
        raise UsageError("sweep needs --data")
    sources, target = load_data(cfg.data)
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise UsageError(f"bad --values {args.values!r}") from None
    variant = args.variant or cfg.variant
    rows = evalkit.sweep(args.param, values, cfg.train, sources, target, variant=variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    _emit(rows, out, "sweep", args.json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gbdal", description="Granular-ball domain alignment on synthetic detection scenes.")
    p.add_argument("--version", action="version", version=f"gbdal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate biased source splits and an unbiased target split")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--sources", type=int, default=2)
    g.add_argument("--n", type=int, default=2000, help="scenes per source split")
    g.add_argument("--target-n", type=int, default=None, help="target scenes (default: --n)")
    g.add_argument("--bias", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one variant into a run directory")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--variant", choices=sorted(trainer.VARIANTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="run directory or checkpoint file to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many total steps")
    t.add_argument("--checkpoint-every", type=int, default=None, help="steps between checkpoints (default: one epoch)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a run on the clean, FGSM and Gaussian target splits")
    e.add_argument("--run", required=True, help="run directory or checkpoint file")
    e.add_argument("--data")
    e.add_argument("--eps-eval", type=float)
    e.add_argument("--sigma", type=float)
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score every variant over several seeds")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--seeds", default="1", help="count (N -> 0..N-1) or comma list")
    a.add_argument("--variants", help="comma list (default: all six)")
    a.add_argument("--out", required=True)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="vary K, lambda or epsilon for one variant")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--param", required=True, choices=sorted(evalkit.SWEEPABLE))
    s.add_argument("--values", required=True)
    s.add_argument("--variant", choices=sorted(trainer.VARIANTS))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gbdal: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"gbdal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"gbdal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GbdalError as exc:
        print(f"gbdal: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"gbdal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
