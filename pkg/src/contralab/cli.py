"""Command-line front end: data generation, training runs, ablation grids,
parameter sweeps and the gradient-check suite.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 some runs of
an ablation or sweep failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .checks import TOLERANCE, run_gradchecks
from .datasets import LabeledDataset, load_csv, make_gaussian_mixture, make_rings, save_csv
from .models import LOSSES, canonical_mode
from .training import PRESETS, ConfigError, TrainConfig, TrainingAborted, apply_preset, run_training

log = logging.getLogger("contralab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
DEFAULT_OUT = "runs"
TEMPERATURE_GRID = (0.1, 0.25, 0.5, 1.0, 2.0, 5.0)
SWEEP_DEFAULTS: dict[str, tuple] = {
    "temperature": TEMPERATURE_GRID,
    "proj_dim": (8, 16, 32, 64),
    "proj_type": ("linear", "mlp"),
    "batch": (16, 32, 64),
}
RUN_COLUMNS = (
    "run_id", "loss", "seed", "batch_size", "param", "value", "status",
    "best_class_frechet", "final_class_frechet", "best_iteration", "error",
)
SUMMARY_COLUMNS = (
    "loss", "batch_size", "n_ok", "n_failed", "best_class_frechet_mean", "best_class_frechet_std",
    "final_class_frechet_mean", "final_class_frechet_std", "table",
)
SWEEP_COLUMNS = ("param", "value", "n_ok", "n_failed", "mean", "std")


class RunExistsError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config assembly


def _set_dotted(doc: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"--set {key}: {p!r} is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"--set {key}: unknown key")
    node[parts[-1]] = value


def _parse_set(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the TOML file, then the preset, then explicit flags."""
    doc = TrainConfig().to_dict()
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                loaded = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        for section in ("ema", "cr", "model"):
            if isinstance(loaded.get(section), dict):
                doc[section].update(loaded.pop(section))
        doc.update(loaded)
    config = TrainConfig.from_dict(doc)
    if getattr(args, "preset", None):
        config = apply_preset(config, args.preset)
    flags = {
        "loss": args.loss, "lam": args.lam, "temperature": args.t, "iterations": args.iterations,
        "batch_size": args.batch, "seed": args.seed, "eval_interval": args.eval_interval,
        "n_dis": args.n_dis, "adv_loss": args.adv_loss,
    }
    config = config.replace(**{k: v for k, v in flags.items() if v is not None})
    if args.cr is not None:
        config = config.replace(cr=dataclasses.replace(config.cr, enabled=args.cr > 0, coefficient=args.cr))
    if args.set:
        doc = config.to_dict()
        for item in args.set:
            _set_dotted(doc, *_parse_set(item))
        config = TrainConfig.from_dict(doc)
    config.validate()
    return config


def load_data(args: argparse.Namespace, config: TrainConfig) -> tuple[LabeledDataset, LabeledDataset | None]:
    if args.train_csv:
        try:
            train = load_csv(args.train_csv, "train")
            val = load_csv(args.val_csv, "val") if args.val_csv else None
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return train, val
    C = config.model.num_classes
    if args.data_kind == "rings":
        return make_rings(C, args.n_per_class, seed=args.data_seed)
    return make_gaussian_mixture(C, args.n_per_class, seed=args.data_seed, dim=config.model.data_dim)


def _align_model(config: TrainConfig, train: LabeledDataset) -> TrainConfig:
    model = dataclasses.replace(config.model, num_classes=train.num_classes,
                                data_dim=train.dim)
    return config.replace(model=model)


# ---------------------------------------------------------------------------
# run directories


def git_hash(payload: bytes) -> str:
    """SHA-1 of ``payload`` framed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def input_hash(config: TrainConfig, train: LabeledDataset, val: LabeledDataset | None) -> str:
    data = hashlib.sha1()
    for ds in (train, val):
        if ds is not None:
            data.update(ds.samples.tobytes())
            data.update(ds.labels.tobytes())
    doc = {"config": config.to_dict(), "data": data.hexdigest()}
    return git_hash(json.dumps(doc, sort_keys=True).encode("utf-8"))


@dataclass
class RunManifest:
    run_id: str
    config: dict[str, Any]
    input_hash: str
    paths: dict[str, str] = field(default_factory=dict)
    status: str = "pending"
    error: str = ""
    best_class_frechet: float | None = None
    final_class_frechet: float | None = None
    best_iteration: int | None = None

    def write(self, run_dir: Path) -> None:
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"
        (run_dir / "manifest.json").write_text(text, encoding="utf-8")


def out_root(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get("CONTRA_OUT") or DEFAULT_OUT)


def prepare_run_dir(root: Path, run_id: str, force: bool) -> Path:
    run_dir = root / run_id
    if run_dir.exists():
        if not force:
            raise RunExistsError(f"{run_dir} exists; pass --force to overwrite")
        if not (run_dir / "manifest.json").exists():
            raise ConfigError(f"{run_dir} exists but is not a run directory; refusing to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    return run_dir


def execute_run(
    config: TrainConfig,
    train: LabeledDataset,
    val: LabeledDataset | None,
    root: Path,
    force: bool,
    run_id: str | None = None,
) -> RunManifest:
    """Train one configuration under ``root/<run-id>``.

    The manifest is on disk before training starts and is rewritten with the
    outcome; a numeric abort leaves status ``aborted`` and re-raises.
    """
    digest = input_hash(config, train, val)
    run_id = run_id or f"{config.loss}-b{config.batch_size}-s{config.seed}-{digest[:10]}"
    run_dir = prepare_run_dir(root, run_id, force)
    names = ("config.toml", "manifest.json", "metrics.jsonl", "ckpt-best.json", "ckpt-final.json")
    manifest = RunManifest(run_id, config.to_dict(), digest, {n: str(run_dir / n) for n in names}, "running")
    (run_dir / "config.toml").write_text(tomli_w.dumps(config.to_dict()), encoding="utf-8")
    manifest.write(run_dir)
    try:
        history, _ = run_training(config, train, val, out_dir=run_dir)
    except TrainingAborted as exc:
        manifest.status, manifest.error = "aborted", str(exc)
        manifest.write(run_dir)
        raise
    best = history.best
    manifest.status = "complete"
    manifest.best_class_frechet = best["class_frechet"]
    manifest.best_iteration = best["iteration"]
    manifest.final_class_frechet = history.records[-1]["class_frechet"]
    manifest.write(run_dir)
    return manifest


# ---------------------------------------------------------------------------
# grids


@dataclass
class Cell:
    config: TrainConfig
    root: str
    force: bool
    data: tuple[str, int, int]  # kind, n_per_class, data seed
    csvs: tuple[str | None, str | None]
    param: str = ""
    value: Any = ""


def _cell_data(cell: Cell) -> tuple[LabeledDataset, LabeledDataset | None]:
    ns = argparse.Namespace(
        train_csv=cell.csvs[0], val_csv=cell.csvs[1], data_kind=cell.data[0], n_per_class=cell.data[1],
        data_seed=cell.data[2],
    )
    return load_data(ns, cell.config)


def run_cell(cell: Cell) -> dict[str, Any]:
    """Worker entry point; never raises so one failure cannot sink a grid."""
    cfg = cell.config
    row = {c: "" for c in RUN_COLUMNS}
    row.update(loss=cfg.loss, seed=cfg.seed, batch_size=cfg.batch_size, param=cell.param, value=cell.value)
    try:
        train, val = _cell_data(cell)
        cfg = _align_model(cfg, train)
        m = execute_run(cfg, train, val, Path(cell.root), cell.force)
        row.update(run_id=m.run_id, status=m.status, best_class_frechet=m.best_class_frechet,
                   final_class_frechet=m.final_class_frechet, best_iteration=m.best_iteration)
    except TrainingAborted as exc:
        row.update(status="aborted", error=str(exc))
    except (ConfigError, ValueError, OSError) as exc:
        row.update(status="failed", error=str(exc))
    return row


def run_cells(cells: list[Cell], jobs: int) -> list[dict[str, Any]]:
    # parallel across runs only; each run is single-process and seeded
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells))


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else 0.0)


def _fmt(mean: float | None, std: float | None) -> str:
    return "n/a" if mean is None else f"{mean:.4f} ± {std:.4f}"


def _write_csv(path: Path, columns: Sequence[str], rows: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c, "") for c in columns})


def summarize_ablation(rows: list[dict[str, Any]], losses: Sequence[str], batches: Sequence[int]) -> list[dict[str, Any]]:
    summary = []
    for loss, b in itertools.product(losses, batches):
        cell = [r for r in rows if r["loss"] == loss and r["batch_size"] == b]
        ok = [r for r in cell if r["status"] == "complete"]
        bm, bs = _mean_std([r["best_class_frechet"] for r in ok])
        fm, fs = _mean_std([r["final_class_frechet"] for r in ok])
        summary.append(dict(
            loss=loss, batch_size=b, n_ok=len(ok), n_failed=len(cell) - len(ok),
            best_class_frechet_mean=bm, best_class_frechet_std=bs,
            final_class_frechet_mean=fm, final_class_frechet_std=fs, table=_fmt(bm, bs),
        ))
    return summary


def _csv_list(text: str, cast=str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from None


def _cells_common(args: argparse.Namespace, root: Path) -> dict[str, Any]:
    return dict(root=str(root), force=args.force, data=(args.data_kind, args.n_per_class, args.data_seed),
                csvs=(args.train_csv, args.val_csv))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out or os.environ.get("CONTRA_OUT") or ".")
    stem = f"{args.kind}-c{args.classes}-n{args.n}-s{args.seed}"
    paths = [out / f"{stem}-train.csv", out / f"{stem}-val.csv"]
    existing = [p for p in paths if p.exists()]
    if existing and not args.force:
        raise ConfigError(f"{existing[0]} exists; pass --force to overwrite")
    try:
        if args.kind == "rings":
            train, val = make_rings(args.classes, args.n, seed=args.seed)
        else:
            train, val = make_gaussian_mixture(
                args.classes, args.n, ring_radius=args.radius, sigma=args.sigma, seed=args.seed, dim=args.dim
            )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    for ds, p in zip((train, val), paths):
        save_csv(ds, p)
        print(p)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    train, val = load_data(args, config)
    config = _align_model(config, train)
    manifest = execute_run(config, train, val, out_root(args), args.force, args.run_id)
    print(f"{manifest.run_id}: best class_frechet {manifest.best_class_frechet:.5f} "
          f"at iteration {manifest.best_iteration}, final {manifest.final_class_frechet:.5f}")
    print(Path(manifest.paths["manifest.json"]).parent)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    base = build_config(args)
    try:
        losses = [canonical_mode(x) for x in _csv_list(args.losses)]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if len(losses) < 2:
        raise ConfigError("ablate needs at least two loss variants")
    seeds = _csv_list(args.seeds, int)
    batches = _csv_list(args.batch_sizes, int) if args.batch_sizes else [base.batch_size]
    if not seeds:
        raise ConfigError("ablate needs at least one seed")
    root = out_root(args) / args.name
    common = _cells_common(args, root)
    cells = [
        Cell(base.replace(loss=loss, seed=seed, batch_size=b), **common)
        for loss, b, seed in itertools.product(losses, batches, seeds)
    ]
    root.mkdir(parents=True, exist_ok=True)
    rows = run_cells(cells, args.jobs)
    summary = summarize_ablation(rows, losses, batches)
    _write_csv(root / "runs.csv", RUN_COLUMNS, rows)
    _write_csv(root / "summary.csv", SUMMARY_COLUMNS, summary)
    doc = {"runs": rows, "summary": summary}
    (root / "ablation.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    for s in summary:
        print(f"{s['loss']:>8}  m={s['batch_size']:<4} {s['table']}  ({s['n_ok']} ok, {s['n_failed']} failed)")
    scored = [s for s in summary if s["best_class_frechet_mean"] is not None]
    if scored:
        top = min(scored, key=lambda s: s["best_class_frechet_mean"])
        print(f"best cell: loss={top['loss']} batch={top['batch_size']} class_frechet {top['table']}")
    print(root)
    return EXIT_PARTIAL if any(r["status"] != "complete" for r in rows) else EXIT_OK


def _sweep_values(param: str, raw: str | None) -> list:
    if raw is None:
        return list(SWEEP_DEFAULTS[param])
    cast = {"temperature": float, "proj_dim": int, "batch": int, "proj_type": str}[param]
    return _csv_list(raw, cast)


def _apply_param(config: TrainConfig, param: str, value) -> TrainConfig:
    if param == "temperature":
        return config.replace(temperature=value)
    if param == "batch":
        return config.replace(batch_size=value)
    try:
        return config.replace(model=dataclasses.replace(config.model, **{param: value}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_sweep(args: argparse.Namespace) -> int:
    base = build_config(args)
    values = _sweep_values(args.param, args.values)
    seeds = _csv_list(args.seeds, int)
    if not values or not seeds:
        raise ConfigError("sweep needs at least one value and one seed")
    root = out_root(args) / args.name
    common = _cells_common(args, root)
    cells = [
        Cell(_apply_param(base.replace(seed=seed), args.param, v), param=args.param, value=v, **common)
        for v, seed in itertools.product(values, seeds)
    ]
    root.mkdir(parents=True, exist_ok=True)
    rows = run_cells(cells, args.jobs)
    aggregate = []
    for v in values:
        ok = [r for r in rows if r["value"] == v and r["status"] == "complete"]
        mean, std = _mean_std([r["best_class_frechet"] for r in ok])
        n = sum(r["value"] == v for r in rows)
        aggregate.append(dict(param=args.param, value=v, n_ok=len(ok), n_failed=n - len(ok), mean=mean, std=std))
    with open(root / "sweep.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for a in aggregate:
            fh.write(json.dumps({c: a[c] for c in SWEEP_COLUMNS}) + "\n")
    _write_csv(root / "runs.csv", RUN_COLUMNS, rows)
    for a in aggregate:
        print(f"{args.param}={a['value']}: {_fmt(a['mean'], a['std'])}  ({a['n_ok']} ok, {a['n_failed']} failed)")
    print(root)
    return EXIT_PARTIAL if any(r["status"] != "complete" for r in rows) else EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradchecks(range(args.seeds), eps=args.eps)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<40} {r.max_error:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _train_flags(p: argparse.ArgumentParser, single_loss: bool = True) -> None:
    g = p.add_argument_group("training configuration (file < preset < flags)")
    g.add_argument("--config", help="TOML file with TrainConfig fields")
    g.add_argument("--preset", help=f"hyperparameter preset, one of {', '.join(PRESETS)}")
    if single_loss:
        g.add_argument("--loss", help=f"conditioning loss, one of {', '.join(LOSSES)}")
    else:
        p.set_defaults(loss=None)
    g.add_argument("--lambda", dest="lam", type=float, help="conditioning loss weight (default 1.0)")
    g.add_argument("--t", type=float, help="temperature (default 1.0)")
    g.add_argument("--cr", type=float, metavar="COEFF", help="enable consistency regularization with this weight")
    g.add_argument("--iterations", type=int, help="generator updates")
    g.add_argument("--batch", type=int, help="batch size m")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-dis", type=int)
    g.add_argument("--adv-loss", choices=("hinge", "alg1_literal"))
    g.add_argument("--eval-interval", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any field, e.g. model.proj_dim=32")
    d = p.add_argument_group("data (generated unless --train-csv is given)")
    d.add_argument("--train-csv")
    d.add_argument("--val-csv")
    d.add_argument("--data-kind", choices=("gmm", "rings"), default="gmm")
    d.add_argument("--n-per-class", type=int, default=500)
    d.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", help="output root (default $CONTRA_OUT or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite existing run directories")


def _grid_flags(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.add_argument("--name", default=name, help="subdirectory of the output root for tables and runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contralab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/val CSVs of a synthetic set")
    p.add_argument("--kind", choices=("gmm", "rings"), default="gmm")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--n", type=int, default=500, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--out", help="directory (default $CONTRA_OUT or .)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="one training run",
                       epilog="Writes <out>/<run-id>/{config.toml, manifest.json, metrics.jsonl, "
                              "ckpt-best.json, ckpt-final.json}.")
    _train_flags(p)
    p.add_argument("--run-id", help="directory name (default derived from loss, batch, seed and input hash)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="loss x seed x batch-size grid", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="Tables under <out>/<name>/:\n"
                              f"  runs.csv     {','.join(RUN_COLUMNS)}\n"
                              f"  summary.csv  {','.join(SUMMARY_COLUMNS)}\n"
                              "  ablation.json {runs, summary} with the same fields")
    _train_flags(p, single_loss=False)
    _grid_flags(p, "ablate")
    p.add_argument("--losses", default="none,acgan,projgan,eq7,2c")
    p.add_argument("--batch-sizes", help="comma-separated batch sizes (default: the configured one)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one parameter over a grid of values", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="Tables under <out>/<name>/:\n"
                              f"  sweep.jsonl  one row per value: {','.join(SWEEP_COLUMNS)} (best class_frechet)\n"
                              f"  runs.csv     {','.join(RUN_COLUMNS)}\n"
                              f"default grids: {json.dumps(SWEEP_DEFAULTS)}")
    _train_flags(p)
    _grid_flags(p, "sweep")
    p.add_argument("--param", required=True, choices=tuple(SWEEP_DEFAULTS))
    p.add_argument("--values", help="comma-separated values (default grid per parameter)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and both networks")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
