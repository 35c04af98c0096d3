#!/usr/bin/env python3
"""
Experiment Management CLI for the GGCF recommender.
Dataset preparation, training, evaluation, layer-count grids, ablation
sweeps and learning-rate / L2 tuning.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from loguru import logger

from checkpoint import HistoryWriter, check_compatible, load_checkpoint, save_checkpoint
from errors import EXIT_OK, EXIT_USAGE, ConfigError, GGCFError, exit_code_for
from evaluation import evaluate
from graph import LOADERS, InteractionSet, build_graph, dataset_summary, file_hash, load_split, save_split, split
from model import ABLATIONS, AblationFlags, ParamSet, snapshot
from settings import configure_logging, default_output_dir, stable_hash
from train import TrainConfig, fit
from validator import save_report

LR_GRID = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
L2_GRID = (0.0, 1e-6, 1e-5, 1e-4, 1e-3)
DEFAULT_LAYER_LIST = (1, 2, 3, 4)

SPLIT_FILE = "split.tsv"
HISTORY_FILE = "history.jsonl"
CHECKPOINT_FILE = "model.npz"


@dataclass
class RunConfig:
    """Everything one run depends on; loaded from JSON and overridden by CLI flags."""

    dataset: str = "movielens"
    data_path: Optional[str] = None
    split_file: Optional[str] = None
    train_fraction: float = 0.8
    split_seed: int = 2020
    learning_rate: float = 1e-3
    l2_weight: float = 1e-4
    batch_size: int = 1024
    epochs: int = 400
    layers: int = 3
    dim: int = 64
    seed: int = 2020
    eval_every: int = 10
    k: int = 20
    ablation: str = "full"
    train_interaction_scales: bool = True
    deterministic: bool = False
    output_dir: Optional[str] = None

    @classmethod
    def read_json(cls, path) -> Dict[str, Any]:
        """The key-value pairs of a JSON config file, checked against the known keys."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")

        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        return data

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls(**cls.read_json(path))

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with every non-None override applied."""
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})

    def validate(self) -> "RunConfig":
        if self.dataset not in LOADERS:
            raise ConfigError(f"Unknown dataset: {self.dataset!r}. Valid: {', '.join(LOADERS)}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.data_path is not None and not Path(self.data_path).exists():
            raise FileNotFoundError(f"Data file not found: {self.data_path}")
        self.train_config().validate()
        self.flags()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            l2_weight=self.l2_weight,
            batch_size=self.batch_size,
            epochs=self.epochs,
            layers=self.layers,
            dim=self.dim,
            seed=self.seed,
            eval_every=self.eval_every,
            k=self.k,
            train_interaction_scales=self.train_interaction_scales,
            deterministic=self.deterministic,
        )

    def flags(self) -> AblationFlags:
        return AblationFlags.from_name(self.ablation)

    def config_hash(self) -> str:
        payload = asdict(self)
        payload.pop("output_dir")
        return stable_hash(payload)

    def out_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else default_output_dir()


def _write_json(payload: Dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _load_raw(config: RunConfig) -> InteractionSet:
    if config.data_path is None:
        raise ConfigError("--data-path is required to read the raw dataset")
    return LOADERS[config.dataset](config.data_path)


def ensure_split(config: RunConfig) -> Tuple[RunConfig, InteractionSet, InteractionSet, str]:
    """Reuse the frozen split if it exists, otherwise split the raw data and freeze it.

    Returns the config pointing at the split file, the two halves and the
    split hash.
    """
    if config.split_file and Path(config.split_file).exists():
        train, test = load_split(config.split_file)
        return config, train, test, file_hash(config.split_file)

    data = _load_raw(config)
    train, test = split(data, config.train_fraction, config.split_seed)
    split_path = Path(config.split_file) if config.split_file else config.out_dir() / SPLIT_FILE
    split_hash = save_split(train, test, split_path)
    return replace(config, split_file=str(split_path)), train, test, split_hash


def prepare_dataset(config: RunConfig) -> Dict[str, Any]:
    """Load the raw dataset, split it, freeze the split and report dataset statistics."""
    config.validate()
    data = _load_raw(config)
    summary = dataset_summary(data)

    train, test = split(data, config.train_fraction, config.split_seed)
    split_path = Path(config.split_file) if config.split_file else config.out_dir() / SPLIT_FILE
    split_hash = save_split(train, test, split_path)

    if data.ingest_report is not None:
        save_report(data.ingest_report, str(split_path.with_name("ingest_report.json")))

    summary.update(
        {
            "dataset": config.dataset,
            "train_interactions": len(train),
            "test_interactions": len(test),
            "split_file": str(split_path),
            "split_hash": split_hash,
            "split_seed": config.split_seed,
            "train_fraction": config.train_fraction,
            "config_hash": config.config_hash(),
        }
    )
    _write_json(summary, split_path.with_name("dataset_summary.json"))

    print(f"users={summary['users']} items={summary['items']} interactions={summary['interactions']}")
    logger.success(
        f"Prepared {config.dataset}: {summary['users']:,} users, {summary['items']:,} items, "
        f"{summary['interactions']:,} interactions (density {summary['density']:.5f})",
        split_hash=split_hash[:12],
    )
    return summary


def train_run(config: RunConfig, progress: bool = True) -> Tuple[ParamSet, List[Dict[str, Any]], str]:
    """Train one model; writes the history stream and checkpoints under the run's output dir."""
    config.validate()
    config, train, test, split_hash = ensure_split(config)
    graph = build_graph(train)
    flags = config.flags()
    config_hash = config.config_hash()

    out = config.out_dir()
    history = HistoryWriter(out / HISTORY_FILE)
    checkpoint_path = out / CHECKPOINT_FILE
    extra = {"dataset": config.dataset, "config": asdict(config)}

    def on_checkpoint(epoch: int, params: ParamSet) -> None:
        save_checkpoint(
            checkpoint_path,
            params,
            config.layers,
            flags,
            train.user_ids,
            train.item_ids,
            split_hash=split_hash,
            config_hash=config_hash,
            extra={**extra, "epoch": epoch},
        )
        logger.success(f"Checkpoint saved at epoch {epoch}", path=str(checkpoint_path))

    params, records = fit(
        graph,
        config.train_config(),
        flags,
        test=test,
        config_hash=config_hash,
        on_record=history.write,
        on_checkpoint=on_checkpoint,
        progress=progress,
    )
    return params, records, split_hash


def evaluate_checkpoint(
    config: RunConfig,
    checkpoint_path,
    per_user: bool = False,
    expected_shape: Optional[Dict[str, int]] = None,
) -> Dict[str, Any]:
    """Rebuild the graph from the frozen split, run one forward pass and score the held-out items.

    ``expected_shape`` holds the ``dim`` / ``layers`` the caller asked for
    explicitly; the checkpoint must match them.
    """
    if not config.split_file:
        raise ConfigError("--split-file is required to evaluate a checkpoint")
    config.validate()
    ckpt = load_checkpoint(checkpoint_path)
    train, test = load_split(config.split_file)
    shape = expected_shape or {}
    check_compatible(
        ckpt,
        train.user_ids,
        train.item_ids,
        file_hash(config.split_file),
        dim=shape.get("dim"),
        layers=shape.get("layers"),
    )

    graph = build_graph(train)
    final, lam = snapshot(graph, ckpt.params, ckpt.layers, ckpt.flags)
    report = evaluate(final, graph, test, config.k, lam, per_user=per_user, config_hash=ckpt.config_hash)

    record = report.to_record()
    record["ablation"] = ckpt.flags.name
    out = config.out_dir()
    _write_json(record, out / "eval.json")
    if per_user:
        rows = pd.DataFrame(report.per_user)
        rows.insert(1, "user_id", train.user_ids[rows["user"].to_numpy()])
        rows.to_csv(out / "eval_per_user.csv", index=False)
        logger.info(f"Per-user metrics saved to: {out / 'eval_per_user.csv'}")

    print(json.dumps(record, sort_keys=True))
    logger.success(f"recall@{report.k}={report.recall:.4f} ndcg@{report.k}={report.ndcg:.4f}", users=report.users_evaluated)
    return record


def run_cell(config: RunConfig) -> Dict[str, Any]:
    """Train one sweep cell; failures are reported in the row instead of raised."""
    row: Dict[str, Any] = {
        "ablation": config.ablation,
        "layers": config.layers,
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "l2_weight": config.l2_weight,
        "config_hash": config.config_hash(),
    }
    recall_key, ndcg_key = f"recall@{config.k}", f"ndcg@{config.k}"
    try:
        _, records, split_hash = train_run(config, progress=False)
        last = records[-1]
        row.update(
            {
                recall_key: last[recall_key],
                ndcg_key: last[ndcg_key],
                "final_loss": last["loss"],
                "split_hash": split_hash,
                "status": "ok",
            }
        )
    except (GGCFError, OSError, RuntimeError) as e:
        logger.error(f"Cell failed: {e}", config_hash=row["config_hash"])
        row.update({recall_key: None, ndcg_key: None, "final_loss": None, "split_hash": None, "status": f"failed: {e}"})
    return row


def run_cells(cells: Sequence[RunConfig], workers: int = 1) -> List[Dict[str, Any]]:
    """Run sweep cells in order, or in worker processes when allowed."""
    sequential = workers <= 1 or any(cell.deterministic for cell in cells)
    if sequential:
        return [run_cell(cell) for cell in cells]
    logger.info(f"Running {len(cells)} cells on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def _save_table(rows: List[Dict[str, Any]], path: Path) -> pd.DataFrame:
    table = pd.DataFrame(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    logger.info(f"Table saved to: {path}")
    return table


def layer_grid(config: RunConfig, layer_list: Sequence[int], workers: int = 1) -> pd.DataFrame:
    """One model per layer count on a shared split and seed."""
    config.validate()
    config, _, _, split_hash = ensure_split(config)
    base = config.out_dir() / "grid"
    cells = [config.with_overrides(layers=k, output_dir=str(base / f"layers_{k}")) for k in layer_list]
    for cell in cells:
        cell.validate()

    table = _save_table(run_cells(cells, workers), base / "grid.csv")
    recall_key = f"recall@{config.k}"
    ok = table[table["status"] == "ok"].set_index("layers")
    if {1, 3} <= set(ok.index):
        holds = bool(ok.loc[3, recall_key] >= ok.loc[1, recall_key])
        log = logger.info if holds else logger.warning
        log(f"Layer trend {recall_key}(K=3) >= {recall_key}(K=1): {'holds' if holds else 'FAILS'}")

    print(table.to_string(index=False))
    logger.success(f"Grid finished: {int((table['status'] == 'ok').sum())}/{len(table)} cells ok", split_hash=split_hash[:12])
    return table


def direction_checks(summary: pd.DataFrame, k: int) -> Dict[str, Optional[bool]]:
    """Whether full >= no-interaction on recall and full >= euclidean-only on ndcg (None if a row is missing)."""
    recall_key, ndcg_key = f"recall@{k}", f"ndcg@{k}"
    means = summary.set_index("ablation")

    def at_least(metric: str, other: str) -> Optional[bool]:
        if "full" not in means.index or other not in means.index:
            return None
        a, b = means.loc["full", metric], means.loc[other, metric]
        if pd.isna(a) or pd.isna(b):
            return None
        return bool(a >= b)

    return {
        f"full_vs_no_interaction_{recall_key}": at_least(recall_key, "no-interaction"),
        f"full_vs_euclidean_only_{ndcg_key}": at_least(ndcg_key, "euclidean-only"),
    }


def ablation_study(config: RunConfig, seeds: Optional[Sequence[int]] = None, workers: int = 1) -> pd.DataFrame:
    """Train every ablation variant on a shared split, averaged over ``seeds``."""
    config.validate()
    config, _, _, split_hash = ensure_split(config)
    seeds = list(seeds) if seeds else [config.seed]
    base = config.out_dir() / "ablate"
    cells = [
        config.with_overrides(ablation=name, seed=seed, output_dir=str(base / f"{name}_seed{seed}"))
        for name in ABLATIONS
        for seed in seeds
    ]

    table = _save_table(run_cells(cells, workers), base / "ablation_runs.csv")
    recall_key, ndcg_key = f"recall@{config.k}", f"ndcg@{config.k}"
    ok = table[table["status"] == "ok"].astype({recall_key: float, ndcg_key: float})
    summary = (
        ok.groupby("ablation", sort=False)[[recall_key, ndcg_key]].mean().reindex(list(ABLATIONS)).reset_index()
    )
    summary["runs"] = [int((ok["ablation"] == name).sum()) for name in summary["ablation"]]
    summary["failed"] = [int(((table["ablation"] == name) & (table["status"] != "ok")).sum()) for name in summary["ablation"]]

    checks = direction_checks(summary, config.k)
    for name, holds in checks.items():
        if holds is None:
            logger.warning(f"Direction check {name}: not computable")
        elif holds:
            logger.info(f"Direction check {name}: holds")
        else:
            logger.warning(f"Direction check {name}: FAILS")
        summary[name] = holds

    config_hash = config.config_hash()
    summary["config_hash"] = config_hash
    _save_table(summary.to_dict("records"), base / "ablation.csv")
    _write_json(
        {"checks": checks, "config_hash": config_hash, "seeds": seeds, "split_hash": split_hash},
        base / "ablation_checks.json",
    )

    print(summary.to_string(index=False))
    logger.success(f"Ablation finished over {len(seeds)} seed(s)")
    return summary


def tune(
    config: RunConfig,
    lr_grid: Sequence[float] = LR_GRID,
    l2_grid: Sequence[float] = L2_GRID,
    validation_fraction: float = 0.1,
    workers: int = 1,
) -> pd.DataFrame:
    """Score every (lr, l2) pair on a validation holdout carved from the training split."""
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    config.validate()
    config, train, _, _ = ensure_split(config)

    base = config.out_dir() / "tune"
    fit_part, holdout = split(train, 1.0 - validation_fraction, config.split_seed)
    if len(holdout) == 0:
        raise ConfigError("validation holdout is empty; raise --validation-fraction")
    validation_split = base / "validation_split.tsv"
    save_split(fit_part, holdout, validation_split)

    cells = [
        config.with_overrides(
            learning_rate=lr,
            l2_weight=l2,
            split_file=str(validation_split),
            output_dir=str(base / f"lr{lr:g}_l2{l2:g}"),
        )
        for lr in lr_grid
        for l2 in l2_grid
    ]
    for cell in cells:
        cell.validate()
    table = _save_table(run_cells(cells, workers), base / "tune.csv")

    recall_key = f"recall@{config.k}"
    ok = table[table["status"] == "ok"].astype({recall_key: float})
    if ok.empty:
        logger.warning("No tuning cell finished")
    else:
        best = ok.loc[ok[recall_key].idxmax()]
        logger.success(
            f"Best validation {recall_key}={best[recall_key]:.4f} at lr={best['learning_rate']:g} l2={best['l2_weight']:g}"
        )
    print(table.to_string(index=False))
    return table


class CLIParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the usage code rather than 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--dataset", choices=sorted(LOADERS), help="Raw dataset kind (default: movielens)")
    common.add_argument("--data-path", help="Raw ratings.csv / user_artists.dat")
    common.add_argument("--split-file", help="Frozen train/test split (written if missing)")
    common.add_argument("--split-seed", type=int, help="Seed of the per-user split (default: 2020)")
    common.add_argument("--train-fraction", type=float, help="Share of each user's items used for training (default: 0.8)")
    common.add_argument("--dim", type=int, help="Embedding dimension (default: 64)")
    common.add_argument("--layers", type=int, help="Propagation layers K (default: 3)")
    common.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    common.add_argument("--l2", type=float, help="L2 weight (default: 1e-4)")
    common.add_argument("--batch", type=int, help="Mini-batch size (default: 1024)")
    common.add_argument("--epochs", type=int, help="Training epochs (default: 400)")
    common.add_argument("--eval-every", type=int, help="Epochs between evaluations (default: 10)")
    common.add_argument("--k", type=int, help="Metric cut-off (default: 20)")
    common.add_argument("--seed", type=int, help="Initialisation and sampling seed (default: 2020)")
    common.add_argument("--ablation", choices=list(ABLATIONS), help="Model variant (default: full)")
    common.add_argument(
        "--pin-interaction-scales",
        action="store_true",
        help="Keep gamma and gamma' fixed at 0 during training",
    )
    common.add_argument("--out", help="Output directory (default: $GGCF_OUTPUT_DIR or ./output)")
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="Single-threaded deterministic kernels; sweeps run sequentially",
    )
    common.add_argument("--quiet", "-q", action="store_true", help="Warnings only, no progress bars")
    return common


def _add_workers(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--workers", type=int, default=1, help="Worker processes for sweep cells (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = CLIParser(
        description="GGCF Experiment Management",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python experiment_management.py prepare --dataset movielens --data-path ./data/ml-latest-small/ratings.csv
  python experiment_management.py prepare --dataset lastfm --data-path ./data/hetrec2011-lastfm-2k/user_artists.dat --out ./output/lastfm
  python experiment_management.py train --split-file ./output/split.tsv --layers 3 --lr 1e-3 --l2 1e-4
  python experiment_management.py train --config run.json --ablation euclidean-only --deterministic
  python experiment_management.py evaluate --checkpoint ./output/model.npz --split-file ./output/split.tsv --per-user
  python experiment_management.py grid --split-file ./output/split.tsv --layer-list 1 2 3 4
  python experiment_management.py ablate --split-file ./output/split.tsv --seeds 1 2 3 --workers 4
  python experiment_management.py tune --split-file ./output/split.tsv --lr-grid 1e-3 5e-4 --l2-grid 1e-5 1e-4
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands", parser_class=CLIParser)

    subparsers.add_parser("prepare", parents=[common], help="Split a raw dataset and print its statistics")
    subparsers.add_parser("train", parents=[common], help="Train a model, writing history and checkpoints")

    eval_parser = subparsers.add_parser("evaluate", parents=[common], help="Evaluate a checkpoint on the frozen split")
    eval_parser.add_argument("--checkpoint", required=True, help="Path to a model.npz checkpoint")
    eval_parser.add_argument("--per-user", action="store_true", help="Also write per-user metrics CSV")

    grid_parser = subparsers.add_parser("grid", parents=[common], help="Train one model per layer count")
    grid_parser.add_argument(
        "--layer-list",
        type=int,
        nargs="+",
        default=list(DEFAULT_LAYER_LIST),
        help="Layer counts to train (default: 1 2 3 4)",
    )
    _add_workers(grid_parser)

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Train every ablation variant")
    ablate_parser.add_argument("--seeds", type=int, nargs="+", help="Seeds to average over (default: --seed)")
    _add_workers(ablate_parser)

    tune_parser = subparsers.add_parser("tune", parents=[common], help="Search learning rate and L2 weight")
    tune_parser.add_argument("--lr-grid", type=float, nargs="+", default=list(LR_GRID), help="Learning rates to try")
    tune_parser.add_argument("--l2-grid", type=float, nargs="+", default=list(L2_GRID), help="L2 weights to try")
    tune_parser.add_argument(
        "--validation-fraction",
        type=float,
        default=0.1,
        help="Share of each user's training items held out for validation (default: 0.1)",
    )
    _add_workers(tune_parser)

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """JSON config (or defaults) with command-line overrides applied."""
    base = RunConfig.from_json(args.config) if args.config else RunConfig()
    return base.with_overrides(
        dataset=args.dataset,
        data_path=args.data_path,
        split_file=args.split_file,
        split_seed=args.split_seed,
        train_fraction=args.train_fraction,
        dim=args.dim,
        layers=args.layers,
        learning_rate=args.lr,
        l2_weight=args.l2,
        batch_size=args.batch,
        epochs=args.epochs,
        eval_every=args.eval_every,
        k=args.k,
        seed=args.seed,
        ablation=args.ablation,
        train_interaction_scales=False if args.pin_interaction_scales else None,
        output_dir=args.out,
        deterministic=True if args.deterministic else None,
    )


def explicit_shape(args: argparse.Namespace) -> Dict[str, int]:
    """``dim`` / ``layers`` set in the config file or on the command line (flags win)."""
    given = RunConfig.read_json(args.config) if args.config else {}
    shape = {key: given[key] for key in ("dim", "layers") if key in given}
    for key in ("dim", "layers"):
        if getattr(args, key) is not None:
            shape[key] = getattr(args, key)
    return shape


def run_command(args: argparse.Namespace) -> None:
    config = config_from_args(args)
    progress = not args.quiet and sys.stderr.isatty()

    if args.command == "prepare":
        prepare_dataset(config)
    elif args.command == "train":
        _, records, _ = train_run(config, progress=progress)
        logger.success(f"History saved to: {config.out_dir() / HISTORY_FILE}", epochs=len(records))
    elif args.command == "evaluate":
        evaluate_checkpoint(config, args.checkpoint, per_user=args.per_user, expected_shape=explicit_shape(args))
    elif args.command == "grid":
        layer_grid(config, args.layer_list, workers=args.workers)
    elif args.command == "ablate":
        ablation_study(config, seeds=args.seeds, workers=args.workers)
    elif args.command == "tune":
        tune(config, args.lr_grid, args.l2_grid, args.validation_fraction, workers=args.workers)


def main(argv: Optional[Sequence[str]] = None):
    """Main CLI interface."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_USAGE)

    configure_logging(level="WARNING" if args.quiet else None)

    try:
        run_command(args)
    except (GGCFError, OSError) as e:
        logger.error(str(e))
        sys.exit(exit_code_for(e))
    except Exception:
        logger.opt(exception=True).error("Unexpected failure")
        sys.exit(EXIT_USAGE)

    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
