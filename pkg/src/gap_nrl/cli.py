"""Command-line entry point: ``gap-nrl {split,train,eval-lp,eval-cluster,sweep,ablate-mlp}``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .graph import EdgeSplit, GraphParseError, read_edge_list, read_labels, read_manifest, serialize_edge_list, split_edges, write_manifest
from .metrics import EvalReport, config_digest, eval_clustering, eval_link_prediction
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("gap_nrl")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

MANIFEST, TRAIN_EDGES, ID_MAP = "split.manifest", "train.edges", "id_map.txt"
CHECKPOINT, HISTORY, TRAIN_LOG, RESOLVED, REPORT, SWEEP = (
    "checkpoint.gap", "history.tsv", "train.log", "resolved.conf", "report.txt", "sweep.tsv")

# per-dataset defaults; "dropout" is the drop probability
PRESETS = {
    "cora": {"neighborhood": 100, "dropout": 0.5, "lr": 1e-4, "dim": 200},
    "zhihu": {"neighborhood": 250, "dropout": 0.65, "lr": 1e-4, "dim": 200},
    "email": {"neighborhood": 100, "dropout": 0.8, "lr": 1e-4, "dim": 200},
}

# flag name -> (type, default)
TRAIN_KEYS = {
    "split": (str, None),
    "neighborhood": (int, 100),
    "dropout": (float, 0.5),
    "lr": (float, 1e-4),
    "dim": (int, 200),
    "batch-size": (int, 64),
    "max-epochs": (int, 200),
    "patience": (int, 10),
    "seed": (int, 0),
    "optimizer": (str, "adam"),
    "model": (str, "gap"),
    "exclude-partner": (int, 0),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def labels_digest(labels) -> str:
    return hashlib.sha256("\n".join(labels).encode()).hexdigest()


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}: line {lineno}: expected 'key = value'", EXIT_USAGE)
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def resolve_train_settings(args) -> dict:
    """Defaults < preset < config file < explicit flags."""
    settings = {k: default for k, (_, default) in TRAIN_KEYS.items()}
    if args.preset:
        settings.update(PRESETS[args.preset])
    if args.config:
        file_cfg = read_config_file(args.config)
        if "preset" in file_cfg:
            settings.update(PRESETS[file_cfg.pop("preset")])
        for key, value in file_cfg.items():
            if key not in TRAIN_KEYS:
                raise CliError(f"{args.config}: unknown key '{key}'", EXIT_USAGE)
            settings[key] = TRAIN_KEYS[key][0](value)
    for key in TRAIN_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            settings[key] = value
    if settings["split"] is None:
        raise CliError("no split directory given (--split or 'split' in --config)", EXIT_USAGE)
    return settings


def train_config(settings: dict) -> TrainConfig:
    p = settings["dropout"]
    if not 0.0 <= p < 1.0:
        raise CliError(f"--dropout is a drop probability in [0, 1), got {p}", EXIT_USAGE)
    try:
        return TrainConfig(
            L=settings["neighborhood"], d=settings["dim"], dropout_keep=1.0 - p,
            learning_rate=settings["lr"], batch_size=settings["batch-size"],
            max_epochs=settings["max-epochs"], patience=settings["patience"], seed=settings["seed"],
            optimizer=settings["optimizer"], model=settings["model"],
            exclude_partner=bool(settings["exclude-partner"]),
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


def write_resolved(path: Path, settings: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in TRAIN_KEYS:
            fh.write(f"{key} = {settings[key]}\n")


def load_split(split_dir: str) -> EdgeSplit:
    path = Path(split_dir) / MANIFEST
    if not path.is_file():
        raise CliError(f"no {MANIFEST} in '{split_dir}'", EXIT_USAGE)
    try:
        return read_manifest(path)
    except (GraphParseError, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None


def prepare_out(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_id_map(path: Path, labels) -> None:
    atomic_write(path, "".join(f"{lab} {i}\n" for i, lab in enumerate(labels)))


def read_id_map(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        rows = [line.split() for line in fh if line.strip()]
    return [lab for lab, _ in sorted(rows, key=lambda r: int(r[1]))]


def write_history(path: Path, history) -> None:
    lines = ["epoch\tmean_loss\tvalid_auc\n"]
    lines += [f"{r.epoch}\t{r.mean_loss!r}\t{r.valid_auc!r}\n" for r in history]
    atomic_write(path, "".join(lines))


# --- commands ---------------------------------------------------------------

def cmd_split(args) -> int:
    if not 0.0 < args.ratio <= 1.0:
        raise CliError(f"--ratio must lie in (0, 1], got {args.ratio}", EXIT_USAGE)
    if not 0.0 <= args.valid_fraction < 1.0:
        raise CliError(f"--valid-fraction must lie in [0, 1), got {args.valid_fraction}", EXIT_USAGE)
    try:
        g = read_edge_list(args.edges, directed=args.directed)
    except OSError as exc:
        raise CliError(f"cannot read {args.edges}: {exc.strerror}", EXIT_DATA) from None
    except GraphParseError as exc:
        raise CliError(f"{args.edges}: {exc}", EXIT_DATA) from None
    split = split_edges(g, args.ratio, args.valid_fraction, args.seed)
    out = prepare_out(args.out)
    write_manifest(split, out / MANIFEST)
    atomic_write(out / TRAIN_EDGES, serialize_edge_list(g, split.train_edges))
    write_id_map(out / ID_MAP, g.labels)
    print(f"nodes {g.num_nodes} edges {g.num_edges} train {len(split.train_edges)} "
          f"valid {len(split.valid_edges)} test {len(split.test_edges)}")
    return 0


def run_training(settings: dict, out: Path):
    split = load_split(settings["split"])
    cfg = train_config(settings)
    write_resolved(out / RESOLVED, settings)
    write_id_map(out / ID_MAP, split.graph.labels)
    with open(out / TRAIN_LOG, "w", encoding="utf-8") as log:
        log.write("epoch\tmean_loss\tvalid_auc\telapsed_ms\n")
        try:
            params, history = train(split, cfg, log=log)
        except TrainingDiverged as exc:
            raise CliError(f"training diverged at epoch {exc.epoch}: {exc}", EXIT_NUMERIC) from None
    save_checkpoint(out / CHECKPOINT, params, cfg.L)
    write_history(out / HISTORY, history)
    return split, cfg, params, history


def cmd_train(args) -> int:
    settings = resolve_train_settings(args)
    out = prepare_out(args.out)
    _, _, _, history = run_training(settings, out)
    if history:
        last = history[-1]
        print(f"epochs {len(history)} final_loss {last.mean_loss:.6f} valid_auc {last.valid_auc:.6f}")
    else:
        print("epochs 0")
    return 0


def load_run(run: str | None, checkpoint: str | None, split: EdgeSplit):
    """Load a checkpoint and confirm it was trained on ``split``'s node set."""
    if checkpoint is None:
        if run is None:
            raise CliError("give --run DIR or --checkpoint PATH", EXIT_USAGE)
        checkpoint = str(Path(run) / CHECKPOINT)
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise CliError(f"no checkpoint at '{ckpt}'", EXIT_USAGE)
    try:
        params, L = load_checkpoint(ckpt)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    if params.num_nodes != split.graph.num_nodes:
        raise CliError(f"checkpoint has {params.num_nodes} nodes, split has {split.graph.num_nodes}", EXIT_DATA)
    id_map = ckpt.parent / ID_MAP
    if id_map.is_file() and labels_digest(read_id_map(id_map)) != labels_digest(split.graph.labels):
        raise CliError("checkpoint id_map digest does not match the split", EXIT_DATA)
    settings = {}
    resolved = ckpt.parent / RESOLVED
    if resolved.is_file():
        settings = read_config_file(str(resolved))
    return params, L, settings


def cmd_eval_lp(args) -> int:
    split = load_split(args.split)
    params, L, settings = load_run(args.run, args.checkpoint, split)
    report = eval_link_prediction(params, split, L, args.seed, config_digest(settings))
    out = prepare_out(args.out)
    atomic_write(out / REPORT, report.to_line() + "\n")
    print(f"auc {report.value}")
    return 0


def cmd_eval_cluster(args) -> int:
    split = load_split(args.split)
    params, L, settings = load_run(args.run, args.checkpoint, split)
    try:
        communities = read_labels(args.labels, split.graph)
    except OSError as exc:
        raise CliError(f"cannot read {args.labels}: {exc.strerror}", EXIT_DATA) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    reports = eval_clustering(params, split, communities, L, args.seed, config_digest(settings))
    out = prepare_out(args.out)
    atomic_write(out / REPORT, "".join(r.to_line() + "\n" for r in reports))
    print(f"k {len(np.unique(communities))}")
    for r in reports:
        print(f"{r.metric} {r.value}")
    return 0


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--values must be comma-separated integers, got '{text}'", EXIT_USAGE) from None
    if not values:
        raise CliError("--values is empty", EXIT_USAGE)
    return values


def cmd_sweep(args) -> int:
    values = _parse_values(args.values)
    if args.metric == "nmi" and not args.labels:
        raise CliError("--metric nmi needs --labels", EXIT_USAGE)
    base = resolve_train_settings(args)
    out = prepare_out(args.out)
    rows = []
    for value in values:
        settings = dict(base, neighborhood=value)
        run_dir = prepare_out(str(out / f"neighborhood_{value}"))
        split, cfg, params, _ = run_training(settings, run_dir)
        digest = config_digest(settings)
        if args.metric == "auc":
            reports = [eval_link_prediction(params, split, cfg.L, cfg.seed, digest)]
        else:
            communities = read_labels(args.labels, split.graph)
            reports = list(eval_clustering(params, split, communities, cfg.L, cfg.seed, digest))
        atomic_write(run_dir / REPORT, "".join(r.to_line() + "\n" for r in reports))
        for r in reports:
            rows.append(f"neighborhood\t{value}\t{r.metric}\t{r.value!r}\n")
            print(rows[-1], end="")
    atomic_write(out / SWEEP, "".join(rows))
    return 0


def cmd_ablate_mlp(args) -> int:
    base = resolve_train_settings(args)
    out = prepare_out(args.out)
    reports = []
    for model in ("gap", "mlp"):
        settings = dict(base, model=model)
        run_dir = prepare_out(str(out / model))
        split, cfg, params, _ = run_training(settings, run_dir)
        r = eval_link_prediction(params, split, cfg.L, cfg.seed, config_digest(settings))
        r.metric = f"auc_{model}"
        reports.append(r)
    atomic_write(out / REPORT, "".join(r.to_line() + "\n" for r in reports))
    gap_auc, mlp_auc = (r.value for r in reports)
    print(f"gap_auc {gap_auc}\nmlp_auc {mlp_auc}\ndifference {gap_auc - mlp_auc}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", help="split directory written by 'split'")
    p.add_argument("--config", help="'key = value' file; keys are flag names")
    p.add_argument("--preset", choices=sorted(PRESETS), help="hyper-parameters of a reference dataset")
    p.add_argument("--neighborhood", type=int, help="neighborhood sequence length L")
    p.add_argument("--dropout", type=float, help="drop probability (keep = 1 - dropout)")
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--exclude-partner", type=int, choices=[0, 1],
                   help="hide t from N_s and s from N_t when training on (s, t)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gap-nrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split an edge list into train/valid/test")
    p.add_argument("--edges", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--valid-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--directed", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a split")
    _add_train_flags(p)
    p.add_argument("--model", choices=["gap", "mlp"])
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval-lp", cmd_eval_lp, "link-prediction AUC on the test edges"),
                                 ("eval-cluster", cmd_eval_cluster, "spectral clustering NMI/AMI")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--split", required=True)
        p.add_argument("--run", help="training output directory")
        p.add_argument("--checkpoint")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if name == "eval-cluster":
            p.add_argument("--labels", required=True, help="'node community' lines")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="train and evaluate for several neighborhood lengths")
    _add_train_flags(p)
    p.add_argument("--model", choices=["gap", "mlp"])
    p.add_argument("--values", required=True, help="comma-separated neighborhood lengths")
    p.add_argument("--metric", choices=["auc", "nmi"], default="auc")
    p.add_argument("--labels")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate-mlp", help="train the attention model and the MLP ablation side by side")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate_mlp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"gap-nrl: error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"gap-nrl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
