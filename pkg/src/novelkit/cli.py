"""Command-line entry point: ``novelkit {synth,discover,cluster,estimate-k,eval}``.

Every command writes a ``<command>.manifest.json`` next to its outputs with
the resolved configuration, seed, SHA-256 digests of inputs and outputs,
and wall-clock duration. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classcount import EstimationConfig, estimate_class_count
from .dataio import EmbeddingDataset, MixtureSpec, load_dataset, save_dataset, split_probe, synth_mixture
from .evaluate import clustering_acc, confusion_matrix, old_new_all_accuracy, silhouette
from .kmeans import kmeans
from .losses import RampSchedule
from .model import init_model, load_checkpoint, predict_unlabelled, save_checkpoint
from .pseudolabel import LabelerConfig
from .train import AugmentConfig, TrainSchedule, run_discovery, train_clustering

log = logging.getLogger("novelkit")

LABELER_CHOICES = {
    "rank": "rank",
    "soft-rank": "soft_rank",
    "cosine": "cosine",
    "mutual-nn": "mutual_nn",
    "kmeans": "kmeans_batch",
}
_DEFAULTS = TrainSchedule()


class UsageError(Exception):
    pass


# -- argument parsing -------------------------------------------------------


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a number > 0, got {text}")
    return value


def _unit_open(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {text}")
    return value


def _add_common(p):
    p.add_argument("--config", type=Path, help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=None, help="random seed (falls back to $NOVELTY_SEED, then 0)")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs and the manifest")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_non_negative_int, default=_DEFAULTS.epochs)
    g.add_argument("--warmup-epochs", type=_non_negative_int, default=30, help="supervised CE epochs before joint training")
    g.add_argument("--batch-size", type=int, default=_DEFAULTS.batch_size)
    g.add_argument("--lr", type=_positive_float, default=_DEFAULTS.lr)
    g.add_argument("--lr-decay-epoch", type=_non_negative_int, default=_DEFAULTS.lr_decay[0][0])
    g.add_argument("--lr-decay-factor", type=_positive_float, default=_DEFAULTS.lr_decay[0][1])
    g.add_argument("--momentum", type=float, default=_DEFAULTS.momentum)
    g.add_argument("--labeler", choices=sorted(LABELER_CHOICES), default="rank")
    g.add_argument("--topk", type=_positive_int, default=_DEFAULTS.labeler.k, help="top-k size for rank labelers")
    g.add_argument("--cosine-tau", type=float, default=_DEFAULTS.labeler.cosine_threshold)
    g.add_argument("--ramp-weight", type=float, default=_DEFAULTS.ramp.weight)
    g.add_argument("--ramp-length", type=float, default=_DEFAULTS.ramp.length)
    g.add_argument("--incremental-weight", type=float, default=_DEFAULTS.incremental_ce.weight)
    g.add_argument("--incremental-length", type=float, default=_DEFAULTS.incremental_ce.length)
    g.add_argument("--noise-std", type=float, default=_DEFAULTS.aug.noise_std)
    g.add_argument("--dropout", type=float, default=_DEFAULTS.aug.dropout_p)
    g.add_argument("--hidden", type=_positive_int, default=64, help="trunk width")
    g.add_argument("--identity-trunk", action="store_true", help="train the heads directly on the inputs")
    g.add_argument("--no-bce", dest="use_bce", action="store_false")
    g.add_argument("--no-mse", dest="use_mse", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="novelkit", description="Novel category discovery on embedding vectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled/unlabelled/test Gaussian mixture")
    _add_common(p)
    p.add_argument("--cl", type=_positive_int, required=True, help="labelled classes")
    p.add_argument("--cu", type=_positive_int, required=True, help="novel classes")
    p.add_argument("--points-per-class", type=_positive_int, default=200)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--cluster-std", type=_positive_float, default=1.0)
    p.add_argument("--separation", type=_positive_float, default=8.0)
    p.add_argument("--format", choices=["bin", "csv"], default="bin")

    p = sub.add_parser("discover", help="joint or incremental novel category discovery")
    _add_common(p)
    p.add_argument("--labelled", type=Path, required=True)
    p.add_argument("--unlabelled", type=Path, required=True, help="labels in this file, if any, are used only for reporting")
    p.add_argument("--test", type=Path, help="labelled test set for the old/new/all report (incremental mode)")
    p.add_argument("--cu", type=_positive_int, required=True, help="number of novel classes")
    p.add_argument("--mode", choices=["joint", "incremental"], default="joint")
    _add_training(p)

    p = sub.add_parser("cluster", help="cluster an unlabelled set")
    _add_common(p)
    p.add_argument("--unlabelled", type=Path, required=True)
    p.add_argument("--algo", choices=["autonovel", "kmeans"], default="autonovel")
    p.add_argument("--n-init", type=_positive_int, default=10, help="k-means restarts")
    p.add_argument("--k", type=_positive_int, required=True, help="number of clusters")
    _add_training(p)

    p = sub.add_parser("estimate-k", help="estimate the number of novel classes")
    _add_common(p)
    p.add_argument("--probe", type=Path, required=True, help="labelled data holding the probe classes")
    p.add_argument("--unlabelled", type=Path, required=True)
    p.add_argument("--probe-classes", type=_positive_int, help="classes drawn into the probe set (default: half)")
    p.add_argument("--anchor-ratio", type=_unit_open, default=0.8)
    p.add_argument("--cu-max", type=_positive_int, default=100)
    p.add_argument("--tau", type=_unit_open, default=0.01)
    p.add_argument("--restarts", type=_positive_int, default=5)

    p = sub.add_parser("eval", help="score predictions or an incremental checkpoint")
    _add_common(p)
    p.add_argument("--gt", type=Path, required=True, help="dataset file with ground-truth labels")
    p.add_argument("--pred", type=Path, help="text file with one predicted cluster id per row")
    p.add_argument("--protocol", choices=["cluster", "old-new-all"], default="cluster")
    p.add_argument("--extended-checkpoint", type=Path, help="incrementally trained checkpoint")
    p.add_argument("--train-unlabelled", type=Path, help="training unlabelled set used to freeze the novel-slot mapping")
    p.add_argument("--n-labelled", type=_positive_int, help="number of known classes (default: checkpoint's)")
    p.add_argument("--rematch-on-test", action="store_true")
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string("[run]\n" + path.read_text())
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from exc
    return dict(cp["run"])


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config values as subparser defaults so explicit flags still win."""
    by_dest = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in values.items():
        dest = key.replace("-", "_")
        action = by_dest.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            truth = text.strip().lower()
            if truth not in ("1", "0", "true", "false", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[dest] = truth in ("1", "true", "yes")
            continue
        try:
            value = action.type(text) if action.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        try:
            _apply_config(sub, _read_config(args.config))
        except UsageError as exc:
            sub.error(str(exc))
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("NOVELTY_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            parser.error(f"NOVELTY_SEED must be an integer, got {env!r}")
    return parser, args


# -- helpers ----------------------------------------------------------------


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path: Path, flag: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{flag}: file {path} not found")
    return path


def _schedule(args) -> TrainSchedule:
    try:
        return TrainSchedule(
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            lr_decay=((args.lr_decay_epoch, args.lr_decay_factor),),
            momentum=args.momentum,
            labeler=LabelerConfig(LABELER_CHOICES[args.labeler], args.topk, args.cosine_tau),
            ramp=RampSchedule(args.ramp_weight, args.ramp_length),
            incremental_ce=RampSchedule(args.incremental_weight, args.incremental_length),
            aug=AugmentConfig(args.noise_std, args.dropout),
            seed=args.seed,
            use_bce=args.use_bce,
            use_mse=args.use_mse,
            threads=args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _hidden_truth(ds: EmbeddingDataset):
    if ds.labels is not None and np.all(ds.labels >= 0):
        return ds.labels
    return None


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _config_dict(args) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in ("verbose",):
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    spec = MixtureSpec(args.cl, args.cu, args.points_per_class, args.dim, args.cluster_std, args.separation, args.seed)
    outputs = []
    for name, ds in zip(("labelled", "unlabelled", "test"), synth_mixture(spec)):
        path = args.out_dir / f"{name}.{args.format}"
        save_dataset(ds, path)
        outputs.append(path)
    print(" ".join(str(p) for p in outputs))
    return [], outputs


def cmd_discover(args):
    lab_path = _require_file(args.labelled, "--labelled")
    unl_path = _require_file(args.unlabelled, "--unlabelled")
    inputs = [lab_path, unl_path]
    if args.test is not None:
        inputs.append(_require_file(args.test, "--test"))
    labelled = load_dataset(lab_path)
    unlabelled = load_dataset(unl_path)
    if labelled.labels is None or np.any(labelled.labels < 0):
        raise UsageError(f"{lab_path}: every labelled row needs a class label")
    if labelled.dim != unlabelled.dim:
        raise RuntimeError(f"dimension mismatch: {lab_path} has d={labelled.dim}, {unl_path} has d={unlabelled.dim}")
    sched = _schedule(args)
    n_labelled = int(labelled.labels.max()) + 1
    truth = _hidden_truth(unlabelled)
    features_only = unlabelled.stripped()

    log_path = args.out_dir / "train_log.jsonl"
    result = run_discovery(
        labelled, features_only, args.cu, sched, mode=args.mode, warmup_epochs=args.warmup_epochs,
        hidden=args.hidden, identity_trunk=args.identity_trunk, truth=truth, log_path=log_path,
    )

    ckpt = args.out_dir / "model.nvk"
    manifest = save_checkpoint(result.model, ckpt)
    report = {"mode": args.mode, "final": result.records[-1] if result.records else None}
    if truth is not None:
        report["acc_unlabelled"] = clustering_acc(predict_unlabelled(result.model, unlabelled.features), truth)
    if args.mode == "incremental" and args.test is not None:
        test = load_dataset(args.test)
        report.update(old_new_all_accuracy(result.model, test, n_labelled, unlabelled if truth is not None else None))
    report_path = _write_json(args.out_dir / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return inputs, [ckpt, manifest, log_path, report_path]


def cmd_cluster(args):
    path = _require_file(args.unlabelled, "--unlabelled")
    data = load_dataset(path)
    truth = _hidden_truth(data)
    outputs = []
    if args.algo == "kmeans":
        if args.k > data.n:
            raise UsageError(f"--k {args.k} exceeds the {data.n} input rows")
        assign = kmeans(data.features, args.k, seed=args.seed, n_init=args.n_init).assignments
    else:
        sched = _schedule(args)
        model = init_model(data.dim, args.hidden, 1, args.k, seed=args.seed, identity_trunk=args.identity_trunk)
        log_path = args.out_dir / "train_log.jsonl"
        result = train_clustering(data.stripped(), model, sched, truth=truth, log_path=log_path)
        assign = predict_unlabelled(result.model, data.features)
        ckpt = args.out_dir / "model.nvk"
        outputs += [ckpt, save_checkpoint(result.model, ckpt), log_path]
    assign_path = args.out_dir / "assignments.txt"
    assign_path.write_text("".join(f"{int(a)}\n" for a in assign))
    metrics = {"algo": args.algo, "clusters_used": int(np.unique(assign).size)}
    if truth is not None:
        metrics["acc"] = clustering_acc(assign, truth)
    if np.unique(assign).size >= 2:
        metrics["silhouette"] = silhouette(data.features, assign)
    metrics_path = _write_json(args.out_dir / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return [path], [assign_path, metrics_path, *outputs]


def cmd_estimate_k(args):
    probe_path = _require_file(args.probe, "--probe")
    unl_path = _require_file(args.unlabelled, "--unlabelled")
    probe = load_dataset(probe_path)
    unlabelled = load_dataset(unl_path)
    if probe.labels is None or np.any(probe.labels < 0):
        raise UsageError(f"{probe_path}: every probe row needs a class label")
    if probe.dim != unlabelled.dim:
        raise RuntimeError(f"dimension mismatch: {probe_path} has d={probe.dim}, {unl_path} has d={unlabelled.dim}")
    n_classes = len(probe.classes())
    n_probe = args.probe_classes if args.probe_classes is not None else max(1, n_classes // 2)
    split = split_probe(probe, n_probe, args.anchor_ratio, seed=args.seed)
    cfg = EstimationConfig(args.cu_max, args.tau, args.restarts, args.seed, args.threads)
    est = estimate_class_count(probe, split, unlabelled.stripped(), cfg)
    sweep_path = args.out_dir / "sweep.jsonl"
    sweep_path.write_text("".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in est.sweep))
    summary = {
        "estimate": est.estimate,
        "best_by_acc": est.best_by_acc,
        "best_by_cvi": est.best_by_cvi,
        "averaged": est.averaged,
        "surviving_clusters": est.surviving_clusters,
        "probe_split": {
            "train": list(split.train_classes),
            "anchor": list(split.anchor_probe),
            "validation": list(split.validation_probe),
        },
    }
    summary_path = _write_json(args.out_dir / "estimate.json", summary)
    print(est.estimate)
    return [probe_path, unl_path], [sweep_path, summary_path]


def _read_predictions(path: Path) -> np.ndarray:
    rows = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    try:
        return np.array([int(r) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise RuntimeError(f"{path}: predictions must be one integer per line") from exc


def cmd_eval(args):
    gt_path = _require_file(args.gt, "--gt")
    inputs = [gt_path]
    if args.protocol == "old-new-all" and args.extended_checkpoint is None:
        raise UsageError("--protocol old-new-all requires --extended-checkpoint")
    if args.protocol == "cluster" and args.pred is None:
        raise UsageError("--protocol cluster requires --pred")
    gt = load_dataset(gt_path)
    if gt.labels is None or np.any(gt.labels < 0):
        raise RuntimeError(f"{gt_path}: ground truth needs a label on every row")
    report = {"acc": None, "silhouette": None, "confusion_matrix": None, "old": None, "new": None, "all": None}
    if args.pred is not None:
        pred_path = _require_file(args.pred, "--pred")
        inputs.append(pred_path)
        pred = _read_predictions(pred_path)
        if pred.size != gt.n:
            raise RuntimeError(f"length mismatch: {pred.size} predictions in {pred_path} vs {gt.n} rows in {gt_path}")
        report["acc"] = clustering_acc(pred, gt.labels)
        report["confusion_matrix"] = confusion_matrix(pred, gt.labels)
        if np.unique(pred).size >= 2:
            report["silhouette"] = silhouette(gt.features, pred)
    if args.protocol == "old-new-all":
        ckpt_path = _require_file(args.extended_checkpoint, "--extended-checkpoint")
        inputs.append(ckpt_path)
        model = load_checkpoint(ckpt_path)
        train_u = None
        if args.train_unlabelled is not None:
            inputs.append(_require_file(args.train_unlabelled, "--train-unlabelled"))
            train_u = load_dataset(args.train_unlabelled)
        n_labelled = args.n_labelled if args.n_labelled is not None else model.n_labelled
        report.update(old_new_all_accuracy(model, gt, n_labelled, train_u, args.rematch_on_test))
    report_path = _write_json(args.out_dir / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    return inputs, [report_path]


COMMANDS = {
    "synth": cmd_synth,
    "discover": cmd_discover,
    "cluster": cmd_cluster,
    "estimate-k": cmd_estimate_k,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser, args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args)
    except UsageError as exc:
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"novelkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"novelkit {args.command}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": _config_dict(args),
        "seed": args.seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "duration_s": round(time.perf_counter() - started, 3),
        "version": __version__,
    }
    _write_json(args.out_dir / f"{args.command}.manifest.json", manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
