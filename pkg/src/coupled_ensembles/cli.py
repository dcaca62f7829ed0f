"""Command line entry point: ``ce {train,eval,fuse,count,stats,plotdata,presets}``.

Exit status: 0 on success, 1 for usage or configuration errors, 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import copy
import csv
import glob
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import BasicBlockSpec, LayoutError, count_params
from .checkpoint import read_checkpoint
from .data import default_data_dir, export_logits, labels_path, load_cifar_dir, synthetic_dataset
from .ensemble import CoupledEnsemble, CoupledEnsembleConfig, error_rate, fuse_models, fuse_predict
from .harness import NonFiniteLossError, RunLog, TrainConfig, apply_normalization, final_error, train
from .presets import PRESETS, get_preset
from .stats import KINDS, format_table, summarize, to_csv

log = logging.getLogger("coupled_ensembles")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DATASET_KEYS = {
    "synthetic": {"kind", "n_train", "n_test", "classes", "size", "difficulty", "seed", "channels"},
    "cifar10": {"kind", "root"},
    "cifar100": {"kind", "root"},
}
MODEL_KEYS = {"family", "depth", "growth", "compression", "dropout", "batchnorm"}
TRAINING_KEYS = set(TrainConfig.__dataclass_fields__) - {"ensemble"}
TOP_KEYS = {"preset", "dataset", "output_dir", "model", "branches", "branch_models", "train_fuse", "predict_fuse", "sm_variant", "training"}

DEFAULT_MODEL = {"family": "densenet_bc", "depth": 100, "growth": 12}


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(doc: dict, overrides: dict = None) -> dict:
    """Layer defaults < preset < file < flags and validate every key."""
    doc = dict(doc)
    _reject_unknown(doc, TOP_KEYS, "run config")
    base = get_preset(doc.pop("preset")) if "preset" in doc else {}
    cfg = _merge(base, doc)
    cfg = _merge(cfg, overrides or {})
    if "dataset" not in cfg:
        raise ConfigError("run config needs a 'dataset' section")
    if "output_dir" not in cfg:
        raise ConfigError("run config needs an 'output_dir'")
    ds = cfg["dataset"]
    kind = ds.get("kind")
    if kind not in DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(DATASET_KEYS)}, got {kind!r}")
    _reject_unknown(ds, DATASET_KEYS[kind], "dataset")
    cfg.setdefault("model", dict(DEFAULT_MODEL))
    _reject_unknown(cfg["model"], MODEL_KEYS, "model")
    for m in cfg.get("branch_models", []):
        _reject_unknown(m, MODEL_KEYS, "branch_models entry")
    _reject_unknown(cfg.get("training", {}), TRAINING_KEYS, "training")
    cfg.setdefault("training", {})
    return cfg


def load_datasets(ds: dict) -> tuple:
    kind = ds["kind"]
    if kind == "synthetic":
        return synthetic_dataset(
            seed=ds.get("seed", 0),
            n=ds.get("n_train", 320),
            classes=ds.get("classes", 4),
            size=ds.get("size", 16),
            difficulty=ds.get("difficulty", "easy"),
            n_test=ds.get("n_test"),
            channels=ds.get("channels", 3),
        )
    root = ds.get("root") or default_data_dir()
    if not root:
        raise ConfigError(f"dataset {kind} needs 'root' or CE_DATA_DIR")
    return load_cifar_dir(root, kind)


def build_train_config(cfg: dict, classes: int, input_shape: tuple) -> TrainConfig:
    models = cfg.get("branch_models")
    if models is None:
        e = int(cfg.get("branches", 1))
        if e < 1:
            raise ConfigError(f"branches must be >= 1, got {e}")
        models = [cfg["model"]] * e
    elif "branches" in cfg and int(cfg["branches"]) != len(models):
        raise ConfigError(f"branches={cfg['branches']} but {len(models)} branch_models given")
    try:
        specs = [BasicBlockSpec(classes=classes, input_shape=input_shape, **m) for m in models]
        ens = CoupledEnsembleConfig(
            specs,
            train_fuse=cfg.get("train_fuse", "sm"),
            predict_fuse=cfg.get("predict_fuse", "fc"),
            sm_variant=cfg.get("sm_variant", "logprob"),
        )
        return TrainConfig(ensemble=ens, **cfg["training"])
    except (LayoutError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _flag_overrides(args) -> dict:
    over = {}
    training = {}
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    if args.branches is not None:
        over["branches"] = args.branches
    if args.train_fuse is not None:
        over["train_fuse"] = args.train_fuse
    if args.sm_variant is not None:
        over["sm_variant"] = args.sm_variant
    if args.predict_fuse is not None:
        over["predict_fuse"] = args.predict_fuse
    if args.seed is not None:
        training["seed"] = args.seed
    if args.deterministic:
        training["deterministic"] = True
    if args.last_k is not None:
        training["last_k"] = args.last_k
    if args.epochs is not None:
        training["epochs"] = args.epochs
    if training:
        over["training"] = training
    return over


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.config is None and args.preset is None:
        raise UsageError("train needs --config or --preset")
    doc = _read_json(args.config) if args.config else {}
    if args.preset:
        doc = {"preset": args.preset, **doc}
    cfg = resolve_config(doc, _flag_overrides(args))
    out = Path(cfg["output_dir"])
    if (out / "checkpoint.cepw").exists() and not args.overwrite:
        raise ConfigError(f"{out} already holds a run; pass --overwrite to replace it")
    train_set, test_set = load_datasets(cfg["dataset"])
    tc = build_train_config(cfg, train_set.classes, train_set.image_shape)
    result = train(tc, train_set, test_set, out_dir=out, header_extra={"run_config": cfg})
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    rl = result.runlog
    print(f"params {result.model.params.W.size}")
    print(f"final error (last {tc.last_k}): {final_error(rl, tc.last_k):.2f}%")
    print(f"wrote {out / 'runlog.jsonl'}, {out / 'checkpoint.cepw'}")
    return EXIT_OK


def load_model(checkpoint) -> tuple:
    """Rebuild a trained model from a checkpoint and its ``model.json`` sidecar."""
    ckpt = Path(checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.cepw"
    meta_path = ckpt.with_name("model.json")
    if not meta_path.exists():
        raise ConfigError(f"missing {meta_path} next to checkpoint")
    meta = json.loads(meta_path.read_text())
    config = CoupledEnsembleConfig.from_dict(meta["ensemble"])
    model = CoupledEnsemble.build(config, seed=0, dtype=np.dtype(meta.get("dtype", "float32")))
    W, buffers = read_checkpoint(ckpt)
    model.load_params(W)
    model.load_buffers(buffers)
    return model, meta, ckpt


def cmd_eval(args) -> int:
    model, meta, ckpt = load_model(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.with_name("run_config.json")
    cfg = resolve_config(_read_json(cfg_path))
    train_set, test_set = load_datasets(cfg["dataset"])
    ds = test_set if args.split == "test" else train_set
    if ds.classes != model.config.classes:
        raise ConfigError(f"model predicts {model.config.classes} classes, dataset has {ds.classes}")
    if meta.get("normalization"):
        ds = apply_normalization(ds, meta["normalization"], model.dtype)
    mode = args.predict_fuse or model.config.predict_fuse
    if args.export_logits:
        target = Path(args.export_logits)
        if (target.exists() or labels_path(target).exists()) and not args.overwrite:
            raise ConfigError(f"{target} exists; pass --overwrite to replace it")
        scores = export_logits(model, ds, target)
    else:
        scores = model.scores(ds.images)
    pred = fuse_predict(scores, mode)
    if mode == "individual":
        for i, labels in enumerate(pred.labels):
            print(f"branch {i}: {error_rate(labels, ds.labels):.2f}%")
    else:
        print(f"{mode} error: {error_rate(pred.labels, ds.labels):.2f}%")
    return EXIT_OK


def cmd_fuse(args) -> int:
    labels = args.labels or labels_path(args.files[0])
    res = fuse_models(args.files, labels, mode=args.predict_fuse)
    print(f"fused {len(args.files)} file(s), {res.n_branches} branches, {args.predict_fuse} error: {res.error:.2f}%")
    return EXIT_OK


def cmd_count(args) -> int:
    try:
        spec = BasicBlockSpec(
            family=args.family,
            depth=args.depth,
            growth=args.growth,
            classes=args.classes,
            input_shape=tuple(args.input_shape),
            compression=args.compression,
        )
    except LayoutError as exc:
        raise ConfigError(str(exc)) from exc
    per = count_params(spec)
    print(f"per branch: {per}")
    print(f"total ({args.branches} branches): {per * args.branches}")
    return EXIT_OK


def _expand(patterns) -> list:
    paths = []
    for pat in patterns:
        matches = sorted(glob.glob(pat, recursive=True))
        paths.extend(matches if matches else ([pat] if Path(pat).is_file() else []))
    if not paths:
        raise ConfigError(f"no run logs match {' '.join(patterns)}")
    return paths


def _write_or_print(text: str, path, overwrite: bool) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    p = Path(path)
    if p.exists() and not overwrite:
        raise ConfigError(f"{p} exists; pass --overwrite to replace it")
    p.write_text(text)


def cmd_stats(args) -> int:
    logs = [RunLog.read(p) for p in _expand(args.runlogs)]
    kinds = KINDS if args.kind == "all" else (args.kind,)
    summaries = [summarize(logs, kind, args.last_k) for kind in kinds]
    print(format_table(summaries), end="")
    if args.csv:
        _write_or_print(to_csv(summaries), args.csv, args.overwrite)
    return EXIT_OK


def plot_rows(paths, k=None) -> list:
    rows = []
    for p in paths:
        rl = RunLog.read(p)
        kk = k if k is not None else rl.header["config"]["last_k"]
        rows.append(
            {
                "run": str(p),
                "params": int(rl.header["param_count"]),
                "branches": len(rl.header["config"]["ensemble"]["branches"]),
                "final_error": final_error(rl, kk),
            }
        )
    rows.sort(key=lambda r: (r["params"], r["run"]))
    return rows


def cmd_plotdata(args) -> int:
    rows = plot_rows(_expand(args.runlogs), args.last_k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["run", "params", "branches", "final_error"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_or_print(buf.getvalue(), args.out, args.overwrite)
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        p = PRESETS[name]
        m = p["model"]
        print(f"{name}: e={p['branches']} L={m['depth']} k={m['growth']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ce", description="Coupled ensemble training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--branches", type=int)
    p.add_argument("--train-fuse", choices=["fc", "sm", "ll", "none"])
    p.add_argument("--sm-variant", choices=["logprob", "prob"])
    p.add_argument("--predict-fuse", choices=["individual", "fc", "sm"])
    p.add_argument("--last-k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--config", help="run config naming the dataset (default: run_config.json beside the checkpoint)")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--predict-fuse", choices=["individual", "fc", "sm"])
    p.add_argument("--export-logits")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="fuse logit files of several models")
    p.add_argument("files", nargs="+")
    p.add_argument("--labels", help="label sidecar (default: <first file>.labels)")
    p.add_argument("--predict-fuse", choices=["fc", "sm"], default="fc")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("count", help="count trainable parameters")
    p.add_argument("--family", choices=["densenet_bc", "plain_cnn"], default="densenet_bc")
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--growth", type=int, default=12)
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--branches", type=int, default=1)
    p.add_argument("--compression", type=float, default=0.5)
    p.add_argument("--input-shape", type=int, nargs=3, default=[3, 32, 32], metavar=("C", "H", "W"))
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("stats", help="summarize repeated runs")
    p.add_argument("runlogs", nargs="+", help="run log paths or glob patterns")
    p.add_argument("--kind", choices=list(KINDS) + ["all"], default="all")
    p.add_argument("--last-k", type=int, default=10)
    p.add_argument("--csv")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("plotdata", help="CSV of (params, final error) per run")
    p.add_argument("runlogs", nargs="+")
    p.add_argument("--last-k", type=int)
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("presets", help="list shipped presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
