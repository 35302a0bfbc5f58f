"""``beamgnn`` command line: gen-data, train, finetune, eval, verify, report.

Every subcommand resolves a JSON config (``--config``) plus flat dotted
overrides (``--set train.lr=1e-3``; dedicated flags are shorthands for the
same keys), prints the effective config, and writes it next to its outputs.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import BeamGnnError, ConfigMismatch, InvalidParams

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
FAILURE_BUDGET = 0.05

log = logging.getLogger("beamgnn")


class ConfigError(Exception):
    pass


# -- config resolution ----------------------------------------------------------

def _defaults():
    from .gnn import ModelConfig
    from .trainer import TrainConfig
    return {
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "dataset": None,
        "out": None,
        "workers": os.cpu_count() or 1,
        "deterministic": False,
    }


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _set_dotted(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(base, extra, prefix=""):
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def resolve_config(args, shorthands):
    cfg = _defaults()
    if getattr(args, "config", None):
        try:
            _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for key, attr in shorthands.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set_dotted(cfg, key, v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k.strip(), _parse_value(v))
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True
    cfg["train"]["deterministic"] = bool(cfg["deterministic"])
    for key in ("dataset", "out"):
        if cfg[key] is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def _dump(cfg, out=None):
    text = json.dumps(cfg, indent=1, sort_keys=True)
    print("effective config:\n" + text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "effective_config.json").write_text(text + "\n")


def _model_cfg(cfg, ds=None):
    from .gnn import ModelConfig
    m = dict(cfg["model"])
    if ds is not None:
        m["in_dim"] = ds.task.feature_width
    try:
        return ModelConfig.from_dict(m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def _train_cfg(cfg, mode):
    from .trainer import TrainConfig
    t = dict(cfg["train"], mode=mode)
    try:
        return TrainConfig.from_dict(t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def _need(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _threads(cfg):
    if not cfg["deterministic"]:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args):
    from .dataset import DatasetSpec, generate, preset
    try:
        if args.spec:
            spec = DatasetSpec.from_dict(json.loads(Path(args.spec).read_text()))
        elif args.preset:
            res = tuple(int(v) for v in args.resolution.split(",")) if args.resolution else (4, 2)
            spec = preset(args.preset, n_samples=args.n or 150, seed=args.seed or 0, resolution=res)
        else:
            raise ConfigError("gen-data needs --spec or --preset")
        spec.validate()
    except InvalidParams as exc:
        raise ConfigError(f"invalid dataset spec: {exc}") from None
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid dataset spec: {exc}") from None
    workers = 1 if args.deterministic else (args.workers or os.cpu_count() or 1)
    print("effective spec:\n" + json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    summary = generate(spec, args.out, workers=workers)
    print(json.dumps(summary, indent=1, sort_keys=True))
    if summary["failures"] > FAILURE_BUDGET * spec.n_samples:
        print(f"error: {summary['failures']} solve failures exceed the "
              f"{FAILURE_BUDGET:.0%} budget of {spec.n_samples} samples", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


TRAIN_FLAGS = {"model.arch": "arch", "model.hidden": "hidden", "model.layers": "layers",
               "model.activation": "activation", "train.seed": "seed", "train.epochs": "epochs",
               "train.lr": "lr", "train.batch": "batch", "dataset": "dataset", "out": "out"}


def cmd_train(args):
    from .dataset import load
    from .trainer import naive_joint, pretrain
    cfg = resolve_config(args, TRAIN_FLAGS)
    if args.layers is not None and args.heads is None:
        cfg["model"]["heads"] = ([4] * (args.layers - 1) + [1])[:args.layers]
    if args.heads is not None:
        cfg["model"]["heads"] = [int(h) for h in args.heads.split(",")]
    ds = load(_need(cfg, "dataset"))
    out = _need(cfg, "out")
    mcfg = _model_cfg(cfg, ds)
    cfg["model"] = mcfg.to_dict()
    tcfg = _train_cfg(cfg, args.mode)
    _dump(cfg, out)
    with _threads(cfg):
        if args.mode == "naive_joint":
            hist = naive_joint(mcfg, ds, tcfg, out_dir=out)
            print(f"naive joint run: {len(hist)} epochs, final val loss {hist.rows[-1]['val_loss']:.4e}")
        else:
            ckpt, hist = pretrain(mcfg, ds, tcfg, out_dir=out)
            print(f"best epoch {ckpt.meta['epoch']}: val rel-L2 {ckpt.meta['val_rel_l2']:.3f}%")
    return EXIT_OK


FINETUNE_FLAGS = {"train.seed": "seed", "train.epochs": "epochs", "train.lr": "lr",
                  "train.alpha_target": "alpha", "dataset": "dataset", "out": "out"}


def cmd_finetune(args):
    from .dataset import load, stats_of
    from .trainer import finetune, load_checkpoint
    cfg = resolve_config(args, FINETUNE_FLAGS)
    ds = load(_need(cfg, "dataset"))
    out = _need(cfg, "out")
    ckpt = load_checkpoint(args.source, expect_norm_hash=stats_of(ds).hash())
    cfg["model"] = ckpt.model_cfg.to_dict()
    if not args.pinn:
        cfg["train"]["alpha_target"] = 0.0
    tcfg = _train_cfg(cfg, "finetune")
    _dump(cfg, out)
    with _threads(cfg):
        best, hist = finetune(ckpt, ds, tcfg, out_dir=out)
    print(f"best epoch {best.meta['epoch']}: val rel-L2 {best.meta['val_rel_l2']:.3f}%")
    return EXIT_OK


def cmd_eval(args):
    from .dataset import load, stats_of
    from .evaluator import build_report, evaluate
    from .trainer import TrainHistory, load_checkpoint
    cfg = resolve_config(args, {"dataset": "dataset", "out": "out"})
    ds = load(_need(cfg, "dataset"))
    out = Path(_need(cfg, "out"))
    _dump(cfg, out)
    rows, histories = [], {}
    for path in args.ckpt:
        ckpt = load_checkpoint(path, expect_norm_hash=stats_of(ds).hash())
        with _threads(cfg):
            m = evaluate(ckpt, ds, repeats=args.repeats)
        label = args.label[len(rows)] if args.label and len(args.label) > len(rows) else Path(path).parent.name
        rows.append({"model": label, "task": ds.task.name.lower(), "metrics": m})
        hist = Path(path).with_name("history.csv")
        if hist.exists():
            histories.setdefault("loss_curves", {})[label] = TrainHistory.read_csv(hist)
    build_report(rows, out, histories or None)
    (out / "rows.json").write_text(json.dumps(
        [{"model": r["model"], "task": r["task"], **vars(r["metrics"])} for r in rows], indent=1) + "\n")
    print((out / "report.md").read_text())
    return EXIT_OK


def cmd_report(args):
    from .evaluator import EvalMetrics, build_report
    from .trainer import TrainHistory
    rows = []
    if args.rows:
        for r in json.loads(Path(args.rows).read_text()):
            r = dict(r)
            model, task = r.pop("model"), r.pop("task")
            rows.append({"model": model, "task": task, "metrics": EvalMetrics(**r)})
    histories = {}
    for item in args.history or []:
        if "=" not in item:
            raise ConfigError(f"--history expects label=path, got {item!r}")
        label, path = item.split("=", 1)
        histories.setdefault(args.plot_name, {})[label] = TrainHistory.read_csv(path)
    build_report(rows, args.out, histories or None)
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_verify(args):
    from .verification import run
    results = run(args.level)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracles passed")
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser -----------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("--workers", type=int, help="worker processes (default: number of cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="beamgnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an FEA dataset")
    _common(p)
    p.add_argument("--spec", help="dataset spec JSON")
    p.add_argument("--preset", help="generalist-low | specialist-low | specialist-high")
    p.add_argument("--n", type=int, help="sample count for --preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", help="n_len,n_cross (default 4,2)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="pre-train (or naive joint run) from scratch")
    _common(p)
    p.add_argument("--arch", choices=("gcn", "gat", "mpnn", "transformer"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", help="comma-separated heads per layer")
    p.add_argument("--activation", choices=("relu", "silu"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--mode", choices=("pretrain", "naive_joint"), default="pretrain")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="continue a checkpoint with the physics loss")
    _common(p)
    p.add_argument("--from", dest="source", required=True, help="source checkpoint")
    p.add_argument("--pinn", action="store_true", help="enable the ramped residual loss")
    p.add_argument("--alpha", type=float, help="target residual weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _common(p)
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--label", action="append", help="row label per --ckpt")
    p.add_argument("--repeats", type=int, default=100, help="timed forwards per model")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical oracles")
    p.add_argument("--level", choices=("unit", "fea", "autodiff", "all"), default="all")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="rebuild report tables and plots")
    p.add_argument("--rows", help="rows.json written by eval")
    p.add_argument("--history", action="append", metavar="LABEL=CSV")
    p.add_argument("--plot-name", default="loss_curves")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ConfigMismatch, InvalidParams) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BeamGnnError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
