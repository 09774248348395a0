"""Command line front end: gen-data, train, predict, fit-ensemble, evaluate, render.

Exit codes: 0 success, 1 configuration or shape problem, 2 missing file,
3 malformed file, 4 numeric failure.
"""

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import conditional as cond
from .ensemble import EnsembleDesign, WeightedEnsemble, combine, fit_weights, read_weights, write_weights
from .errors import ConfigurationError, FormatError, NowcastError
from .forecaster import (
    CKPT_MAGIC,
    ForecasterSpec,
    PersistenceModel,
    TrainConfig,
    build,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .griddata import GeneratorConfig, GridSequence, generate_synthetic, load_dataset, read_gridseq, save_dataset, write_gridseq
from .kvconfig import check_keys, read_kv, to_bool, to_list, write_kv
from .metrics import compare_table, evaluate, evaluate_predictions, render_strip, write_report
from .optim import Optimizer, OptimizerConfig

# run configuration -------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None,
    "seed": "0",
    "model.variant": "shallow",
    "model.channels": "32,48,64,80",
    "model.gate_type": "residual",
    "model.targets": "",
    "optimizer.method": "adabelief",
    "optimizer.lr": "0.001",
    "optimizer.eps": "",
    "optimizer.weight_decay": "0.0",
    "optimizer.beta1": "0.9",
    "optimizer.beta2": "0.999",
    "train.epochs": "20",
    "train.batch_size": "8",
    "train.augment": "true",
    "train.clip": "0.0",
    "train.lr_schedule": "constant",
    "train.patience": "3",
    "init": "",
    "conditional.enabled": "false",
    "conditional.variable": "crr_intensity",
    "conditional.threshold": "auto",
    "conditional.mode": "from_scratch",
    "conditional.base": "",
}


def resolve_train_config(raw, overrides=None):
    cfg = dict(TRAIN_DEFAULTS)
    check_keys(raw, TRAIN_DEFAULTS, "run config")
    cfg.update(raw)
    cfg.update(overrides or {})
    if not cfg["data"]:
        raise ConfigurationError("run config: 'data' (dataset directory) is required")
    return cfg


def _spec_from(cfg, dataset):
    first = dataset.samples[0]
    t_in, h, w, _ = first.input.shape
    channels = tuple(to_list(cfg["model.channels"], int))
    variant = cfg["model.variant"]
    if variant not in ("deep", "shallow"):
        raise ConfigurationError(f"model.variant must be deep or shallow, got {variant!r}")
    spec = ForecasterSpec(
        levels=len(channels),
        channels=channels,
        gate_type=cfg["model.gate_type"],
        t_in=t_in,
        t_out=first.target.shape[0],
        height=h,
        width=w,
        inputs=dataset.variable_names,
        targets=tuple(to_list(cfg["model.targets"])) or dataset.variable_names,
    )
    return spec.shallow() if variant == "shallow" else spec


def _optimizer_cfg(cfg):
    return OptimizerConfig(
        method=cfg["optimizer.method"],
        lr=float(cfg["optimizer.lr"]),
        beta1=float(cfg["optimizer.beta1"]),
        beta2=float(cfg["optimizer.beta2"]),
        eps=float(cfg["optimizer.eps"]) if cfg["optimizer.eps"] else None,
        weight_decay=float(cfg["optimizer.weight_decay"]),
    )


def _train_cfg(cfg):
    m = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    m["seed"] = cfg["seed"]
    return TrainConfig.from_mapping(m)


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CKPT_MAGIC:
        return load_checkpoint(path)
    if magic == cond.COND_MAGIC:
        return cond.load_conditional(path)
    raise FormatError(f"{path}: not a forecaster or conditional checkpoint", field="magic")


def _write_log(path, history):
    keys = ["epoch", "step", "lr", "train_loss", "val_mse"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for e in history:
            fh.write("\t".join(repr(e[k]) if k in e else "" for k in keys) + "\n")


def run_train(cfg, out):
    dataset = load_dataset(cfg["data"])
    if not dataset.count("train"):
        raise ConfigurationError("dataset has no training samples")
    spec = _spec_from(cfg, dataset)
    opt_cfg = _optimizer_cfg(cfg)
    train_cfg = _train_cfg(cfg)
    seed = int(cfg["seed"])
    cfg["optimizer.eps"] = repr(opt_cfg.eps)
    os.makedirs(out, exist_ok=True)
    val = dataset.arrays("validation") if dataset.count("validation") else None

    if to_bool(cfg["conditional.enabled"], "conditional.enabled"):
        var = cfg["conditional.variable"]
        tau = cfg["conditional.threshold"]
        if tau == "auto":
            tau = cond.calibrate_threshold(dataset, var)
        elif tau == "real-data":
            tau = cond.REAL_DATA_THRESHOLD
        tau = float(tau)
        cfg["conditional.threshold"] = repr(tau)
        base = _load_model(cfg["conditional.base"]) if cfg["conditional.base"] else None
        cf = cond.train_conditional(dataset, cfg["conditional.mode"], tau, var, train_cfg, opt_cfg,
                                    base=base, spec=spec, seed=seed)
        cond.save_conditional(os.path.join(out, "model.ckpt"), cf)
        for branch, hist in cf.training_log["history"].items():
            _write_log(os.path.join(out, f"loss_{branch}.tsv"), hist)
        counts = cf.training_log["counts"]
        summary = f"conditional threshold {tau:.6g}: dry {counts['dry']} samples, wet {counts['wet']} samples"
    else:
        if cfg["init"]:
            model = _load_model(cfg["init"])
            if model.spec != spec:
                raise ConfigurationError("init checkpoint does not match the configured model")
        else:
            model = build(spec, seed)
        x, y = dataset.arrays("train")
        hist = fit(model, (x, y), Optimizer(opt_cfg), train_cfg, val)
        save_checkpoint(os.path.join(out, "model.ckpt"), model)
        _write_log(os.path.join(out, "loss.tsv"), hist)
        last = hist[-1] if hist else {}
        summary = f"trained {model.parameter_count()} parameters; final " + ", ".join(
            f"{k} {last[k]:.6g}" for k in ("train_loss", "val_mse") if k in last
        )
    write_kv(os.path.join(out, "resolved.cfg"), cfg)
    return summary


# predictions on disk ------------------------------------------------------------------

PRED_MANIFEST = "predictions.txt"


def save_predictions(root, preds, split, source):
    os.makedirs(root, exist_ok=True)
    for i, p in enumerate(preds):
        write_gridseq(os.path.join(root, f"{i:06d}.gsq"), p)
    write_kv(os.path.join(root, PRED_MANIFEST), {
        "variables": list(preds[0].variable_names) if preds else [],
        "split": split,
        "count": len(preds),
        "source": source,
    })


def load_predictions(root):
    manifest_path = os.path.join(root, PRED_MANIFEST)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    m = read_kv(manifest_path)
    names = tuple(to_list(m.get("variables", "")))
    return [read_gridseq(os.path.join(root, f"{i:06d}.gsq"), names) for i in range(int(m["count"]))], m


def _predict_all(model, dataset, split, batch_size=16):
    samples = dataset.split(split)
    if not samples:
        raise ConfigurationError(f"split {split!r} is empty")
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        y = model.predict_batch(np.stack([s.input.frames for s in chunk]))
        out.extend(GridSequence(f, tuple(model.targets), s.input.step_minutes) for f, s in zip(y, chunk))
    return out


def _persistence_for(dataset):
    names = dataset.variable_names
    return PersistenceModel(dataset.samples[0].target.shape[0], names, names)


def _model_from_args(args, dataset):
    if args.persistence:
        return _persistence_for(dataset), "persistence"
    if args.members:
        members = [_load_model(p) for p in args.members]
        if not args.weights:
            raise ConfigurationError("--members needs --weights")
        return WeightedEnsemble(members, read_weights(args.weights)), "ensemble"
    if args.checkpoint:
        return _load_model(args.checkpoint), os.path.basename(args.checkpoint)
    raise ConfigurationError("give --checkpoint, --members with --weights, or --persistence")


# subcommands --------------------------------------------------------------------------


def cmd_gen_data(args):
    raw = read_kv(args.config) if args.config else {}
    for f in fields(GeneratorConfig):
        value = getattr(args, f"gen_{f.name}")
        if value is not None:
            raw[f.name] = value
    cfg = GeneratorConfig.from_mapping(raw)
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    write_kv(os.path.join(args.out, "resolved.cfg"), cfg.to_mapping())
    counts = ", ".join(f"{s} {dataset.count(s)}" for s in ("train", "validation", "test"))
    return f"wrote {len(dataset)} samples ({counts}) to {args.out}"


def cmd_train(args):
    raw = read_kv(args.config) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.data:
        overrides["data"] = args.data
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    check_keys(overrides, TRAIN_DEFAULTS, "--set")
    cfg = resolve_train_config(raw, overrides)
    return run_train(cfg, args.out)


def cmd_predict(args):
    dataset = load_dataset(args.data)
    model, source = _model_from_args(args, dataset)
    preds = _predict_all(model, dataset, args.split)
    save_predictions(args.out, preds, args.split, source)
    return f"wrote {len(preds)} predictions to {args.out}"


def cmd_fit_ensemble(args):
    dataset = load_dataset(args.data)
    truth = dataset.split(args.split)
    members = [load_predictions(p)[0] for p in args.member]
    for m in members:
        if len(m) != len(truth):
            raise ConfigurationError(f"member has {len(m)} predictions, split has {len(truth)} samples")
    design = EnsembleDesign(len(members))
    for i, s in enumerate(truth):
        names = members[0][i].variable_names
        idx = [s.target.channel_index(v) for v in names]
        y = s.target.frames[..., idx]
        preds = [m[i].frames for m in members]
        if args.variable:
            c = names.index(args.variable) if args.variable in names else None
            if c is None:
                raise ConfigurationError(f"variable {args.variable!r} not predicted by the members")
            y, preds = y[..., c], [p[..., c] for p in preds]
        design.accumulate(preds, y)
    lam = None if args.lam is None else float(args.lam)
    wv = fit_weights(design, args.method, lam, names=list(args.member))
    write_weights(args.out, wv)
    return f"{args.method} weights " + " ".join(f"{w:.6g}" for w in wv.w) + f" (sum {wv.total:.6g})"


def cmd_evaluate(args):
    dataset = load_dataset(args.data)
    reports = []
    for path in args.pred or []:
        preds, m = load_predictions(path)
        reports.append(evaluate_predictions(preds, dataset, args.split, name=os.path.basename(os.path.normpath(path))))
    for path in args.checkpoint or []:
        reports.append(evaluate(_load_model(path), dataset, args.split, name=os.path.basename(path)))
    if args.persistence:
        reports.append(evaluate(_persistence_for(dataset), dataset, args.split, name="persistence"))
    if not reports:
        raise ConfigurationError("nothing to evaluate: give --pred, --checkpoint or --persistence")
    table = compare_table(reports)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for r in reports:
            write_report(os.path.join(args.out, f"{r.name}.report.txt"), r)
        with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
    return table.rstrip("\n")


def cmd_render(args):
    dataset = load_dataset(args.data)
    samples = dataset.split(args.split)
    if not 0 <= args.index < len(samples):
        raise ConfigurationError(f"index {args.index} out of range for {len(samples)} samples")
    sample = samples[args.index]
    preds, _ = load_predictions(args.pred)
    pred = preds[args.index]
    var = args.variable or pred.variable_names[0]
    c_in = sample.input.channel_index(var)
    c_pred = pred.channel_index(var)
    pred_frames = np.zeros(sample.target.shape, dtype=np.float32)
    pred_frames[..., c_in] = pred.frames[..., c_pred]
    contour = c_in if args.contour else None
    render_strip(sample.input, sample.target, pred_frames, args.out, channel=c_in, contour_channel=contour,
                 contour_level=args.contour_level, scale=args.scale)
    return f"wrote {args.out}"


def build_parser():
    p = argparse.ArgumentParser(prog="nowcast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic advection dataset")
    g.add_argument("--config", help="generator key=value file")
    g.add_argument("--out", required=True, help="dataset directory to create")
    for f in fields(GeneratorConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"gen_{f.name}", default=None,
                       metavar=f.name.upper(), help=f"override {f.name} (default {f.default!r})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a forecaster or a conditional forecaster")
    t.add_argument("--config", help="run key=value file")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--seed", type=int, help="initialization and shuffling seed")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    t.add_argument("--out", required=True, help="run directory for model.ckpt, loss log and resolved.cfg")
    t.set_defaults(func=cmd_train)

    def model_args(q):
        q.add_argument("--checkpoint", help="forecaster or conditional checkpoint")
        q.add_argument("--members", nargs="+", help="member checkpoints of a weighted ensemble")
        q.add_argument("--weights", help="weights file for --members (equal weights if absent)")
        q.add_argument("--persistence", action="store_true", help="repeat the last input frame")

    pr = sub.add_parser("predict", help="write GSQ1 predictions for one split")
    model_args(pr)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="validation")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    fe = sub.add_parser("fit-ensemble", help="fit ensemble weights on stored member predictions")
    fe.add_argument("--member", action="append", required=True, help="prediction directory; repeatable")
    fe.add_argument("--data", required=True)
    fe.add_argument("--split", default="validation")
    fe.add_argument("--method", choices=("equal", "ridge", "constrained"), default="ridge")
    fe.add_argument("--lambda", dest="lam", help="ridge strength (default 1e-4 x mean Gram diagonal)")
    fe.add_argument("--variable", help="fit on one variable only (default: all, pooled)")
    fe.add_argument("--out", required=True)
    fe.set_defaults(func=cmd_fit_ensemble)

    ev = sub.add_parser("evaluate", help="per-variable MSE reports and a comparison table")
    ev.add_argument("--pred", action="append", help="prediction directory; repeatable")
    ev.add_argument("--checkpoint", action="append", help="checkpoint to run and score; repeatable")
    ev.add_argument("--persistence", action="store_true", help="add the persistence baseline")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="validation")
    ev.add_argument("--out", help="directory for <name>.report.txt and table.txt")
    ev.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="render a truth/prediction strip as PGM")
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="validation")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--pred", required=True, help="prediction directory")
    r.add_argument("--variable", help="variable to draw (default: first)")
    r.add_argument("--contour", action="store_true", help="overlay the contour-level isoline on every panel")
    r.add_argument("--contour-level", type=float, default=0.5)
    r.add_argument("--scale", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        message = args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NowcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
