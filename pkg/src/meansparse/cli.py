"""Command-line entry point: ``meansparse <subcommand> [flags]``.

Every subcommand accepts ``--config file.json``; keys mirror the long flag
names (dashes become underscores) and explicit flags win over file values.
The effective configuration is written to ``manifest.json`` in ``--out``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import harness, prox
from . import sparsifier as sp
from .errors import ConfigError, DataError, MeanSparseError, NumericError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# flags that map straight onto ExperimentConfig fields
_EXPERIMENT_FLAGS = {
    "data": dict(choices=["synthetic", "cifar10"], help="dataset source"),
    "data_dir": dict(help="directory with the CIFAR-10 binary batches"),
    "subset": dict(help="stratified CIFAR-10 subset as N_TRAIN,N_TEST (e.g. 5000,1000)"),
    "n_train": dict(type=int, help="synthetic training set size"),
    "n_test": dict(type=int, help="synthetic test set size"),
    "image_size": dict(type=int, help="synthetic image side length"),
    "spread": dict(type=float, help="synthetic pixel noise level"),
    "blocks": dict(type=int, help="residual blocks in the mini-ResNet"),
    "activation": dict(help="relu, elu, gelu, silu, psilu or pssilu"),
    "precision": dict(choices=["float32", "float64"], help="floating-point precision"),
    "epochs": dict(type=int, help="training epochs"),
    "mode": dict(choices=["standard", "pgd_at", "trades"], help="training mode"),
    "alpha_grid": dict(help="comma-separated α values, must include 0"),
    "attack": dict(choices=["fgsm", "pgd", "apgd-ce"], help="evaluation attack"),
    "norm": dict(choices=["linf", "l2"], help="threat model"),
    "eps": dict(help="attack radius, rational strings allowed (8/255)"),
    "steps": dict(type=int, help="attack iterations"),
    "step_size": dict(type=float, help="attack step size"),
    "restarts": dict(type=int, help="attack restarts"),
    "loss": dict(choices=["ce", "dlr"], help="attack loss"),
    "n_eval": dict(type=int, help="evaluate on the first N test samples only"),
    "placement": dict(help="all, main, after, single:<i> or cumulative:<i>"),
    "centering": dict(choices=["channel", "zero", "global"], help="sparsifier center"),
    "calib_fraction": dict(type=float, help="fraction of training data used for calibration"),
    "max_clean_drop": dict(type=float, help="allowed clean-accuracy drop in points for α selection"),
    "checkpoint": dict(help="model checkpoint to load (or to write after training)"),
    "checkpoint_dir": dict(help="directory of per-variant checkpoints for ablations"),
    "batch_size": dict(type=int, help="evaluation batch size"),
}


def _add_common(p, experiment=True):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="run directory (default runs/<subcommand>)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 gives bit-reproducible runs")
    if experiment:
        for name, kw in _EXPERIMENT_FLAGS.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)
        p.add_argument("--synthetic", action="store_true", default=None,
                       help="shorthand for --data synthetic")
        p.add_argument("--no-train", dest="no_train", action="store_true", default=None,
                       help="fail instead of training when a checkpoint is missing")


def build_parser():
    parser = argparse.ArgumentParser(prog="meansparse",
                                     description="MeanSparse robustness laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base model and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("calibrate", help="compute per-channel statistics for a checkpoint")
    _add_common(p)

    p = sub.add_parser("attack", help="clean and robust accuracy at one α")
    _add_common(p)
    p.add_argument("--alpha", type=float, default=0.0, help="sparsifier scale (0 = base model)")
    p.add_argument("--states", help="calibration file from the calibrate subcommand")

    p = sub.add_parser("sweep", help="α sweep with threshold selection")
    _add_common(p)

    p = sub.add_parser("select", help="pick α from an existing report.csv")
    _add_common(p, experiment=False)
    p.add_argument("--report", required=True, help="path to report.csv")
    p.add_argument("--max-clean-drop", dest="max_clean_drop", type=float, default=0.1)
    p.add_argument("--attack", default=None, help="attack label to select on")

    p = sub.add_parser("ablate", help="run one ablation study")
    _add_common(p)
    p.add_argument("kind", help="activation, threat_norm, at_method, centering, attack_power or placement")

    p = sub.add_parser("proxdemo", help="penalty-method solver on a toy problem")
    _add_common(p, experiment=False)
    p.add_argument("--problem", choices=["quadratic", "identity", "two_layer"], default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--lambda0", type=float, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--step", type=float, default=None)

    p = sub.add_parser("report", help="print a run directory's report as a table")
    _add_common(p, experiment=False)
    p.add_argument("run_dir", help="directory containing report.csv")
    return parser


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fp:
            cfg = json.load(fp)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _experiment_config(args):
    d = _load_config(args.config)
    train = dict(d.pop("train", {}) or {})
    for name in list(_EXPERIMENT_FLAGS) + ["seed", "no_train"]:
        val = getattr(args, name, None)
        if val is not None:
            d[name] = val
    if getattr(args, "synthetic", None):
        d["data"] = "synthetic"
    for key in ("epochs", "mode"):
        if key in d:
            train[key] = d.pop(key)
    if isinstance(d.get("subset"), str):
        try:
            d["subset"] = [int(v) for v in d["subset"].split(",")]
        except ValueError:
            raise ConfigError(f"bad --subset {d['subset']!r}; use N_TRAIN,N_TEST") from None
    base = harness.ExperimentConfig().train
    if "epochs" in train and "decay_epochs" not in train:
        e = train["epochs"]
        train["decay_epochs"] = [max(1, e // 2), max(1, (5 * e) // 6)]
    d["train"] = {**base, **train}
    try:
        return harness.ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@contextlib.contextmanager
def _thread_limit(n):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _out_dir(args):
    return args.out or os.path.join("runs", args.command)


def _write_manifest(out, config, extra=None):
    os.makedirs(out, exist_ok=True)
    manifest = harness.build_manifest(config, extra)
    with open(os.path.join(out, "manifest.json"), "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -------------------------------------------------------------- subcommands
def cmd_train(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    if not cfg.checkpoint:
        cfg.checkpoint = os.path.join(out, "model.ckpt")
    splits = harness.load_data(cfg)
    model = harness.trained_model(cfg, splits, log=_log, out_dir=out)
    _write_manifest(out, cfg.to_json(), {"model_id": harness.model_id(model)})
    print(f"checkpoint {cfg.checkpoint} model_id {harness.model_id(model)}")


def _model_and_data(cfg, out):
    splits = harness.load_data(cfg)
    model = harness.trained_model(cfg, splits, log=_log, out_dir=out)
    return model, splits


def cmd_calibrate(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    model, splits = _model_and_data(cfg, out)
    states = sp.calibrate(model, range(model.num_sites), splits.train, fraction=cfg.calib_fraction,
                          seed=cfg.seed)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "states.mssp")
    sp.save_states(path, states)
    _write_manifest(out, cfg.to_json(), {"model_id": harness.model_id(model), "sites": len(states)})
    print(f"wrote {len(states)} site statistics to {path}")


def cmd_attack(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    model, splits = _model_and_data(cfg, out)
    if args.alpha < 0:
        raise ConfigError("--alpha must be nonnegative")
    if args.alpha > 0:
        states = (sp.load_states(args.states) if args.states else
                  sp.calibrate(model, range(model.num_sites), splits.train,
                               fraction=cfg.calib_fraction, seed=cfg.seed))
        sp.attach(model, cfg.placement, args.alpha, states, cfg.centering)
    test = harness.eval_subset(cfg, splits)
    spec = cfg.attack_spec()
    from .attacks import evaluate_robust

    res = evaluate_robust(model, test.images, test.labels, spec, attack=cfg.attack,
                          batch_size=cfg.batch_size)
    result = {"alpha": args.alpha, "attack": cfg.attack, "norm": spec.norm, "epsilon": spec.epsilon,
              "clean_acc": res.clean_acc, "robust_acc": res.robust_acc, "n": len(test)}
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "result.json"), "w") as fp:
        json.dump(result, fp, indent=2, sort_keys=True)
    _write_manifest(out, {**cfg.to_json(), "alpha": args.alpha}, {"model_id": harness.model_id(model)})
    print(f"clean_acc={res.clean_acc!r} robust_acc={res.robust_acc!r}")


def cmd_sweep(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    if not cfg.checkpoint and not cfg.no_train:
        cfg.checkpoint = os.path.join(out, "model.ckpt")
    report = harness.run_sweep(cfg, out, log=_log)
    print(report.to_csv(), end="")
    print(f"selected_alpha={report.selected_alpha!r}")


def cmd_select(args):
    try:
        with open(args.report) as fp:
            report = harness.EvalReport.from_csv(fp.read())
    except OSError as exc:
        raise DataError(f"cannot read {args.report}: {exc}") from None
    alpha = harness.select_alpha(report, args.max_clean_drop, attack=args.attack)
    print(f"selected_alpha={alpha!r}")


def cmd_ablate(args):
    cfg = _experiment_config(args)
    out = args.out or os.path.join("runs", f"ablate-{args.kind}")
    if not cfg.checkpoint_dir:
        cfg.checkpoint_dir = os.path.join(out, "checkpoints")
    report = harness.run_ablation(args.kind, cfg, out, log=_log)
    print(report.to_csv(), end="")


def cmd_proxdemo(args):
    d = _load_config(args.config)
    for key in ("problem", "gamma", "lambda0", "decay", "iters", "step", "seed"):
        val = getattr(args, key)
        if val is not None:
            d[key] = val
    problem = d.get("problem", "quadratic")
    iters, step = int(d.get("iters", 200)), float(d.get("step", 1.0))
    kw = {k: d[k] for k in ("gamma", "lambda0", "decay") if k in d}
    if problem == "quadratic":
        p = prox.quadratic_problem(seed=d.get("seed", 0), **kw)
    elif problem == "two_layer":
        p = prox.two_layer_problem(seed=d.get("seed", 0), **kw)
    else:
        p = prox.identity_problem(np.random.default_rng(d.get("seed", 0)).normal(0, 2, 10), **kw)
    res = prox.penalty_solve(p, iters, step)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    text = prox.trace_to_csv(res.trace)
    with open(os.path.join(out, "trace.csv"), "w") as fp:
        fp.write(text)
    _write_manifest(out, {"problem": problem, "iters": iters, "step": step, **kw})
    print(text, end="")


def cmd_report(args):
    path = os.path.join(args.run_dir, "report.csv")
    try:
        with open(path) as fp:
            report = harness.EvalReport.from_csv(fp.read())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    header = f"{'variant':<14} {'attack':<8} {'eps':>8} {'alpha':>6} {'clean':>7} {'robust':>7}"
    print(header)
    print("-" * len(header))
    for r in report.rows:
        if r["status"] != "ok":
            print(f"{r['variant']:<14} {r['attack']:<8} {harness.eps_label(r['epsilon']):>8} "
                  f"{r['alpha']:>6.2f} {r['status']}")
            continue
        print(f"{r['variant']:<14} {r['attack']:<8} {harness.eps_label(r['epsilon']):>8} "
              f"{r['alpha']:>6.2f} {100 * r['clean_acc']:>7.2f} {100 * r['robust_acc']:>7.2f}")
    manifest = os.path.join(args.run_dir, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as fp:
            sel = json.load(fp).get("selected_alpha")
        if sel is not None:
            print(f"selected_alpha={sel!r}")


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "attack": cmd_attack, "sweep": cmd_sweep,
            "select": cmd_select, "ablate": cmd_ablate, "proxdemo": cmd_proxdemo, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MeanSparseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
