"""Experiment drivers: α sweeps, threshold selection and the ablation suite.

A run directory holds ``report.csv`` (deterministic given the seed),
``timings.csv`` (wall-clock per row, kept apart so the report stays
byte-stable), ``plotdata.csv`` and ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import subprocess
import warnings
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import __version__, _kernels
from . import sparsifier as sp
from .attacks import AttackSpec, evaluate_robust
from .data import load_cifar10, synth_splits
from .errors import ConfigError, DataError, MeanSparseError
from .model import MiniResNet, load_checkpoint, save_checkpoint
from .tensor import set_default_dtype
from .trainer import TrainConfig, history_to_csv, train

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(11))
REPORT_FIELDS = ("variant", "alpha", "placement", "centering", "attack", "norm", "epsilon",
                 "steps", "clean_acc", "robust_acc", "seed", "model_id", "status", "base")
PLOT_FIELDS = ("variant", "attack", "epsilon", "alpha", "clean_acc", "robust_acc")
ABLATIONS = ("activation", "threat_norm", "at_method", "centering", "attack_power", "placement")


def parse_grid(text):
    """'0,0.1,0.2' or a list → sorted tuple of floats (fractions allowed)."""
    if isinstance(text, str):
        items = [t for t in text.replace(" ", "").split(",") if t]
    else:
        items = list(text)
    try:
        vals = sorted({float(Fraction(str(v))) for v in items})
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse grid {text!r}") from None
    if not vals or vals[0] < 0:
        raise ConfigError("grid values must be nonnegative")
    return tuple(vals)


def eps_label(eps):
    f = Fraction(eps).limit_denominator(1000)
    return f"{f.numerator}/{f.denominator}" if abs(float(f) - eps) < 1e-12 else repr(eps)


def model_id(model):
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:12]


# ------------------------------------------------------------------- reports
@dataclass
class SweepPlan:
    alphas: tuple = DEFAULT_GRID
    attacks: list = field(default_factory=lambda: [("pgd", AttackSpec(steps=20))])
    placement: str = "all"
    centering: str = "channel"
    split: str = "test"
    seed: int = 0
    calib_fraction: float = 1.0
    batch_size: int = 256
    variant: str = "base"

    def __post_init__(self):
        self.alphas = parse_grid(self.alphas)
        if self.alphas[0] != 0:
            raise ConfigError("the α grid must contain 0 (the base model row)")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    selected_alpha: float = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, timings=False):
        fields = REPORT_FIELDS + (("eval_seconds",) if timings else ())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row.get(k)) for k in fields})
        return buf.getvalue()

    def plot_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=PLOT_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in sorted(self.rows, key=lambda r: (r["variant"], r["attack"], r["epsilon"], r["alpha"])):
            if row["status"] == "ok":
                w.writerow({k: _fmt(row[k]) for k in PLOT_FIELDS})
        return buf.getvalue()

    def save(self, out_dir, config=None):
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "report.csv"), self.to_csv())
        _write(os.path.join(out_dir, "timings.csv"), _timings_csv(self.rows))
        _write(os.path.join(out_dir, "plotdata.csv"), self.plot_csv())
        manifest = build_manifest(config or {}, self.meta)
        manifest["selected_alpha"] = self.selected_alpha
        _write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, text):
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            for k in ("alpha", "epsilon", "clean_acc", "robust_acc"):
                r[k] = float(r[k]) if r[k] not in ("", None) else float("nan")
            r["steps"] = int(r["steps"])
            r["seed"] = int(r["seed"])
            r["base"] = r["base"] == "True"
            rows.append(r)
        return cls(rows)

    @classmethod
    def from_table(cls, alphas, clean, robust, attack="apgd-ce", variant="base"):
        """Build a report from accuracy columns given in percent (e.g. a results table)."""
        rows = [make_row(variant, a, "all", "channel", attack, AttackSpec(), c / 100.0, r / 100.0,
                         0, "table") for a, c, r in zip(alphas, clean, robust)]
        return cls(rows)

    def column(self, key, attack=None, variant=None):
        return [r[key] for r in self._filter(attack, variant)]

    def _filter(self, attack=None, variant=None):
        rows = [r for r in self.rows if r["status"] == "ok"]
        if attack is not None:
            rows = [r for r in rows if r["attack"] == attack]
        if variant is not None:
            rows = [r for r in rows if r["variant"] == variant]
        return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _write(path, text):
    with open(path, "w", newline="") as fp:
        fp.write(text)


def _timings_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "alpha", "placement", "centering", "attack", "epsilon", "eval_seconds"])
    for r in rows:
        w.writerow([r["variant"], repr(r["alpha"]), r["placement"], r["centering"], r["attack"],
                    repr(r["epsilon"]), f"{r.get('eval_seconds', 0.0):.3f}"])
    return buf.getvalue()


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def build_manifest(config, meta=None):
    import numba
    import scipy

    return {
        "config": config,
        "meta": meta or {},
        "versions": {"meansparse": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__, "python": platform.python_version()},
        "kernel_backend": _kernels.BACKEND,
        "git": _git_hash(),
    }


def make_row(variant, alpha, placement, centering, attack, spec, clean, robust, seed, mid,
             status="ok", seconds=0.0):
    return {"variant": variant, "alpha": float(alpha), "placement": str(placement),
            "centering": centering, "attack": attack, "norm": spec.norm,
            "epsilon": float(spec.epsilon), "steps": int(spec.steps), "clean_acc": clean,
            "robust_acc": robust, "seed": int(seed), "model_id": mid, "status": status,
            "base": alpha == 0, "eval_seconds": seconds}


# -------------------------------------------------------------------- sweeps
def alpha_sweep(model, eval_ds, plan, calib_ds=None, states=None, base_cache=None):
    """Clean and robust accuracy for every (α, attack) pair of ``plan``.

    Calibration runs once (or ``states`` are reused) because the statistics do
    not depend on α. The α = 0 rows evaluate the unmodified model. A failing
    row is recorded with status ``failed: ...`` and the sweep continues.
    """
    mid = model_id(model)
    if states is None:
        if calib_ds is None:
            raise ConfigError("alpha_sweep needs calibration data or cached statistics")
        states = sp.calibrate(model, range(model.num_sites), calib_ds, fraction=plan.calib_fraction,
                              seed=plan.seed)
    base_cache = {} if base_cache is None else base_cache
    report = EvalReport(meta={"model_id": mid, "variant": plan.variant})
    try:
        for alpha in plan.alphas:
            if alpha == 0:
                sp.detach(model)
            else:
                sp.attach(model, plan.placement, alpha, states, plan.centering)
            for name, spec in plan.attacks:
                key = (mid, name, spec)
                try:
                    if alpha == 0 and key in base_cache:
                        res = base_cache[key]
                    else:
                        res = evaluate_robust(model, eval_ds.images, eval_ds.labels, spec, attack=name,
                                              batch_size=plan.batch_size)
                        if alpha == 0:
                            base_cache[key] = res
                    row = make_row(plan.variant, alpha, plan.placement, plan.centering, name, spec,
                                   res.clean_acc, res.robust_acc, spec.seed, mid, seconds=res.seconds)
                except MeanSparseError as exc:
                    row = make_row(plan.variant, alpha, plan.placement, plan.centering, name, spec,
                                   float("nan"), float("nan"), spec.seed, mid, status=f"failed: {exc}")
                report.rows.append(row)
    finally:
        sp.detach(model)
    report.meta["states"] = states
    return report


def select_alpha(report, max_clean_drop=0.1, attack=None, variant=None, tol=1e-9):
    """α with the highest robust accuracy whose clean accuracy stays within
    ``max_clean_drop`` points of the base row; ties go to the smaller α.

    Returns 0 (with a warning) when no α > 0 is feasible, and 0 when no
    feasible α beats the base model's robustness.
    """
    rows = report._filter(attack, variant)
    if attack is None and rows:
        rows = [r for r in rows if r["attack"] == rows[0]["attack"]]
    base = [r for r in rows if r["alpha"] == 0]
    if not base:
        raise ConfigError("report has no base (α = 0) row")
    base_clean = 100.0 * base[0]["clean_acc"]
    base_robust = 100.0 * base[0]["robust_acc"]
    feasible = [r for r in rows if r["alpha"] > 0
                and 100.0 * r["clean_acc"] >= base_clean - max_clean_drop - tol]
    if not feasible:
        warnings.warn("no α > 0 keeps clean accuracy within the allowed drop; using α = 0", stacklevel=2)
        choice = 0.0
    else:
        best = min(feasible, key=lambda r: (-r["robust_acc"], r["alpha"]))
        choice = best["alpha"] if 100.0 * best["robust_acc"] > base_robust else 0.0
    report.selected_alpha = choice
    return choice


def attack_power_sweep(model, eval_ds, states, alphas, epsilons, spec, attack="pgd", placement="all",
                       centering="channel", variant="base", batch_size=256):
    """Robust accuracy over an ε grid, one column per α.

    Radii are visited in increasing order and a sample counts as broken at ε
    once any perturbation found at a radius ≤ ε fools the model (every such
    perturbation is feasible at ε), which makes each column monotone.
    """
    mid = model_id(model)
    report = EvalReport(meta={"model_id": mid, "variant": variant})
    eps_sorted = sorted(float(e) for e in epsilons)
    try:
        for alpha in parse_grid(alphas):
            if alpha == 0:
                sp.detach(model)
            else:
                sp.attach(model, placement, alpha, states, centering)
            alive = None
            for eps in eps_sorted:
                s = replace(spec, epsilon=eps, step_size=_step_for(spec, eps))
                res = evaluate_robust(model, eval_ds.images, eval_ds.labels, s, attack=attack,
                                      batch_size=batch_size)
                alive = res.robust_correct if alive is None else alive & res.robust_correct
                report.rows.append(make_row(variant, alpha, placement, centering, attack, s,
                                            res.clean_acc, float(alive.mean()), s.seed, mid,
                                            seconds=res.seconds))
    finally:
        sp.detach(model)
    return report


def _step_for(spec, eps):
    # 2.5·ε/steps keeps the step proportional to the radius
    return 2.5 * eps / spec.steps


# -------------------------------------------------------------- experiments
@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON config files use the same key names."""

    data: str = "synthetic"
    data_dir: str = None
    subset: tuple = (5000, 1000)
    n_train: int = 2000
    n_test: int = 1000
    num_classes: int = 10
    image_size: int = 8
    spread: float = 0.25
    blocks: int = 4
    activation: str = "relu"
    precision: str = "float32"
    seed: int = 0
    train: dict = field(default_factory=lambda: {"epochs": 10, "decay_epochs": [5, 8], "mode": "pgd_at",
                                                 "val_size": 200})
    alpha_grid: tuple = DEFAULT_GRID
    attack: str = "pgd"
    norm: str = "linf"
    eps: str = "8/255"
    steps: int = 20
    step_size: float = 0.0078
    restarts: int = 1
    loss: str = "ce"
    n_eval: int = None
    placement: str = "all"
    centering: str = "channel"
    calib_fraction: float = 1.0
    max_clean_drop: float = 0.1
    checkpoint: str = None
    checkpoint_dir: str = None
    no_train: bool = False
    batch_size: int = 256
    power_alphas: tuple = (0.0, 0.2, 0.35)
    power_eps: tuple = tuple(f"{i}/255" for i in range(1, 17))
    activations: tuple = ("relu", "elu", "gelu", "silu", "psilu", "pssilu")

    def __post_init__(self):
        if self.data not in ("synthetic", "cifar10"):
            raise ConfigError(f"data must be synthetic or cifar10, got {self.data!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        self.alpha_grid = parse_grid(self.alpha_grid)
        if self.subset is not None:
            self.subset = tuple(int(v) for v in self.subset)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def attack_spec(self, **over):
        from .attacks import parse_fraction

        kw = dict(norm=self.norm, epsilon=parse_fraction(self.eps), steps=self.steps,
                  step_size=self.step_size, restarts=self.restarts, loss=self.loss, seed=self.seed)
        kw.update(over)
        return AttackSpec(**kw)

    def train_config(self, **over):
        kw = dict(self.train)
        kw.setdefault("seed", self.seed)
        # crop + flip only makes sense for natural images
        kw.setdefault("augment", self.data == "cifar10")
        kw.update(over)
        if isinstance(kw.get("at_attack"), dict):
            kw["at_attack"] = AttackSpec(**kw["at_attack"])
        return TrainConfig(**kw)


def load_data(cfg):
    if cfg.data == "cifar10":
        if not cfg.data_dir:
            raise DataError("cifar10 data needs --data-dir")
        return load_cifar10(cfg.data_dir, cfg.subset, cfg.seed)
    return synth_splits(cfg.n_train, cfg.n_test, cfg.num_classes, cfg.image_size, cfg.seed,
                        spread=cfg.spread)


def eval_subset(cfg, splits):
    test = splits.test
    if cfg.n_eval is not None and cfg.n_eval < len(test):
        test = test.subset(np.arange(cfg.n_eval))
    return test


def build_model(cfg, splits, activation=None):
    from .model import NetSpec

    set_default_dtype(cfg.dtype)
    mean, std = splits.train.channel_stats()
    spec = NetSpec(input_shape=splits.train.input_shape, num_classes=splits.train.num_classes,
                   blocks=cfg.blocks, activation=activation or cfg.activation,
                   input_mean=tuple(float(m) for m in mean), input_std=tuple(float(s) for s in std))
    return MiniResNet(spec, seed=cfg.seed, dtype=cfg.dtype)


def trained_model(cfg, splits, variant="base", activation=None, log=None, out_dir=None, **train_over):
    """Load ``<checkpoint_dir>/<variant>.ckpt`` if present, otherwise train and save it."""
    path = None
    if cfg.checkpoint and variant == "base":
        path = cfg.checkpoint
    elif cfg.checkpoint_dir:
        path = os.path.join(cfg.checkpoint_dir, f"{variant}.ckpt")
    if path and os.path.exists(path):
        set_default_dtype(cfg.dtype)
        model, _ = load_checkpoint(path)
        return model
    if cfg.no_train:
        raise DataError(f"missing checkpoint for variant {variant!r} ({path}) and training is disabled")
    model = build_model(cfg, splits, activation)
    best, history = train(model, splits, cfg.train_config(**train_over), log=log)
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_checkpoint(path, best, {"variant": variant})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, f"history_{variant}.csv"), history_to_csv(history))
    return best


def run_sweep(cfg, out_dir=None, log=None):
    # build the plan first so config mistakes surface before any training
    plan = SweepPlan(cfg.alpha_grid, [(cfg.attack, cfg.attack_spec())], cfg.placement, cfg.centering,
                     seed=cfg.seed, calib_fraction=cfg.calib_fraction, batch_size=cfg.batch_size)
    splits = load_data(cfg)
    model = trained_model(cfg, splits, log=log, out_dir=out_dir)
    report = alpha_sweep(model, eval_subset(cfg, splits), plan, calib_ds=splits.train)
    select_alpha(report, cfg.max_clean_drop)
    report.meta.pop("states", None)
    if out_dir:
        report.save(out_dir, cfg.to_json())
    return report


def _norm_kind(kind):
    k = kind.lower().replace("-", "_")
    k = {"threatnorm": "threat_norm", "atmethod": "at_method", "attackpower": "attack_power",
         "threat": "threat_norm", "power": "attack_power"}.get(k.replace("_", ""), k)
    if k not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    return k


def run_ablation(kind, cfg, out_dir=None, log=None):
    """One report per ablation, laid out along that ablation's table axes."""
    kind = _norm_kind(kind)
    splits = load_data(cfg)
    test = eval_subset(cfg, splits)
    spec = cfg.attack_spec()
    rows, meta = [], {"ablation": kind}
    cache = {}

    def sweep(model, variant, attacks=None, placement=None, centering=None, states=None, alphas=None):
        plan = SweepPlan(alphas or cfg.alpha_grid, attacks or [(cfg.attack, spec)],
                         placement or cfg.placement, centering or cfg.centering, seed=cfg.seed,
                         calib_fraction=cfg.calib_fraction, batch_size=cfg.batch_size, variant=variant)
        rep = alpha_sweep(model, test, plan, calib_ds=splits.train, states=states, base_cache=cache)
        rows.extend(rep.rows)
        return rep.meta["states"]

    if kind == "activation":
        for act in cfg.activations:
            model = trained_model(cfg, splits, f"act-{act}", activation=act, log=log, out_dir=out_dir)
            sweep(model, act)
    elif kind == "threat_norm":
        l2_eps = 128 / 255
        at_l2 = AttackSpec("l2", l2_eps, 10, 2.5 * l2_eps / 10)
        model = trained_model(cfg, splits, "base", log=log, out_dir=out_dir)
        sweep(model, "linf", [(cfg.attack, replace(spec, norm="linf"))])
        model = trained_model(cfg, splits, "at-l2", log=log, out_dir=out_dir, at_attack=at_l2)
        sweep(model, "l2", [(cfg.attack, replace(spec, norm="l2", epsilon=l2_eps,
                                                step_size=2.5 * l2_eps / spec.steps))])
    elif kind == "at_method":
        model = trained_model(cfg, splits, "base", log=log, out_dir=out_dir, mode="pgd_at")
        sweep(model, "pgd_at")
        model = trained_model(cfg, splits, "trades", log=log, out_dir=out_dir, mode="trades")
        sweep(model, "trades")
    elif kind == "centering":
        model = trained_model(cfg, splits, "base", log=log, out_dir=out_dir)
        states = None
        for c in ("zero", "global", "channel"):
            states = sweep(model, c, centering=c, states=states)
    elif kind == "attack_power":
        model = trained_model(cfg, splits, "base", log=log, out_dir=out_dir)
        states = sp.calibrate(model, range(model.num_sites), splits.train, fraction=cfg.calib_fraction,
                              seed=cfg.seed)
        from .attacks import parse_fraction

        rep = attack_power_sweep(model, test, states, cfg.power_alphas,
                                 [parse_fraction(e) for e in cfg.power_eps], spec, cfg.attack,
                                 cfg.placement, cfg.centering, batch_size=cfg.batch_size)
        rows.extend(rep.rows)
    elif kind == "placement":
        model = trained_model(cfg, splits, "base", log=log, out_dir=out_dir)
        n = model.num_sites
        states = None
        places = ([f"single:{i}" for i in range(n)] + [f"cumulative:{i}" for i in range(n)]
                  + ["main", "after"])
        for p in places:
            states = sweep(model, p, placement=p, states=states)
    report = EvalReport(rows, meta=meta)
    if out_dir:
        report.save(out_dir, {**cfg.to_json(), "ablation": kind})
    return report
