"""SGD training: standard, PGD adversarial training, and TRADES."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attacks import AttackSpec, _project, _direction, attack_mode, enforce_feasible, evaluate_robust, pgd
from .data import augment_crop_flip, iter_batches
from .errors import ConfigError, DivergenceError, NumericError
from .tensor import Tensor, backward, grad_of, no_grad

MODES = ("standard", "pgd_at", "trades")
SELECTION = ("best_pgd", "best_clean", "last")
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "clean_val_acc", "pgd_val_acc")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    decay_epochs: tuple = (15, 25)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mode: str = "standard"
    trades_beta: float = 0.6
    at_attack: AttackSpec = field(default_factory=AttackSpec)
    val_attack: AttackSpec = None
    val_size: int = None
    selection: str = "best_pgd"
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.selection not in SELECTION:
            raise ConfigError(f"selection must be one of {SELECTION}, got {self.selection!r}")
        if self.mode == "trades" and not self.trades_beta > 0:
            raise ConfigError("TRADES needs beta > 0")
        if self.mode != "standard" and self.at_attack is None:
            raise ConfigError(f"mode {self.mode} needs an at_attack spec")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if isinstance(self.at_attack, dict):
            self.at_attack = AttackSpec(**self.at_attack)
        if isinstance(self.val_attack, dict):
            self.val_attack = AttackSpec(**self.val_attack)
        self.decay_epochs = tuple(self.decay_epochs)

    def lr_at(self, epoch):
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** drops

    def to_json(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


class SGD:
    """Heavy-ball SGD with coupled weight decay (v ← μv + g + wd·p; p ← p − lr·v)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


def _batch_seed(cfg, epoch, batch):
    return int(np.random.SeedSequence([cfg.seed, epoch, batch]).generate_state(1)[0])


def trades_adversary(model, x, spec, seed):
    """Maximise KL(f(x) ‖ f(x')) over the ε-ball (TRADES inner problem)."""
    rng = np.random.default_rng(seed)
    with attack_mode(model):
        with no_grad():
            p_nat = model(Tensor(x)).data
        x_adv = enforce_feasible(x + 0.001 * rng.standard_normal(x.shape).astype(x.dtype),
                                 x, spec.epsilon, spec.norm)
        for _ in range(spec.steps):
            xt = Tensor(x_adv, requires_grad=True)
            kl = ops.kl_div(Tensor(p_nat), model(xt), reduction="sum")
            (g,) = grad_of(kl, [xt])
            delta = _project(x_adv + spec.step_size * _direction(g, spec.norm).astype(x.dtype) - x,
                             spec.epsilon, spec.norm)
            x_adv = enforce_feasible(x + delta, x, spec.epsilon, spec.norm)
    return x_adv


def batch_loss(model, x, y, cfg, seed=0):
    """Training loss on one batch (model left in train mode)."""
    if cfg.mode == "pgd_at":
        spec = AttackSpec(**{**asdict(cfg.at_attack), "seed": seed})
        x_adv = pgd(model, x, y, spec)
        model.train()
        return ops.cross_entropy(model(Tensor(x_adv)), y)
    if cfg.mode == "trades":
        x_adv = trades_adversary(model, x, cfg.at_attack, seed)
        model.train()
        logits = model(Tensor(x))
        ce = ops.cross_entropy(logits, y)
        kl = ops.kl_div(logits, model(Tensor(x_adv)), reduction="mean")
        return ops.add(ce, ops.mul(kl, cfg.trades_beta))
    model.train()
    return ops.cross_entropy(model(Tensor(x)), y)


def _snapshot(model):
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def train(model, splits, cfg, log=None):
    """Train in place; returns (best_model, history rows).

    ``splits`` needs ``train`` and ``test`` datasets; the test split doubles as
    the validation set used for model selection, as in the original recipe.
    """
    dtype = model.parameters()[0].dtype
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    val = splits.test
    if cfg.val_size is not None and cfg.val_size < len(val):
        val = val.subset(np.arange(cfg.val_size))
    val_spec = cfg.val_attack or cfg.at_attack or AttackSpec()
    history = []
    best_state, best_score = None, -np.inf
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        total, count = 0.0, 0
        for b, (x, y) in enumerate(iter_batches(splits.train, cfg.batch_size, rng, dtype)):
            if cfg.augment:
                x = augment_crop_flip(x, rng)
            try:
                loss = batch_loss(model, x, y, cfg, _batch_seed(cfg, epoch, b))
                model.zero_grad()
                backward(loss)
            except NumericError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {b} (lr={lr}): {exc}",
                                      history) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {b} (lr={lr})", history)
            opt.step(lr)
            model.project_()
            total += value * len(y)
            count += len(y)
        res = evaluate_robust(model, val.images, val.labels, val_spec, attack="pgd")
        row = {"epoch": epoch, "lr": lr, "train_loss": total / max(count, 1),
               "clean_val_acc": res.clean_acc, "pgd_val_acc": res.robust_acc}
        history.append(row)
        if log is not None:
            log(f"epoch {epoch} lr {lr:g} loss {row['train_loss']:.4f} clean {res.clean_acc:.4f} "
                f"pgd {res.robust_acc:.4f} ({time.perf_counter() - t0:.1f}s)")
        score = {"best_pgd": (res.robust_acc, res.clean_acc), "best_clean": (res.clean_acc,),
                 "last": (epoch,)}[cfg.selection]
        if best_state is None or score > best_score:
            best_state, best_score = _snapshot(model), score
    best = copy.deepcopy(model)
    best.load_state_dict(best_state)
    best.eval()
    return best, history


def history_to_csv(history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in HISTORY_FIELDS})
    return buf.getvalue()
