"""Gradient-based evasion attacks under ℓ∞ and ℓ2 threat models.

Inputs live in [0, 1]. Every returned adversarial batch satisfies the norm
bound and the box exactly (ℓ∞) or to within ε·1e-9 relative (ℓ2), enforced
by a final repair pass in float64.

Randomness is drawn per sample from ``default_rng([seed, restart, index])``
where ``index`` is the sample's global position, so results do not depend on
how a dataset is batched.
"""

from __future__ import annotations

import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor, grad_of, no_grad

NORMS = ("linf", "l2")
LOSSES = ("ce", "dlr")
L2_SLACK = 1e-9


def parse_fraction(text):
    """'8/255' → 0.031372...; also accepts plain decimals."""
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse {text!r} as a number or fraction") from None


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "linf"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float = 0.0078
    restarts: int = 1
    loss: str = "ce"
    seed: int = 0
    random_start: bool = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.epsilon >= 0 or not self.step_size >= 0:
            raise ConfigError("epsilon and step_size must be nonnegative")
        if self.steps < 1 or self.restarts < 1:
            raise ConfigError("steps and restarts must be at least 1")
        if self.random_start is None:
            object.__setattr__(self, "random_start", self.restarts > 1)

    def label(self):
        eps = Fraction(self.epsilon).limit_denominator(1000)
        return f"{self.norm}-eps{eps.numerator}/{eps.denominator}-s{self.steps}-r{self.restarts}-{self.loss}"


@contextmanager
def attack_mode(model):
    """Eval-mode forward with parameters excluded from the tape."""
    was_training = model.training
    flags = [(p, p.requires_grad) for p in model.parameters()]
    model.eval()
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, flag in flags:
            p.requires_grad = flag
        model.train(was_training)


# -------------------------------------------------------------------- losses
def dlr_loss(logits, target, reduction="none"):
    """Difference-of-logits ratio, −(z_y − max_{i≠y} z_i)/(z_π1 − z_π3 + 1e-12)."""
    z = logits.data
    n, k = z.shape
    if k < 4:
        raise ConfigError("DLR loss needs at least 4 classes")
    rows = np.arange(n)
    target = np.asarray(target, dtype=np.int64)
    order = np.argsort(-z, axis=1, kind="stable")
    zy = z[rows, target]
    masked = z.copy()
    masked[rows, target] = -np.inf
    other = masked.argmax(axis=1)
    top, third = order[:, 0], order[:, 2]
    a = zy - z[rows, other]
    d = z[rows, top] - z[rows, third] + 1e-12
    per = -a / d

    def back(g):
        w = g if reduction == "none" else np.broadcast_to(g * (1.0 / n if reduction == "mean" else 1.0), (n,))
        out = np.zeros_like(z)
        np.add.at(out, (rows, target), -w / d)
        np.add.at(out, (rows, other), w / d)
        np.add.at(out, (rows, top), w * a / d ** 2)
        np.add.at(out, (rows, third), -w * a / d ** 2)
        return (out,)

    value = per if reduction == "none" else np.asarray(per.mean() if reduction == "mean" else per.sum())
    return Tensor._make(value.astype(z.dtype, copy=False), (logits,), back, "dlr")


def _loss_fn(name, num_classes):
    if name == "dlr" and num_classes < 4:
        warnings.warn("DLR needs at least 4 classes; falling back to cross-entropy", stacklevel=3)
        name = "ce"
    if name == "dlr":
        return dlr_loss
    return lambda z, y, reduction="none": ops.cross_entropy(z, y, reduction)


def _loss_and_grad(model, x, y, loss_name):
    xt = Tensor(x, requires_grad=True)
    logits = model(xt)
    per = _loss_fn(loss_name, logits.shape[1])(logits, y, reduction="none")
    (g,) = grad_of(ops.sum(per), [xt])
    return per.data.astype(np.float64), g, logits.data


def _per_sample_loss(model, x, y, loss_name):
    with no_grad():
        logits = model(Tensor(x))
    per = _loss_fn(loss_name, logits.shape[1])(logits, y, reduction="none")
    return per.data.astype(np.float64), logits.data


# ---------------------------------------------------------------- geometry
def _norms(v):
    return np.sqrt((v.reshape(len(v), -1).astype(np.float64) ** 2).sum(axis=1))


def _bshape(v, x):
    return v.reshape((-1,) + (1,) * (x.ndim - 1))


def _project(delta, eps, norm):
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    n = _norms(delta)
    scale = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
    return (delta * _bshape(scale, delta)).astype(delta.dtype)


def _direction(g, norm):
    if norm == "linf":
        return np.sign(g)
    n = _norms(g)
    return (g / _bshape(np.maximum(n, 1e-300), g)).astype(g.dtype)


def _round_inward(bound, dtype, up):
    """Cast a float64 bound to ``dtype`` without stepping outside it."""
    c = bound.astype(dtype)
    off = c.astype(np.float64) < bound if up else c.astype(np.float64) > bound
    c[off] = np.nextafter(c[off], dtype.type(np.inf if up else -np.inf))
    return c


def enforce_feasible(x_adv, x, eps, norm):
    """Repair rounding so the returned batch is feasible (box and norm ball)."""
    x_adv = np.clip(x_adv, 0.0, 1.0)
    if norm == "linf":
        x64 = x.astype(np.float64)
        lo = _round_inward(np.maximum(x64 - eps, 0.0), x.dtype, up=True)
        hi = _round_inward(np.minimum(x64 + eps, 1.0), x.dtype, up=False)
        x_adv = np.clip(x_adv, lo, hi)
        for _ in range(8):
            over = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)) > eps
            if not over.any():
                break
            x_adv[over] = np.nextafter(x_adv[over], x[over])
        return x_adv
    limit = eps * (1.0 + L2_SLACK)
    x64 = x.astype(np.float64)
    d = x_adv.astype(np.float64) - x64
    n = _norms(d)
    bad = n > limit
    if bad.any():
        # Shrink radially in float64, then round each coordinate toward x so
        # the cast cannot grow any |δ_i| (the target lies between x and a
        # point of the box, so the box survives too).
        shrink = np.where(bad, eps / np.maximum(n, 1e-300), 1.0)
        target = x64[bad] + d[bad] * _bshape(shrink[bad], d[bad])
        c = target.astype(x.dtype)
        grew = np.abs(c.astype(np.float64) - x64[bad]) > np.abs(target - x64[bad])
        c[grew] = np.nextafter(c[grew], x[bad][grew])
        x_adv = x_adv.copy()
        x_adv[bad] = c
    return x_adv


def _random_start(x, eps, norm, seed, restart, index):
    """Uniform sample in the ε-ball (ℓ2: uniform direction, radius ε·U^{1/d})."""
    out = np.empty_like(x)
    d = x[0].size
    for i, gi in enumerate(index):
        rng = np.random.default_rng([seed, restart, int(gi)])
        if norm == "linf":
            out[i] = rng.uniform(-eps, eps, size=x[i].shape)
        else:
            v = rng.standard_normal(x[i].shape)
            v /= max(np.linalg.norm(v), 1e-300)
            out[i] = v * eps * rng.random() ** (1.0 / d)
    return out


def _fallback_direction(x, norm, seed, restart, index, start):
    """Direction used where the loss gradient is identically zero."""
    out = np.empty_like(x)
    for i, gi in enumerate(index):
        if np.any(start[i] != 0):
            v = start[i]
        else:
            v = np.random.default_rng([seed, restart, int(gi), 1]).standard_normal(x[i].shape)
        out[i] = v
    return _direction(out, norm)


def _indices(x, index):
    return np.arange(len(x)) if index is None else np.asarray(index)


# ------------------------------------------------------------------ attacks
def fgsm(model, x, y, spec, index=None):
    """Single signed-gradient step of size ε (normalised gradient for ℓ2).

    Runs as one PGD iteration without random start, so the projection and
    feasibility repair are shared with :func:`pgd`.
    """
    one = replace(spec, steps=1, step_size=spec.epsilon, restarts=1, random_start=False)
    return _run(model, x, y, one, index, momentum=0.0, halving=(), keep_best=False, callback=None)


def _better(loss, fooled, best_loss, best_fooled):
    """Lexicographic (misclassified, loss) comparison per sample."""
    return (fooled & ~best_fooled) | ((fooled == best_fooled) & (loss > best_loss))


def _fooled(logits, y):
    return logits.argmax(axis=1) != y


def _run(model, x, y, spec, index, momentum, halving, keep_best, callback, step0=None):
    x = np.asarray(x)
    y = np.asarray(y)
    idx = _indices(x, index)
    eps = spec.epsilon
    best_x = x.copy()
    best_loss = np.full(len(x), -np.inf)
    best_fooled = np.zeros(len(x), dtype=bool)
    with attack_mode(model):
        for r in range(spec.restarts):
            start = (_random_start(x, eps, spec.norm, spec.seed, r, idx) if spec.random_start
                     else np.zeros_like(x))
            x_adv = enforce_feasible(x + start, x, eps, spec.norm)
            velocity = np.zeros(x.shape)
            step = spec.step_size if step0 is None else step0
            checkpoints = {int(np.ceil(f * spec.steps)) for f in halving}
            if keep_best:
                r_loss, logits = _per_sample_loss(model, x_adv, y, spec.loss)
                r_x, r_fooled = x_adv.copy(), _fooled(logits, y)
            for t in range(spec.steps):
                if t in checkpoints and t > 0:
                    step *= 0.5
                loss, g, logits = _loss_and_grad(model, x_adv, y, spec.loss)
                if keep_best:
                    fooled = _fooled(logits, y)
                    b = _better(loss, fooled, r_loss, r_fooled)
                    r_x[b], r_loss[b], r_fooled[b] = x_adv[b], loss[b], fooled[b]
                if momentum:
                    g64 = g.astype(np.float64)
                    scale = np.maximum(np.abs(g64).reshape(len(g), -1).mean(axis=1), 1e-300)
                    velocity = momentum * velocity + g64 / _bshape(scale, g64)
                    g = velocity.astype(g.dtype)
                direction = _direction(g, spec.norm)
                dead = ~np.any(g.reshape(len(g), -1) != 0, axis=1)
                if dead.any():
                    direction[dead] = _fallback_direction(x[dead], spec.norm, spec.seed, r,
                                                          idx[dead], start[dead])
                delta = _project(x_adv + step * direction.astype(x.dtype) - x, eps, spec.norm)
                x_adv = enforce_feasible(x + delta, x, eps, spec.norm)
                if callback is not None:
                    callback(r, t, x_adv)
            loss, logits = _per_sample_loss(model, x_adv, y, spec.loss)
            fooled = _fooled(logits, y)
            if keep_best:
                b = _better(loss, fooled, r_loss, r_fooled)
                r_x[b], r_loss[b], r_fooled[b] = x_adv[b], loss[b], fooled[b]
                x_adv, loss, fooled = r_x, r_loss, r_fooled
            take = _better(loss, fooled, best_loss, best_fooled)
            best_x[take] = x_adv[take]
            best_loss[take] = loss[take]
            best_fooled[take] = fooled[take]
    return best_x


def pgd(model, x, y, spec, index=None, callback=None):
    """Projected gradient ascent from the final iterate of each restart.

    Across restarts a misclassified result beats a correctly classified one;
    otherwise the higher loss wins.
    """
    return _run(model, x, y, spec, index, momentum=0.0, halving=(), keep_best=False,
                callback=callback)


APGD_CHECKPOINTS = (0.22, 0.44, 0.66, 0.88)


def momentum_pgd_ce(model, x, y, spec, index=None, momentum=0.75, halving=APGD_CHECKPOINTS,
                    keep_best=True, initial_step=None, callback=None):
    """PGD with heavy-ball gradient momentum and step halving at fixed checkpoints.

    A lightweight stand-in for APGD-CE: the gradient is L1-normalised per
    sample, accumulated as ``v ← momentum·v + g``, and the step follows v. The
    first step is ``initial_step`` (2ε by default, as in APGD) and halves when
    the iteration count crosses each fraction in ``halving``. The returned
    point is the best iterate seen: misclassified if any iterate was, else the
    highest-loss one.
    """
    step0 = 2.0 * spec.epsilon if initial_step is None else initial_step
    return _run(model, x, y, spec, index, momentum=momentum, halving=halving,
                keep_best=keep_best, callback=callback, step0=step0)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "apgd-ce": momentum_pgd_ce}


# ---------------------------------------------------------------- evaluation
@dataclass
class RobustResult:
    clean_acc: float
    robust_acc: float
    clean_correct: np.ndarray
    robust_correct: np.ndarray
    seconds: float = 0.0
    attack: str = ""
    meta: dict = field(default_factory=dict)


def predict(model, x, batch_size=256):
    preds = []
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for s in range(0, len(x), batch_size):
                preds.append(model(Tensor(x[s:s + batch_size])).data.argmax(axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_robust(model, images, labels, spec, attack="apgd-ce", batch_size=256, dtype=None):
    """Clean and robust accuracy; a cleanly misclassified sample counts as broken."""
    if attack not in ATTACKS:
        raise ConfigError(f"unknown attack {attack!r}; choose from {sorted(ATTACKS)}")
    fn = ATTACKS[attack]
    t0 = time.perf_counter()
    if dtype is None:
        dtype = model.parameters()[0].dtype
    x_all = np.asarray(images, dtype=dtype)
    y_all = np.asarray(labels, dtype=np.int64)
    clean = predict(model, x_all, batch_size) == y_all
    robust = np.zeros_like(clean)
    for s in range(0, len(x_all), batch_size):
        sl = slice(s, s + batch_size)
        x, y = x_all[sl], y_all[sl]
        todo = clean[sl]
        if not todo.any():
            continue
        idx = np.arange(s, s + len(x))[todo]
        x_adv = fn(model, x[todo], y[todo], spec, index=idx)
        ok = np.zeros(len(x), dtype=bool)
        ok[todo] = predict(model, x_adv, batch_size) == y[todo]
        robust[sl] = ok
    n = max(len(y_all), 1)
    return RobustResult(float(clean.sum() / n), float(robust.sum() / n), clean, robust,
                        time.perf_counter() - t0, attack)
