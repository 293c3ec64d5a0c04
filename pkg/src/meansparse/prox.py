"""ℓ0 proximal operator and a penalty-method solver for ℓ0-regularised toys.

The regularised problem is

    min_θ  L(θ) + γ‖ā(θ)‖₀

relaxed with an auxiliary vector w and penalty parameter λ → 0:

    min_{θ,w}  L(θ) + γ‖w‖₀ + (1/2λ)‖w − ā(θ)‖²

Block-coordinate iterations alternate an exact w-update (hard thresholding of
the previous features at √(2λγ)) with one gradient step on θ.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels, ops
from .errors import ConfigError, DivergenceError, NumericError
from .tensor import Tensor, grad_of

TRACE_FIELDS = ("iter", "lambda", "objective", "penalty_gap", "active_count")


def hard_threshold(v, alpha):
    """Keep entries with |v| > √alpha, zero the rest (boundary goes to zero)."""
    if alpha < 0:
        raise ConfigError(f"hard-threshold level must be nonnegative, got {alpha}")
    return _kernels.hard_threshold(np.asarray(v, dtype=np.float64), np.sqrt(alpha))


def prox_l0(v, t):
    """Proximal map of t·‖x‖₀: argmin_x t‖x‖₀ + ½‖x − v‖².

    Equals hard thresholding at √(2t); on the tie |v| = √(2t) both candidates
    cost the same and zero is returned.
    """
    if t < 0:
        raise ConfigError(f"prox weight must be nonnegative, got {t}")
    return hard_threshold(v, 2.0 * t)


@dataclass
class ProxProblem:
    gamma: float
    lambda0: float
    theta0: np.ndarray
    loss: Callable[[Tensor], Tensor]
    features: Callable[[Tensor], Tensor]
    decay: float = 0.95
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.lambda0 <= 0:
            raise ConfigError("lambda0 must be positive")
        if not 0 < self.decay < 1:
            raise ConfigError("lambda decay must lie in (0, 1) so the schedule strictly decreases")
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)

    def lam(self, k):
        return self.lambda0 * self.decay ** k


@dataclass
class SolveResult:
    theta: np.ndarray
    w: np.ndarray
    trace: list

    def __iter__(self):
        return iter((self.theta, self.w, self.trace))


def _feat(p, theta):
    return p.features(Tensor(theta)).data.reshape(-1)


def penalty_solve(p, iters, step, normalize_step=True):
    """Run ``iters`` block-coordinate iterations; returns (θ, w, trace rows).

    With ``normalize_step`` the θ step at penalty parameter λ is
    ``step·λ/(1+λ)``, i.e. ``step`` divided by the curvature bound 1 + 1/λ
    that holds when L and ā are 1-Lipschitz. Without it the plain ``step`` is
    used; once ``step > 2λ`` every freshly zeroed coordinate overshoots past
    the origin, so the iteration oscillates and can blow up.
    """
    if iters < 1:
        raise ConfigError("iters must be at least 1")
    theta = p.theta0.copy()
    w = _feat(p, theta)
    trace = []
    for k in range(iters):
        lam = p.lam(k)
        try:
            w = prox_l0(_feat(p, theta), lam * p.gamma)
            th = Tensor(theta, requires_grad=True)
            gap_t = ops.sub(ops.reshape(p.features(th), (-1,)), Tensor(w))
            obj = ops.add(p.loss(th), ops.mul(ops.sum(ops.mul(gap_t, gap_t)), 0.5 / lam))
            (g,) = grad_of(obj, [th])
            eta = step * lam / (1.0 + lam) if normalize_step else step
            theta = theta - eta * g
            a_bar = _feat(p, theta)
            loss_val = float(p.loss(Tensor(theta)).data)
        except NumericError as exc:
            raise DivergenceError(f"penalty solver diverged at iteration {k}: {exc}", trace) from exc
        active = int(np.count_nonzero(np.abs(a_bar) > np.sqrt(2.0 * lam * p.gamma)))
        row = {"iter": k, "lambda": lam, "objective": loss_val + p.gamma * active,
               "penalty_gap": float(np.linalg.norm(w - a_bar)), "active_count": active}
        trace.append(row)
        if not (np.isfinite(row["objective"]) and np.all(np.isfinite(theta))):
            raise DivergenceError(f"penalty solver diverged at iteration {k}", trace)
    return SolveResult(theta, w, trace)


def trace_to_csv(trace):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in trace:
        writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRACE_FIELDS})
    return buf.getvalue()


# ---------------------------------------------------------------- toy problems
def _zero_loss(th):
    return ops.mul(ops.sum(th), 0.0)


def identity_problem(theta0, gamma=1.0, lambda0=0.5, decay=0.95):
    """L = 0 and ā(θ) = θ: pure sparsification pressure."""
    return ProxProblem(gamma, lambda0, np.asarray(theta0, float), _zero_loss, lambda th: th,
                       decay, "identity")


def quadratic_problem(dim=20, support=5, gamma=0.5, lambda0=0.5, decay=0.95, noise=0.3, seed=0):
    """Sparse least squares: L(θ) = ½‖Aθ − b‖²/m with b = A θ_true, ā(θ) = θ.

    θ_true has ``support`` entries of magnitude in [1, 3]; the start point is
    θ_true plus Gaussian noise so the solver has to remove spurious mass.
    """
    rng = np.random.default_rng(seed)
    m = 2 * dim
    A = rng.standard_normal((m, dim))
    # scale so the Lipschitz constant of ∇L is 1
    A /= np.sqrt(np.linalg.eigvalsh(A.T @ A / m).max())
    truth = np.zeros(dim)
    idx = rng.choice(dim, size=support, replace=False)
    truth[idx] = rng.uniform(1, 3, size=support) * rng.choice([-1, 1], size=support)
    b = A @ truth
    At = Tensor(A)
    bt = Tensor(b)

    def loss(th):
        r = ops.sub(ops.matmul(At, ops.reshape(th, (dim, 1))), ops.reshape(bt, (m, 1)))
        return ops.mul(ops.sum(ops.mul(r, r)), 0.5 / m)

    theta0 = truth + noise * rng.standard_normal(dim)
    return ProxProblem(gamma, lambda0, theta0, loss, lambda th: th, decay, "quadratic",
                       {"truth": truth})


def two_layer_problem(n=64, d=4, hidden=8, gamma=0.05, lambda0=0.5, decay=0.95, seed=0):
    """Regression with a 2-layer ReLU net; ā is the hidden pre-activation matrix
    centred by its value at the starting point (a fixed reference, like a
    running mean)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    W_true = rng.standard_normal((d, hidden)) / np.sqrt(d)
    v_true = rng.standard_normal(hidden) / np.sqrt(hidden)
    y = np.maximum(X @ W_true, 0) @ v_true
    Xt, yt = Tensor(X), Tensor(y.reshape(n, 1))
    n_w = d * hidden

    def unpack(th):
        W = ops.reshape(_slice(th, 0, n_w), (d, hidden))
        v = ops.reshape(_slice(th, n_w, n_w + hidden), (hidden, 1))
        return W, v

    theta0 = np.concatenate([rng.standard_normal(n_w) / np.sqrt(d),
                             rng.standard_normal(hidden) / np.sqrt(hidden)])
    ref = (X @ theta0[:n_w].reshape(d, hidden)).mean(axis=0)
    ref_t = Tensor(np.broadcast_to(ref, (n, hidden)).copy())

    def features(th):
        W, _ = unpack(th)
        return ops.sub(ops.matmul(Xt, W), ref_t)

    def loss(th):
        W, v = unpack(th)
        r = ops.sub(ops.matmul(ops.relu(ops.matmul(Xt, W)), v), yt)
        return ops.mul(ops.sum(ops.mul(r, r)), 0.5 / n)

    return ProxProblem(gamma, lambda0, theta0, loss, features, decay, "two_layer")


def _slice(t, lo, hi):
    n = t.shape[0]
    mask = np.zeros((hi - lo, n))
    mask[np.arange(hi - lo), np.arange(lo, hi)] = 1.0
    return ops.reshape(ops.matmul(Tensor(mask), ops.reshape(t, (n, 1))), (hi - lo,))
