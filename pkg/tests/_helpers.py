"""Shared oracles for the test modules (imported as a plain module)."""

import numpy as np

from meansparse import ops
from meansparse.attacks import dlr_loss
from meansparse.sparsifier import SparsifierState, sparsify_forward
from meansparse.tensor import Tensor, grad_of

H = 1e-5
REL_TOL = 1e-4


def rel_error(a, n):
    """Normwise relative error max|a − n| / max(max|a|, max|n|)."""
    a, n = np.asarray(a, float), np.asarray(n, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def gradcheck(fn, inputs, rng, wrt=None):
    """Max normwise relative error between analytic and central-difference grads.

    ``fn(*tensors)`` returns a tensor; it is reduced to a scalar with a fixed
    random projection so every output coordinate contributes.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    proj = {}

    def scalar(arrays):
        out = fn(*[Tensor(a) for a in arrays]).data
        if "r" not in proj:
            proj["r"] = rng.standard_normal(out.shape)
        return float((out * proj["r"]).sum())

    scalar(inputs)
    tensors = [Tensor(x, requires_grad=i in wrt) for i, x in enumerate(inputs)]
    out = fn(*tensors)
    loss = ops.sum(ops.mul(out, Tensor(proj["r"]))) if out.ndim else ops.mul(out, float(proj["r"]))
    grads = grad_of(loss, [tensors[i] for i in wrt])
    worst = 0.0
    for i, g in zip(wrt, grads):
        num = np.zeros_like(inputs[i])
        flat = inputs[i].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + H
            up = scalar(inputs)
            flat[j] = old - H
            dn = scalar(inputs)
            flat[j] = old
            num.reshape(-1)[j] = (up - dn) / (2 * H)
        worst = max(worst, rel_error(g, num))
    return worst


def _away(rng, shape, loci=(0.0,), margin=1e-3):
    x = rng.standard_normal(shape)
    for c in loci:
        bad = np.abs(x - c) <= margin
        x[bad] = c + np.sign(x[bad] - c + 1e-300) * (margin + rng.random(bad.sum()))
    return x


def _sparsify_case(rng):
    """Sparsifier with inputs kept ≥ 1e-3 away from the band edges."""
    c = 3
    mu = rng.standard_normal(c)
    sigma = rng.uniform(0.5, 1.5, c)
    alpha = rng.uniform(0.1, 0.5)
    th = alpha * sigma
    x = rng.standard_normal((2, c, 2, 2))
    for ch in range(c):
        d = x[:, ch] - mu[ch]
        bad = np.abs(np.abs(d) - th[ch]) < 1e-3
        x[:, ch][bad] += 0.01
    state = SparsifierState(mu, sigma, alpha=alpha)
    return [x], lambda t: sparsify_forward(state, t)


def _bn_case(rng):
    x = rng.standard_normal((3, 2, 2, 2))
    g = rng.uniform(0.5, 1.5, 2)
    b = rng.standard_normal(2)
    return [x, g, b], lambda x, g, b: ops.batch_norm_train(x, g, b, 1e-5)[0]


def _bn_eval_case(rng):
    x = rng.standard_normal((3, 2, 2, 2))
    g = rng.uniform(0.5, 1.5, 2)
    b = rng.standard_normal(2)
    m, v = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    return [x, g, b], lambda x, g, b: ops.batch_norm_eval(x, g, b, m, v, 1e-5)


def _ce_case(rng):
    y = rng.integers(0, 4, 3)
    return [rng.standard_normal((3, 4))], lambda z: ops.cross_entropy(z, y)


def _dlr_case(rng):
    # keep the top logits well separated so the sort order is stable under ±h
    z = rng.permutation(np.arange(5.0))[None].repeat(3, 0) + 0.1 * rng.standard_normal((3, 5))
    third = np.argsort(-z, axis=1)[:, 2]
    # y equal to the third-ranked class makes DLR constant (≡ 1), gradient 0
    y = (third + rng.integers(1, 5, 3)) % 5
    return [z], lambda t: dlr_loss(t, y, reduction="mean")


def _conv_case(stride, padding):
    def make(rng):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        return [x, w], lambda x, w: ops.conv2d(x, w, stride, padding)
    return make


def _scalar_param(name):
    def make(rng):
        x = rng.standard_normal((2, 3))
        beta = np.asarray(rng.uniform(0.5, 2.0))
        if name == "psilu":
            return [x, beta], lambda x, b: ops.psilu(x, b)
        shift = np.asarray(rng.uniform(0.0, 0.5))
        return [x, beta, shift], lambda x, b, a: ops.pssilu(x, b, a)
    return make


GRAD_CASES = {
    "add": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], ops.add),
    "sub": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], ops.sub),
    "mul": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], ops.mul),
    "mul_scalar_tensor": lambda r: ([r.standard_normal((2, 3)), np.asarray(r.standard_normal())], ops.mul),
    "neg": lambda r: ([r.standard_normal((2, 3))], ops.neg),
    "matmul": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((3, 4))], ops.matmul),
    "bias_add": lambda r: ([r.standard_normal((2, 3, 2, 2)), r.standard_normal(3)], ops.bias_add),
    "sum_all": lambda r: ([r.standard_normal((2, 3))], lambda x: ops.sum(x)),
    "sum_axis": lambda r: ([r.standard_normal((2, 3, 4))], lambda x: ops.sum(x, 1)),
    "mean_axis": lambda r: ([r.standard_normal((2, 3, 4))], lambda x: ops.mean(x, 2)),
    "reshape": lambda r: ([r.standard_normal((2, 6))], lambda x: ops.reshape(x, (3, 4))),
    "relu": lambda r: ([_away(r, (3, 4))], ops.relu),
    "elu": lambda r: ([_away(r, (3, 4))], ops.elu),
    "gelu": lambda r: ([r.standard_normal((3, 4))], ops.gelu),
    "sigmoid": lambda r: ([r.standard_normal((3, 4))], ops.sigmoid),
    "silu": lambda r: ([r.standard_normal((3, 4))], ops.silu),
    "psilu": _scalar_param("psilu"),
    "pssilu": _scalar_param("pssilu"),
    "softmax": lambda r: ([r.standard_normal((2, 4))], ops.softmax),
    "log_softmax": lambda r: ([r.standard_normal((2, 4))], ops.log_softmax),
    "cross_entropy": _ce_case,
    "kl_div": lambda r: ([r.standard_normal((2, 4)), r.standard_normal((2, 4))], ops.kl_div),
    "dlr": _dlr_case,
    "conv2d": _conv_case(1, 0),
    "conv2d_stride2_pad1": _conv_case(2, 1),
    "avg_pool2d": lambda r: ([r.standard_normal((2, 2, 4, 4))], lambda x: ops.avg_pool2d(x, 2)),
    "global_avg_pool": lambda r: ([r.standard_normal((2, 3, 2, 2))], ops.global_avg_pool),
    "batch_norm_train": _bn_case,
    "batch_norm_eval": _bn_eval_case,
    "channel_affine": lambda r: ([r.standard_normal((2, 3, 2, 2))],
                                 lambda x: ops.channel_affine(x, [0.5, 2.0, -1.0], [0.1, 0.2, 0.3])),
    "sparsifier_pass_through": _sparsify_case,
}


def run_grad_suite(points=100, seed=0):
    """{case: worst relative error over ``points`` random draws}."""
    worst = {}
    for name, make in GRAD_CASES.items():
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        w = 0.0
        for _ in range(points):
            inputs, fn = make(rng)
            w = max(w, gradcheck(fn, inputs, rng))
        worst[name] = w
    return worst


# ---------------------------------------------------------------- sparsifier
def sparsifier_property_failures(cases=10_000, seed=0):
    """Count failures of each algebraic property over random states and inputs."""
    rng = np.random.default_rng(seed)
    fails = {k: 0 for k in ("idempotence", "alpha0_identity", "alpha_nesting", "scale_equivariance",
                            "permutation_equivariance", "mass_concentration")}
    for _ in range(cases):
        c = int(rng.integers(1, 5))
        shape = (int(rng.integers(1, 4)), c, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        mu = rng.standard_normal(c)
        sigma = rng.uniform(0.1, 2.0, c)
        alpha = float(rng.uniform(0, 1.5))
        centering = ("channel", "zero", "global")[int(rng.integers(0, 3))]
        state = SparsifierState(mu, sigma, alpha=alpha, centering=centering,
                                global_mu=float(rng.standard_normal()))
        x = mu[None, :, None, None] + rng.standard_normal(shape)
        # seed exact hits of the center and of the boundary
        if rng.random() < 0.5:
            cen = state.center()
            th = state.thresholds()
            k = tuple(int(rng.integers(0, s)) for s in shape)
            x[k] = cen[k[1]]
            k2 = tuple(int(rng.integers(0, s)) for s in shape)
            x[k2] = cen[k2[1]] + th[k2[1]]
        y = _fwd(state, x)
        if not np.array_equal(_fwd(state, y), y):
            fails["idempotence"] += 1
        if not np.array_equal(_fwd(state.with_alpha(0.0), x), x):
            fails["alpha0_identity"] += 1
        a2 = alpha + float(rng.uniform(0, 1))
        m1 = y != x
        m2 = _fwd(state.with_alpha(a2), x) != x
        if np.any(m1 & ~m2):
            fails["alpha_nesting"] += 1
        # power-of-two scales keep every product exact
        s = float(2.0 ** rng.integers(-4, 5))
        scaled = SparsifierState(mu * s, sigma * s, alpha=alpha, centering=centering,
                                 global_mu=state.global_mu * s)
        if not np.array_equal(_fwd(scaled, x * s), y * s):
            fails["scale_equivariance"] += 1
        perm = rng.permutation(c)
        permuted = SparsifierState(mu[perm], sigma[perm], alpha=alpha, centering=centering,
                                   global_mu=state.global_mu)
        if not np.array_equal(_fwd(permuted, x[:, perm]), y[:, perm]):
            fails["permutation_equivariance"] += 1
        cen = state.center()[None, :, None, None]
        if (y == cen).sum() < (x == cen).sum():
            fails["mass_concentration"] += 1
    return fails


def _fwd(state, x):
    return sparsify_forward(state, x)


# ---------------------------------------------------------------------- prox
GRID_STEP = 1e-4
GRID = np.arange(-30000, 30001) * GRID_STEP  # [-3, 3] at resolution 1e-4
CANDIDATES = np.concatenate([[0.0], GRID[GRID != 0]])  # zero first: argmin ties go to 0


def brute_force_prox(v, t):
    """Coordinate-wise grid minimiser of t·‖x‖₀ + ½‖x − v‖² over CANDIDATES."""
    out = np.empty_like(v)
    for i, vi in enumerate(v):
        cost = t * (CANDIDATES != 0) + 0.5 * (CANDIDATES - vi) ** 2
        out[i] = CANDIDATES[int(np.argmin(cost))]
    return out


def random_prox_case(rng, dim=4):
    """v on the grid; t random, or an exact tie t = v_j²/2 for some draws."""
    v = GRID[rng.integers(0, GRID.size, dim)]
    if rng.random() < 0.2:
        t = float(v[int(rng.integers(0, dim))] ** 2 / 2)
    else:
        t = float(rng.uniform(0, 4.5))
    return v, t


# --------------------------------------------------------------- calibration
def calibration_oracle(total=1_000_000, channels=4, batch=(64, 8, 8), seed=0):
    """Stream ``total`` elements through the accumulator; compare with two-pass.

    Returns (max relative error of mean, of std, shard-merge bit-exact flag).
    Channels get different offsets and scales so the relative test is not
    dominated by a single magnitude.
    """
    from meansparse.sparsifier import CalibrationAccumulator

    rng = np.random.default_rng(seed)
    per_batch = batch[0] * channels * batch[1] * batch[2]
    n_batches = -(-total // per_batch)
    offsets = rng.uniform(-5, 5, channels)
    scales = rng.uniform(0.1, 3, channels)
    batches = [offsets[None, :, None, None] + scales[None, :, None, None]
               * rng.standard_normal((batch[0], channels) + batch[1:]) for _ in range(n_batches)]
    single = CalibrationAccumulator(channels)
    for b in batches:
        single.update(b)
    full = np.concatenate(batches).transpose(1, 0, 2, 3).reshape(channels, -1)
    mean2 = full.mean(axis=1)
    std2 = np.sqrt(((full - mean2[:, None]) ** 2).mean(axis=1))
    state = single.finalize()
    err_mu = float(np.max(np.abs(state.mu - mean2) / np.abs(mean2)))
    err_sd = float(np.max(np.abs(state.sigma - std2) / std2))
    # shards aligned to a power-of-two batch count, merged left to right
    shard = 1 << max(0, (n_batches // 4).bit_length() - 1)
    accs = []
    for s in range(0, n_batches, shard):
        a = CalibrationAccumulator(channels)
        for b in batches[s:s + shard]:
            a.update(b)
        accs.append(a)
    merged = accs[0]
    for a in accs[1:]:
        merged.merge(a)
    m = merged.finalize()
    exact = (merged.count == single.count and np.array_equal(m.mu, state.mu)
             and np.array_equal(m.sigma, state.sigma))
    return err_mu, err_sd, exact, n_batches * per_batch


# acceptance lines, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE_RESULTS = {}
