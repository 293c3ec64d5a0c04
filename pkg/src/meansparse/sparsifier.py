"""Mean-centred feature sparsification.

For channel ``ch`` with centre ``c`` and threshold ``Th = alpha * sigma_ch``::

    out = c    if |a_in - c| <= Th     (blocked band, boundary included)
    out = a_in otherwise

Gradients are exactly zero inside the blocked band and pass through unchanged
outside it. Statistics (per-channel mean and population std of the
pre-activation tensor, pooled over batch and spatial positions) come from one
calibration pass over the training data with every sparsifier disabled.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, serialize
from .data import iter_batches
from .errors import ConfigError, DataError, DataFormatError
from .layers import Module
from .tensor import Tensor, no_grad

SIGMA_FLOOR = 1e-8
CENTERINGS = ("channel", "zero", "global")


@dataclass(frozen=True)
class SparsifierState:
    mu: np.ndarray
    sigma: np.ndarray
    alpha: float = 0.0
    centering: str = "channel"
    enabled: bool = True
    sigma_floor: float = SIGMA_FLOOR
    global_mu: float = field(default=None)
    straight_through: bool = False

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape != sigma.shape:
            raise ConfigError(f"mu {mu.shape} and sigma {sigma.shape} differ")
        if self.centering not in CENTERINGS:
            raise ConfigError(f"centering must be one of {CENTERINGS}, got {self.centering!r}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if np.any(sigma < 0):
            raise ConfigError("sigma must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.global_mu is None:
            object.__setattr__(self, "global_mu", float(mu.mean()) if mu.size else 0.0)

    @property
    def channels(self):
        return self.mu.size

    def center(self):
        if self.centering == "channel":
            return self.mu
        if self.centering == "zero":
            return np.zeros_like(self.mu)
        return np.full_like(self.mu, self.global_mu)

    def thresholds(self):
        return self.alpha * self.sigma

    def with_alpha(self, alpha):
        return replace(self, alpha=float(alpha))

    def with_centering(self, centering):
        return replace(self, centering=centering)


# ---------------------------------------------------------------- the operator
def _flat(a, channels):
    if a.ndim < 2 or a.shape[1] != channels:
        raise ConfigError(f"input with shape {a.shape} does not have {channels} channels")
    return np.ascontiguousarray(a).reshape(a.shape[0], channels, -1)


def _pass_mask(state, a):
    _, keep = _kernels.sparsify_forward(_flat(a, state.channels), state.center(), state.thresholds())
    return keep.reshape(a.shape)


def sparsify_forward(state, a_in):
    """Apply the operator to a Tensor (recording a tape node) or a raw array."""
    raw = a_in.data if isinstance(a_in, Tensor) else np.asarray(a_in)
    if not state.enabled:
        return a_in
    out, keep = _kernels.sparsify_forward(_flat(raw, state.channels), state.center(),
                                          state.thresholds())
    out = out.reshape(raw.shape)
    if not isinstance(a_in, Tensor):
        return out
    keep = keep.reshape(raw.shape)
    if state.straight_through:
        back = lambda g: (g,)  # noqa: E731
    else:
        back = lambda g: (g * keep,)  # noqa: E731
    return Tensor._make(out, (a_in,), back, "sparsify")


def sparsify_backward(state, a_in, upstream_grad):
    """Input gradient: upstream where |a_in - c| > Th, zero in the blocked band."""
    a = a_in.data if isinstance(a_in, Tensor) else np.asarray(a_in)
    g = np.asarray(upstream_grad)
    if not state.enabled or state.straight_through:
        return g.copy()
    return g * _pass_mask(state, a)


class Sparsifier(Module):
    """Module wrapper placed in front of an activation; ``state`` is swapped, never mutated."""

    def __init__(self, state):
        self.state = state

    def forward(self, x):
        return sparsify_forward(self.state, x)


# ----------------------------------------------------------------- calibration
class CalibrationAccumulator:
    """Per-channel streaming mean / sum of squared deviations.

    Each ``update`` turns a batch into a leaf (count, mean, M2) and pushes it on
    a binary-counter stack, combining equal-size neighbours with the pairwise
    update of Chan, Golub & LeVeque. The reduction tree is therefore fixed by
    the batch sequence alone. Merging accumulators replays the other stack onto
    this one; when the left operand holds a multiple of 2^k leaves (k the
    other stack's top level) the result is bit-identical to streaming all
    batches through a single accumulator.
    """

    def __init__(self, channels):
        self.channels = channels
        self._stack = []  # (level, n, mean, m2)

    @staticmethod
    def _combine(a, b):
        la, na, ma, sa = a
        lb, nb, mb, sb = b
        n = na + nb
        d = mb - ma
        mean = ma + d * (nb / n)
        m2 = sa + sb + d * d * (na * nb / n)
        return max(la, lb) + 1, n, mean, m2

    def _push(self, node):
        stack = self._stack
        stack.append(node)
        while len(stack) >= 2 and stack[-1][0] == stack[-2][0]:
            b = stack.pop()
            a = stack.pop()
            stack.append(self._combine(a, b))

    def update(self, batch):
        batch = np.asarray(batch)
        if batch.shape[0] == 0:
            return
        flat = _flat(batch, self.channels)
        n, mean, m2 = _kernels.channel_moments(flat)
        self._push((0, n, np.asarray(mean, dtype=np.float64), np.asarray(m2, dtype=np.float64)))

    def merge(self, other):
        if other.channels != self.channels:
            raise ConfigError("cannot merge accumulators with different channel counts")
        for node in other._stack:
            self._push(node)
        return self

    def _collapsed(self):
        if not self._stack:
            return 0, np.zeros(self.channels), np.zeros(self.channels)
        acc = self._stack[-1]
        for node in reversed(self._stack[:-1]):
            acc = self._combine(node, acc)
        return acc[1], acc[2], acc[3]

    @property
    def count(self):
        return self._collapsed()[0]

    @property
    def mean(self):
        return self._collapsed()[1]

    @property
    def variance(self):
        n, _, m2 = self._collapsed()
        return m2 / n if n else np.zeros(self.channels)

    def finalize(self, sigma_floor=SIGMA_FLOOR, **kw):
        n, mean, m2 = self._collapsed()
        if n == 0:
            raise DataError("calibration saw no data")
        sigma = np.maximum(np.sqrt(np.maximum(m2 / n, 0.0)), sigma_floor)
        return SparsifierState(mean, sigma, sigma_floor=sigma_floor, **kw)


def calibrate(model, sites, dataset, batch_size=256, fraction=1.0, sigma_floor=SIGMA_FLOOR,
              seed=0, dtype=None):
    """One pass over ``dataset`` collecting pre-activation statistics at ``sites``.

    The model runs in eval mode with all sparsifiers disabled; the previous
    mode and sparsifier settings are restored afterwards. Returns
    ``{site: SparsifierState}`` with alpha = 0.
    """
    if len(dataset) == 0:
        raise DataError("calibration dataset is empty")
    registry = model.sites
    sites = sorted(set(int(s) for s in sites))
    for s in sites:
        if not 0 <= s < len(registry):
            raise ConfigError(f"site {s} out of range 0..{len(registry) - 1}")
    if not 0 < fraction <= 1:
        raise ConfigError("calibration fraction must lie in (0, 1]")
    if fraction < 1:
        keep = max(1, int(np.ceil(fraction * len(dataset))))
        dataset = dataset.subset(np.sort(np.random.default_rng(seed).permutation(len(dataset))[:keep]))

    accs = {}

    def probe(index, arr):
        if index in sites:
            if index not in accs:
                accs[index] = CalibrationAccumulator(arr.shape[1])
            accs[index].update(arr)

    was_training = model.training
    saved = [(act, act.sparsifier) for act in registry]
    model.eval()
    try:
        for act in registry:
            act.sparsifier = None
            act.probes.append(probe)
        if dtype is None:
            dtype = model.parameters()[0].dtype
        with no_grad():
            for x, _ in iter_batches(dataset, batch_size, dtype=dtype):
                model(Tensor(x))
    finally:
        for act, sp in saved:
            act.sparsifier = sp
            act.probes.remove(probe)
        model.train(was_training)
    return {s: accs[s].finalize(sigma_floor) for s in sites}


# ------------------------------------------------------------------- placement
@dataclass(frozen=True)
class Placement:
    kind: str  # all | single | cumulative | main | after
    index: int = None

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text in ("all", "main", "after"):
            return cls(text)
        if ":" in text:
            kind, _, idx = text.partition(":")
            if kind in ("single", "cumulative"):
                try:
                    return cls(kind, int(idx))
                except ValueError:
                    pass
        raise ConfigError(f"bad placement {text!r}; use all, main, after, single:<i> or cumulative:<i>")

    def sites(self, num_sites):
        if self.kind == "all":
            return list(range(num_sites))
        if self.kind == "main":
            return list(range(1, num_sites, 2))
        if self.kind == "after":
            return list(range(2, num_sites, 2))
        if self.index is None or not 0 <= self.index < num_sites:
            raise ConfigError(f"site index {self.index} out of range 0..{num_sites - 1}")
        if self.kind == "single":
            return [self.index]
        if self.kind == "cumulative":
            return list(range(self.index + 1))
        raise ConfigError(f"unknown placement kind {self.kind!r}")

    def __str__(self):
        return self.kind if self.index is None else f"{self.kind}:{self.index}"


def attach(model, placement, alpha, states, centering=None):
    """Insert sparsifiers before the selected activations, all sharing ``alpha``.

    Any previously attached sparsifiers are removed first. Mutates and returns
    ``model``.
    """
    if isinstance(placement, str):
        placement = Placement.parse(placement)
    selected = placement.sites(model.num_sites)
    missing = [s for s in selected if s not in states]
    if missing:
        raise ConfigError(f"no calibration statistics for sites {missing}")
    detach(model)
    for s in selected:
        st = states[s].with_alpha(alpha)
        if centering is not None:
            st = st.with_centering(centering)
        model.sites[s].sparsifier = Sparsifier(st)
    return model


def detach(model):
    for act in model.sites:
        act.sparsifier = None
    return model


def attached_sites(model):
    return [act.index for act in model.sites if act.sparsifier is not None]


def set_alpha(model, alpha):
    for act in model.sites:
        if act.sparsifier is not None:
            act.sparsifier.state = act.sparsifier.state.with_alpha(alpha)


def set_enabled(model, flag):
    for act in model.sites:
        if act.sparsifier is not None:
            act.sparsifier.state = replace(act.sparsifier.state, enabled=bool(flag))


# --------------------------------------------------------------- serialization
_STATES_MAGIC = b"MSSP"


def state_to_bytes(state):
    header = {"C": state.channels, "alpha": state.alpha, "centering": state.centering,
              "sigma_floor": state.sigma_floor, "global_mu": state.global_mu,
              "enabled": state.enabled, "straight_through": state.straight_through}
    raw = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    serialize.write_tensor(buf, state.mu)
    serialize.write_tensor(buf, state.sigma)
    return buf.getvalue()


def _read_state(fp):
    (n,) = struct.unpack("<Q", fp.read(8))
    header = json.loads(fp.read(n).decode())
    mu = serialize.read_tensor(fp)
    sigma = serialize.read_tensor(fp)
    if mu.size != header["C"]:
        raise DataFormatError(f"state header says C={header['C']} but mu has {mu.size} entries")
    return SparsifierState(mu, sigma, alpha=header["alpha"], centering=header["centering"],
                           enabled=header["enabled"], sigma_floor=header["sigma_floor"],
                           global_mu=header["global_mu"],
                           straight_through=header["straight_through"])


def state_from_bytes(raw):
    return _read_state(io.BytesIO(raw))


def save_states(path, states):
    with open(path, "wb") as fp:
        fp.write(_STATES_MAGIC)
        fp.write(struct.pack("<I", len(states)))
        for site in sorted(states):
            fp.write(struct.pack("<I", site))
            fp.write(state_to_bytes(states[site]))


def load_states(path):
    with open(path, "rb") as fp:
        if fp.read(4) != _STATES_MAGIC:
            raise DataFormatError(f"{path} is not a sparsifier-state file")
        (count,) = struct.unpack("<I", fp.read(4))
        out = {}
        for _ in range(count):
            (site,) = struct.unpack("<I", fp.read(4))
            out[site] = _read_state(fp)
    return out
