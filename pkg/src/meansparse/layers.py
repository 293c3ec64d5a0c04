"""Layers and activation functions.

Parametric activations
----------------------
PSiLU(x)  = x · sigmoid(β x),                β > 0
PSSiLU(x) = x · (sigmoid(β x) − a) / (1 − a),  β > 0, 0 ≤ a < 1

PSSiLU is the parametric shifted SiLU used in robust-training work; with
a = 0 it reduces to PSiLU. Both β and a are trainable leaves, one pair per
activation site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ParameterDomainError
from .tensor import Tensor, get_default_dtype

ACTIVATIONS = ("relu", "elu", "gelu", "silu", "psilu", "pssilu")
_PARAMETRIC = {"psilu": ("beta",), "pssilu": ("beta", "shift")}

# projection box for trainable activation parameters after each SGD step
_BETA_MIN = 1e-3
_SHIFT_MAX = 0.99


class Module:
    """Minimal container with recursive parameter discovery (declaration order).

    Attributes whose names start with an underscore are not traversed, which is
    how a model keeps secondary references (e.g. a site registry) to submodules
    without listing their parameters twice.
    """

    training = True

    def children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield v

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def _own_params(self):
        return []

    def _own_buffers(self):
        return ()

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_modules(f"{prefix}{key}.{i}.")

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for name, p in mod._own_params():
                yield prefix + name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name in mod._own_buffers():
                yield prefix + name, getattr(mod, name)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype)
        for prefix, mod in self.named_modules():
            for name in mod._own_buffers():
                setattr(mod, name, np.array(state[prefix + name], dtype=np.float64))

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def project_(self):
        """Clamp constrained parameters back into their domain."""
        for m in self.modules():
            m._project()

    def _project(self):
        pass

    def __call__(self, x):
        return self.forward(x)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or get_default_dtype()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)

    def _own_params(self):
        return [("weight", self.weight)]

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or get_default_dtype()
        self.weight = Tensor(_he_uniform(rng, (din, dout), din, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def _own_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return ops.bias_add(ops.matmul(x, self.weight), self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=None):
        if eps <= 0:
            raise ConfigError("batch-norm epsilon must be positive")
        dtype = dtype or get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def _own_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _own_buffers(self):
        return ("running_mean", "running_var")

    def forward(self, x):
        if self.training:
            out, m, v = ops.batch_norm_train(x, self.gamma, self.beta, self.eps)
            count = x.size // x.shape[1]
            unbiased = v * count / max(count - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * m
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            return out
        return ops.batch_norm_eval(x, self.gamma, self.beta, self.running_mean.astype(x.dtype),
                                   self.running_var.astype(x.dtype), self.eps)


class Normalize(Module):
    """Fixed per-channel standardisation, so attacks work in raw [0, 1] pixel units."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ConfigError("normalisation std must be positive")

    def forward(self, x):
        return ops.channel_affine(x, 1.0 / self.std, -self.mean / self.std)


@dataclass
class ActivationKind:
    tag: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.tag!r}; choose from {ACTIVATIONS}")
        expected = _PARAMETRIC.get(self.tag, ())
        if set(self.params) != set(expected):
            raise ConfigError(f"{self.tag} takes parameters {expected}, got {tuple(self.params)}")

    @classmethod
    def make(cls, tag, beta=1.0, shift=0.1, dtype=None):
        """Fresh kind with trainable leaves for parametric tags."""
        dtype = dtype or get_default_dtype()
        params = {}
        if tag in _PARAMETRIC:
            params["beta"] = Tensor(np.asarray(beta, dtype=dtype), requires_grad=True)
            if tag == "pssilu":
                params["shift"] = Tensor(np.asarray(shift, dtype=dtype), requires_grad=True)
        return cls(tag, params)

    @property
    def parametric(self):
        return bool(self.params)


def activation_eval(kind, x):
    tag = kind.tag
    if tag == "relu":
        return ops.relu(x)
    if tag == "elu":
        return ops.elu(x)
    if tag == "gelu":
        return ops.gelu(x)
    if tag == "silu":
        return ops.silu(x)
    if tag == "psilu":
        return ops.psilu(x, kind.params["beta"])
    if tag == "pssilu":
        return ops.pssilu(x, kind.params["beta"], kind.params["shift"])
    raise ConfigError(f"unknown activation {tag!r}")


class Activation(Module):
    """An indexed activation site.

    ``sparsifier`` (when set) runs on the pre-activation tensor right before the
    nonlinearity; ``probes`` receive the raw pre-activation array and are used
    by calibration.
    """

    def __init__(self, tag, index, role, dtype=None):
        self.kind = ActivationKind.make(tag, dtype=dtype)
        self.index = index
        self.role = role
        self.sparsifier = None
        self.probes = []

    def _own_params(self):
        return sorted(self.kind.params.items())

    def _project(self):
        p = self.kind.params
        if "beta" in p:
            p["beta"].data = np.maximum(p["beta"].data, _BETA_MIN).astype(p["beta"].dtype)
        if "shift" in p:
            p["shift"].data = np.clip(p["shift"].data, 0.0, _SHIFT_MAX).astype(p["shift"].dtype)

    def forward(self, x):
        for probe in self.probes:
            probe(self.index, x.data)
        if self.sparsifier is not None:
            x = self.sparsifier(x)
        return activation_eval(self.kind, x)


def check_parameter_domain(kind):
    p = kind.params
    if "beta" in p and not float(p["beta"].data) > 0:
        raise ParameterDomainError("beta must be positive")
    if "shift" in p and not 0 <= float(p["shift"].data) < 1:
        raise ParameterDomainError("shift must lie in [0, 1)")
