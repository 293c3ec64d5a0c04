"""Mini-ResNet builder with indexed activation sites, plus checkpoint I/O.

Site indexing: 0 is the stem activation; block b (1-based) owns site 2b-1 on
its main path and site 2b after the residual addition. B blocks give 2B+1
sites.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops, serialize
from .errors import ConfigError, DataFormatError
from .layers import ACTIVATIONS, Activation, BatchNorm2d, Conv2d, Linear, Module, Normalize
from .tensor import get_default_dtype

_DEFAULT_WIDTHS = {1: (16,), 2: (16, 32), 3: (16, 32, 64), 4: (16, 16, 32, 64)}


def default_widths(blocks):
    if blocks in _DEFAULT_WIDTHS:
        return _DEFAULT_WIDTHS[blocks]
    return tuple(16 * 2 ** min(3, (4 * i) // blocks) for i in range(blocks))


@dataclass
class NetSpec:
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    blocks: int = 4
    widths: tuple = ()
    activation: str = "relu"
    input_mean: tuple = (0.0, 0.0, 0.0)
    input_std: tuple = (1.0, 1.0, 1.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.widths:
            self.widths = default_widths(self.blocks)
        self.widths = tuple(int(w) for w in self.widths)
        self.input_mean = tuple(float(v) for v in self.input_mean)
        self.input_std = tuple(float(v) for v in self.input_std)
        self.validate()

    def validate(self):
        if self.blocks < 1:
            raise ConfigError("need at least one residual block")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.widths) != self.blocks:
            raise ConfigError(f"widths has {len(self.widths)} entries for {self.blocks} blocks")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        c = self.input_shape[0]
        if len(self.input_mean) != c or len(self.input_std) != c:
            raise ConfigError("input normalisation must have one entry per input channel")

    @property
    def num_sites(self):
        return 2 * self.blocks + 1

    def layer_list(self):
        """Ordered (kind, detail) description of the network."""
        layers = [("normalize", {}), ("conv", {"out": self.widths[0], "k": 3}),
                  ("batch-norm", {}), ("activation-site", {"index": 0})]
        prev = self.widths[0]
        for b, w in enumerate(self.widths, start=1):
            layers.append(("residual-block", {"in": prev, "out": w, "stride": _stride(b, prev, w),
                                              "sites": (2 * b - 1, 2 * b)}))
            prev = w
        layers += [("pool", {"kind": "global-avg"}), ("linear", {"out": self.num_classes})]
        return layers

    def to_json(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def _stride(b, cin, cout):
    return 2 if b > 1 and cout != cin else 1


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, tag, main_site, after_site, rng, dtype):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.act1 = Activation(tag, main_site, "main", dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = [Conv2d(cin, cout, 1, stride, 0, rng=rng, dtype=dtype),
                             BatchNorm2d(cout, dtype=dtype)]
        self.act2 = Activation(tag, after_site, "after", dtype=dtype)

    def forward(self, x):
        h = self.act1(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = x
        if self.shortcut is not None:
            s = self.shortcut[1](self.shortcut[0](x))
        return self.act2(h + s)


class MiniResNet(Module):
    def __init__(self, spec, seed=0, dtype=None):
        spec.validate()
        dtype = dtype or get_default_dtype()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.seed = seed
        self.norm = Normalize(spec.input_mean, spec.input_std)
        w0 = spec.widths[0]
        self.stem = Conv2d(spec.input_shape[0], w0, 3, 1, 1, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(w0, dtype=dtype)
        self.stem_act = Activation(spec.activation, 0, "stem", dtype=dtype)
        blocks = []
        prev = w0
        for b, w in enumerate(spec.widths, start=1):
            blocks.append(BasicBlock(prev, w, _stride(b, prev, w), spec.activation,
                                     2 * b - 1, 2 * b, rng, dtype))
            prev = w
        self.blocks = blocks
        self.fc = Linear(prev, spec.num_classes, rng=rng, dtype=dtype)
        self._sites = [self.stem_act]
        for blk in blocks:
            self._sites += [blk.act1, blk.act2]

    @property
    def sites(self):
        return list(self._sites)

    @property
    def num_sites(self):
        return len(self._sites)

    def forward(self, x):
        h = self.stem_act(self.stem_bn(self.stem(self.norm(x))))
        for blk in self.blocks:
            h = blk(h)
        return self.fc(ops.global_avg_pool(h))


class LinearModel(Module):
    """Flatten-then-affine classifier; handy for analytic attack checks."""

    def __init__(self, input_shape, num_classes, seed=0, dtype=None):
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.fc = Linear(int(np.prod(input_shape)), num_classes, rng=rng, dtype=dtype)
        self._sites = []

    @property
    def sites(self):
        return []

    @property
    def num_sites(self):
        return 0

    def forward(self, x):
        return self.fc(ops.flatten(x))


def build_mini_resnet(spec, seed=0, dtype=None):
    return MiniResNet(spec, seed=seed, dtype=dtype)


def param_count(model):
    return int(sum(p.size for p in model.parameters()))


# --------------------------------------------------------------- checkpoints
_CKPT_MAGIC = b"MSCK"


def save_checkpoint(path, model, extra=None):
    """Header JSON (spec, seed, activation, tensor names) then MSTN tensors in order."""
    state = model.state_dict()
    names = list(state)
    header = {
        "spec": model.spec.to_json(),
        "seed": int(model.seed),
        "activation": model.spec.activation,
        "dtype": str(model.parameters()[0].dtype),
        "tensors": names,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(_CKPT_MAGIC)
        fp.write(struct.pack("<Q", len(raw)))
        fp.write(raw)
        for name in names:
            serialize.write_tensor(fp, state[name])


def read_checkpoint_header(path):
    with open(path, "rb") as fp:
        return _read_header(fp)


def _read_header(fp):
    if fp.read(4) != _CKPT_MAGIC:
        raise DataFormatError("not a meansparse checkpoint")
    (n,) = struct.unpack("<Q", fp.read(8))
    return json.loads(fp.read(n).decode())


def load_checkpoint(path):
    with open(path, "rb") as fp:
        header = _read_header(fp)
        state = {name: serialize.read_tensor(fp) for name in header["tensors"]}
    spec = NetSpec.from_json(header["spec"])
    model = MiniResNet(spec, seed=header["seed"], dtype=np.dtype(header["dtype"]).type)
    model.load_state_dict(state)
    return model, header
