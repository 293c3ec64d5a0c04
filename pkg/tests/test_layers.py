import numpy as np
import pytest

from meansparse.errors import ConfigError, DataFormatError, ParameterDomainError
from meansparse.layers import ActivationKind, BatchNorm2d, activation_eval, check_parameter_domain
from meansparse.model import (LinearModel, MiniResNet, NetSpec, build_mini_resnet, load_checkpoint,
                              param_count, read_checkpoint_header, save_checkpoint)
from meansparse.tensor import Tensor, no_grad


def act(tag, x, **kw):
    return activation_eval(ActivationKind.make(tag, **kw), Tensor(np.asarray(x, float))).data


def test_activation_examples():
    assert act("relu", [-2.0]).tolist() == [0.0]
    assert act("silu", [0.0]).tolist() == [0.0]
    assert abs(act("psilu", [1.0], beta=1.0)[0] - 0.7310585786300049) < 1e-15
    assert abs(act("psilu", [1.0], beta=1.0)[0] - act("silu", [1.0])[0]) == 0
    assert act("elu", [1.5]).tolist() == [1.5]
    assert abs(act("elu", [-1.0])[0] - (np.exp(-1.0) - 1)) < 1e-15
    assert abs(act("gelu", [1.0])[0] - 0.8413447460685429) < 1e-15


def test_psilu_large_beta_limit():
    vals = [act("psilu", [1.0], beta=b)[0] for b in (1, 10, 100)]
    assert vals[0] < vals[1] < vals[2] <= 1.0
    assert abs(vals[2] - 1.0) < 1e-12


def test_pssilu_definition():
    x = np.linspace(-3, 3, 13)
    beta, a = 1.7, 0.2
    s = 1 / (1 + np.exp(-beta * x))
    np.testing.assert_allclose(act("pssilu", x, beta=beta, shift=a), x * (s - a) / (1 - a), rtol=1e-14)
    np.testing.assert_allclose(act("pssilu", x, beta=beta, shift=0.0), act("psilu", x, beta=beta),
                               rtol=1e-15)


@pytest.mark.parametrize("tag", ["psilu", "pssilu"])
def test_parametric_domain_errors(tag):
    with pytest.raises(ParameterDomainError):
        act(tag, [1.0], beta=0.0)
    with pytest.raises(ParameterDomainError):
        check_parameter_domain(ActivationKind.make(tag, beta=-1.0))


def test_pssilu_shift_domain():
    with pytest.raises(ParameterDomainError):
        act("pssilu", [1.0], shift=1.0)


def test_unknown_activation():
    with pytest.raises(ConfigError):
        ActivationKind.make("tanh")


def test_monotonicity_on_grids():
    x = np.linspace(-5, 5, 2001)
    assert np.all(np.diff(act("relu", x)) >= 0)
    xs = np.linspace(1.28, 10, 2001)
    assert np.all(np.diff(act("silu", xs)) > 0)


@pytest.mark.parametrize("blocks,sites", [(1, 3), (4, 9), (8, 17)])
def test_site_counts(blocks, sites):
    spec = NetSpec(input_shape=(3, 8, 8), blocks=blocks)
    model = build_mini_resnet(spec, seed=0)
    assert model.num_sites == sites == spec.num_sites
    assert [s.index for s in model.sites] == list(range(sites))
    assert [s.role for s in model.sites] == ["stem"] + ["main", "after"] * blocks


def test_default_model_size():
    model = MiniResNet(NetSpec(), seed=0)
    assert model.spec.widths == (16, 16, 32, 64)
    assert 50_000 <= param_count(model) <= 150_000


def test_zero_input_forward():
    model = MiniResNet(NetSpec(input_shape=(3, 8, 8), num_classes=7), seed=0).eval()
    with no_grad():
        out = model(Tensor(np.zeros((5, 3, 8, 8))))
    assert out.shape == (5, 7) and np.all(np.isfinite(out.data))


def test_seeded_init():
    spec = NetSpec(input_shape=(3, 8, 8))
    a, b, c = MiniResNet(spec, seed=3), MiniResNet(spec, seed=3), MiniResNet(spec, seed=4)
    for (n, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert not all(np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters())
                   if pa.ndim == 4)


def test_he_uniform_bounds():
    model = MiniResNet(NetSpec(input_shape=(3, 8, 8)), seed=0)
    w = model.stem.weight.data
    bound = np.sqrt(6.0 / (3 * 3 * 3))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound


def test_site_parity_by_graph_inspection(rng):
    """Odd sites see the main-path tensor, even sites (>0) the residual sum."""
    model = MiniResNet(NetSpec(input_shape=(3, 8, 8), blocks=4), seed=1).eval()
    pre = {}
    for s in model.sites:
        s.probes.append(lambda i, a: pre.__setitem__(i, a.copy()))
    x = rng.random((2, 3, 8, 8))
    with no_grad():
        model(Tensor(x))
        for b, blk in enumerate(model.blocks, start=1):
            x_in = Tensor(np.maximum(pre[2 * b - 2], 0))
            main_in = blk.bn1(blk.conv1(x_in)).data
            np.testing.assert_allclose(pre[2 * b - 1], main_in, rtol=1e-12, atol=1e-12)
            main = blk.bn2(blk.conv2(Tensor(np.maximum(pre[2 * b - 1], 0)))).data
            short = x_in.data if blk.shortcut is None else blk.shortcut[1](blk.shortcut[0](x_in)).data
            np.testing.assert_allclose(pre[2 * b], main + short, rtol=1e-12, atol=1e-12)
            # the main-path tensor alone is not what the even site sees
            assert not np.allclose(pre[2 * b], main)


def test_batchnorm_eval_is_affine(rng):
    bn = BatchNorm2d(3)
    bn.running_mean = rng.standard_normal(3)
    bn.running_var = rng.uniform(0.5, 2, 3)
    bn.gamma.data = rng.standard_normal(3)
    bn.eval()
    x = rng.standard_normal((4, 3, 2, 2))
    y = bn(Tensor(x)).data
    y2 = bn(Tensor(2 * x)).data
    y0 = bn(Tensor(np.zeros_like(x))).data
    np.testing.assert_allclose(y2 - y0, 2 * (y - y0), rtol=1e-12, atol=1e-12)
    assert np.array_equal(bn(Tensor(x)).data, y)


def test_batchnorm_running_stats(rng):
    bn = BatchNorm2d(2, momentum=0.1)
    x = rng.standard_normal((8, 2, 3, 3)) * 2 + 1
    bn(Tensor(x))
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v, rtol=1e-12)


def test_activation_projection():
    model = MiniResNet(NetSpec(input_shape=(3, 8, 8), blocks=1, activation="pssilu"), seed=0)
    act0 = model.sites[0]
    act0.kind.params["beta"].data = np.asarray(-1.0)
    act0.kind.params["shift"].data = np.asarray(1.5)
    model.project_()
    assert float(act0.kind.params["beta"].data) > 0
    assert 0 <= float(act0.kind.params["shift"].data) < 1


def test_checkpoint_round_trip(tmp_path, rng):
    spec = NetSpec(input_shape=(3, 8, 8), blocks=2, activation="psilu")
    model = MiniResNet(spec, seed=5)
    model(Tensor(rng.random((4, 3, 8, 8))))  # move running stats off their defaults
    model.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"note": "x"})
    header = read_checkpoint_header(path)
    assert header["seed"] == 5 and header["activation"] == "psilu" and header["extra"] == {"note": "x"}
    loaded, _ = load_checkpoint(path)
    loaded.eval()
    x = rng.random((3, 3, 8, 8))
    with no_grad():
        assert np.array_equal(model(Tensor(x)).data, loaded(Tensor(x)).data)
    for (n1, a), (n2, b) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert n1 == n2 and np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(DataFormatError):
        load_checkpoint(p)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetSpec(blocks=0)
    with pytest.raises(ConfigError):
        NetSpec(num_classes=1)
    with pytest.raises(ConfigError):
        NetSpec(activation="tanh")
    spec = NetSpec(blocks=4)
    assert NetSpec.from_json(spec.to_json()) == spec
    assert [k for k, _ in spec.layer_list()].count("residual-block") == 4


def test_linear_model_shapes(rng):
    m = LinearModel((3, 4, 4), 5)
    assert m(Tensor(rng.random((2, 3, 4, 4)))).shape == (2, 5)
    assert m.num_sites == 0
