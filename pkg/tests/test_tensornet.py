import json

import numpy as np
import pydantic
import pytest
from scipy import ndimage

from src.errors import CorruptionError, ModelError, StructuralError, UsageError
from src.tensornet import (
    BatchNorm,
    Concat,
    Conv2d,
    LayerSpec,
    MaxPool2,
    Network,
    NetworkSpec,
    ReLU,
    Sigmoid,
    UpsampleNearest2,
)
from src.tensornet.gradcheck import check_gradients, numeric_gradient, relative_error

TOL = 1e-3


def _spec(*layers: LayerSpec, in_channels: int = 1, seed: int = 0) -> NetworkSpec:
    return NetworkSpec(in_channels=in_channels, layers=list(layers), seed=seed)


def _layer_input_check(layer, x: np.ndarray, h: float = 1e-6) -> float:
    weights = np.random.default_rng(1).normal(size=layer.forward(x, True).shape)
    layer.forward(x, True)
    analytic = layer.backward(weights)
    numeric = numeric_gradient(lambda v: float((layer.forward(v, True) * weights).sum()), x.copy(), h)
    return relative_error(analytic, numeric)


def test_conv_matches_zero_padded_correlation(rng):
    conv = Conv2d("c", 1, 1, 3, bias=False, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 1, 7, 9))
    expected = ndimage.correlate(x[0, 0], conv.params["weight"][0, 0], mode="constant", cval=0.0)
    np.testing.assert_allclose(conv.forward(x, False)[0, 0], expected, atol=1e-12)


def test_conv_rejects_even_kernel(rng):
    with pytest.raises(StructuralError):
        Conv2d("c", 1, 1, 4, rng=rng)
    with pytest.raises(pydantic.ValidationError):
        LayerSpec(kind="conv2d", name="c", out_channels=2, kernel=2)


def test_conv_gradients():
    net = Network(
        _spec(LayerSpec(kind="conv2d", name="c", out_channels=3), in_channels=2, seed=3), dtype=np.float64
    )
    x = np.random.default_rng(0).normal(size=(2, 2, 5, 6))
    weights = np.random.default_rng(1).normal(size=(2, 3, 5, 6))
    errors = check_gradients(net, x, weights, h=1e-5)
    assert max(errors.values()) < TOL, errors
    assert set(errors) == {"c.weight", "c.bias", "input"}


def test_conv_bn_sigmoid_gradients():
    net = Network(
        _spec(
            LayerSpec(kind="conv2d", name="c1", out_channels=3, bias=False),
            LayerSpec(kind="batch_norm", name="bn"),
            LayerSpec(kind="sigmoid", name="s"),
            LayerSpec(kind="conv2d", name="c2", out_channels=1, kernel=1),
            seed=5,
        ),
        dtype=np.float64,
    )
    x = np.random.default_rng(2).normal(size=(3, 1, 6, 6))
    weights = np.random.default_rng(3).normal(size=(3, 1, 6, 6))
    errors = check_gradients(net, x, weights, h=1e-5)
    assert max(errors.values()) < TOL, errors


def test_relu_gradient_away_from_kink():
    gen = np.random.default_rng(4)
    x = gen.uniform(0.1, 1.0, size=(2, 2, 4, 4)) * gen.choice([-1.0, 1.0], size=(2, 2, 4, 4))
    assert _layer_input_check(ReLU("r"), x) < TOL


def test_maxpool_gradient_with_separated_values():
    gen = np.random.default_rng(5)
    # distinct values 0.1 apart, far wider than the finite-difference step
    x = gen.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.1
    assert _layer_input_check(MaxPool2("p"), x.astype(np.float64)) < TOL


def test_maxpool_routes_to_first_maximum():
    pool = MaxPool2("p")
    x = np.array([[[[1.0, 3.0], [3.0, 0.0]]]])
    assert pool.forward(x, True)[0, 0, 0, 0] == 3.0
    np.testing.assert_array_equal(pool.backward(np.ones((1, 1, 1, 1)))[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_maxpool_needs_even_dims():
    with pytest.raises(StructuralError):
        MaxPool2("p").forward(np.zeros((1, 1, 3, 4)), False)


def test_upsample_and_sigmoid_gradients():
    x = np.random.default_rng(6).normal(size=(1, 2, 3, 3))
    assert _layer_input_check(UpsampleNearest2("u"), x) < TOL
    assert _layer_input_check(Sigmoid("s"), x) < TOL


def test_concat_splits_gradient():
    cat = Concat("cat", skip="a")
    x, skip = np.ones((1, 2, 2, 2)), np.zeros((1, 3, 2, 2))
    out = cat.forward_pair(x, skip, True)
    assert out.shape == (1, 5, 2, 2)
    dy = np.arange(20.0).reshape(1, 5, 2, 2)
    dx, dskip = cat.backward_pair(dy)
    np.testing.assert_array_equal(dx, dy[:, :2])
    np.testing.assert_array_equal(dskip, dy[:, 2:])
    with pytest.raises(StructuralError):
        cat.forward_pair(x, np.zeros((1, 3, 4, 4)), True)


def test_skip_network_gradients():
    net = Network(
        _spec(
            LayerSpec(kind="conv2d", name="e1", out_channels=2),
            LayerSpec(kind="batch_norm", name="e1_bn"),
            LayerSpec(kind="sigmoid", name="e1_act"),
            LayerSpec(kind="max_pool", name="pool"),
            LayerSpec(kind="conv2d", name="mid", out_channels=3),
            LayerSpec(kind="upsample_nearest", name="up"),
            LayerSpec(kind="concat", name="cat", skip="e1_act"),
            LayerSpec(kind="conv2d", name="head", out_channels=1, kernel=1),
            LayerSpec(kind="sigmoid", name="prob"),
            seed=11,
        ),
        dtype=np.float64,
    )
    x = np.random.default_rng(7).normal(size=(2, 1, 4, 4))
    weights = np.random.default_rng(8).normal(size=(2, 1, 4, 4))
    errors = check_gradients(net, x, weights, h=1e-6)
    assert max(errors.values()) < TOL, errors


def test_batchnorm_running_statistics():
    bn = BatchNorm("bn", 2, dtype=np.float64)
    x = np.random.default_rng(9).normal(loc=3.0, scale=2.0, size=(4, 2, 5, 5))
    y = bn.forward(x, True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    bn.buffers["running_mean"][:] = 1.0
    bn.buffers["running_var"][:] = 4.0
    np.testing.assert_allclose(bn.forward(np.full((1, 2, 1, 1), 3.0), False), 1.0, atol=1e-5)


def test_network_validates_inputs():
    net = Network(
        _spec(LayerSpec(kind="conv2d", name="c", out_channels=2), LayerSpec(kind="max_pool", name="p"), in_channels=2)
    )
    with pytest.raises(StructuralError):
        net.forward(np.zeros((2, 4, 4)))
    with pytest.raises(StructuralError):
        net.forward(np.zeros((1, 1, 4, 4)))
    with pytest.raises(StructuralError):
        net.forward(np.zeros((1, 2, 5, 4)))


def test_backward_needs_train_forward():
    net = Network(_spec(LayerSpec(kind="conv2d", name="c", out_channels=1)))
    with pytest.raises(UsageError):
        net.backward(np.zeros((1, 1, 4, 4)))
    net.forward(np.zeros((1, 1, 4, 4)), "eval")
    with pytest.raises(UsageError):
        net.backward(np.zeros((1, 1, 4, 4)))


def test_spec_validation():
    with pytest.raises(pydantic.ValidationError):
        _spec(LayerSpec(kind="relu", name="a"), LayerSpec(kind="relu", name="a"))
    with pytest.raises(pydantic.ValidationError):
        _spec(LayerSpec(kind="concat", name="cat", skip="later"), LayerSpec(kind="relu", name="later"))


def test_initialisation_is_seeded():
    spec = _spec(LayerSpec(kind="conv2d", name="c", out_channels=4), seed=21)
    a, b = Network(spec), Network(spec)
    np.testing.assert_array_equal(a.parameters()["c.weight"], b.parameters()["c.weight"])
    # He-normal: std sqrt(2 / fan_in) with fan_in = 9
    wide = Network(_spec(LayerSpec(kind="conv2d", name="c", out_channels=4000), seed=1))
    assert wide.parameters()["c.weight"].std() == pytest.approx(np.sqrt(2.0 / 9.0), rel=0.05)


def test_save_load_round_trip(tmp_path):
    spec = _spec(
        LayerSpec(kind="conv2d", name="c", out_channels=3, bias=False),
        LayerSpec(kind="batch_norm", name="bn"),
        LayerSpec(kind="relu", name="r"),
        LayerSpec(kind="conv2d", name="out", out_channels=1),
        seed=4,
    )
    net = Network(spec)
    x = np.random.default_rng(10).normal(size=(2, 1, 8, 8)).astype(np.float32)
    net.forward(x, "train")
    net.save(tmp_path / "m", metadata={"kind": "test"})

    loaded, metadata = Network.load(tmp_path / "m")
    assert metadata == {"kind": "test"}
    assert loaded.parameter_count() == net.parameter_count()
    np.testing.assert_array_equal(loaded.buffers()["bn.running_mean"], net.buffers()["bn.running_mean"])
    np.testing.assert_array_equal(loaded.forward(x), net.forward(x))

    descriptor = json.loads((tmp_path / "m" / "model.json").read_text(encoding="utf-8"))
    assert descriptor["count"] == net.parameter_count() + 2 * 3


def test_load_detects_tampering(tmp_path):
    net = Network(_spec(LayerSpec(kind="conv2d", name="c", out_channels=1)))
    net.save(tmp_path / "m")
    blob = tmp_path / "m" / "params.f32"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        Network.load(tmp_path / "m")
    with pytest.raises(ModelError):
        Network.load(tmp_path / "missing")


def test_set_parameters_checks_shapes():
    net = Network(_spec(LayerSpec(kind="conv2d", name="c", out_channels=2)))
    with pytest.raises(StructuralError):
        net.set_parameters({"c.weight": np.zeros((1, 1, 3, 3))})
    with pytest.raises(StructuralError):
        net.set_parameters({"nope.weight": np.zeros((2, 1, 3, 3))})


def _dncnn_like(seed: int = 13) -> Network:
    return Network(
        _spec(
            LayerSpec(kind="conv2d", name="c1", out_channels=3),
            LayerSpec(kind="relu", name="r1"),
            LayerSpec(kind="conv2d", name="c2", out_channels=3, bias=False),
            LayerSpec(kind="batch_norm", name="bn2"),
            LayerSpec(kind="relu", name="r2"),
            LayerSpec(kind="conv2d", name="c3", out_channels=1),
            seed=seed,
        ),
        dtype=np.float64,
    )


def test_zero_upstream_gives_zero_gradients():
    net = _dncnn_like()
    x = np.random.default_rng(14).normal(size=(2, 1, 6, 6))
    net.forward(x, "train")
    dx = net.backward(np.zeros((2, 1, 6, 6)))
    np.testing.assert_array_equal(dx, 0.0)
    for key, grad in net.gradients().items():
        np.testing.assert_array_equal(grad, 0.0, err_msg=key)


def test_duplicated_batch_doubles_parameter_gradients():
    # parameter gradients are summed over the batch; batch statistics are unchanged by duplication
    gen = np.random.default_rng(15)
    x = gen.normal(size=(2, 1, 6, 6))
    upstream = gen.normal(size=(2, 1, 6, 6))
    net = _dncnn_like()
    net.forward(x, "train")
    net.backward(upstream)
    single = {k: v.copy() for k, v in net.gradients().items()}

    net.forward(np.concatenate([x, x]), "train")
    net.backward(np.concatenate([upstream, upstream]))
    for key, grad in net.gradients().items():
        np.testing.assert_allclose(grad, 2.0 * single[key], rtol=1e-9, atol=1e-12, err_msg=key)
