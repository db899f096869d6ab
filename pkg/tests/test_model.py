import numpy as np
import pytest

from conftest import numeric_grad, rel_error, synthetic_corpus
from fxnet.model import (
    ModelFileError,
    NetworkSpec,
    TrainConfig,
    build,
    extract_features,
    load,
    predict,
    read_fxm,
    save,
    train,
    transfer_head,
)
from fxnet.optim import LossSpec
from fxnet.tensor import RngStream

SMALL = NetworkSpec(input_shape=(1, 16, 16), conv_filters=(4, 6), dense_units=16)


def params_bytes(model, prefix=""):
    return {k: v.tobytes() for k, v in model.named_parameters() if k.startswith(prefix)}


def test_default_shape_plan():
    model = build(NetworkSpec(), RngStream(0))
    shapes = dict(zip((l.name for l in model.layers), model.shapes()))
    assert shapes["conv1"] == (64, 48, 48)
    assert shapes["conv1_pool"] == (64, 24, 24)
    assert shapes["conv2_pool"] == (128, 12, 12)
    assert shapes["conv3_pool"] == (256, 6, 6)
    assert shapes["flatten"] == (6 * 6 * 256,) == (9216,)
    assert shapes["dense1"] == (512,)
    assert shapes["head"] == (8,)
    # runtime shapes agree with the declared plan
    record = {}
    model.forward(np.zeros((1, 1, 48, 48), dtype=np.float32), record=record)
    for name, shape in shapes.items():
        assert record[name].shape[1:] == shape


def test_dropout_sites_and_rates():
    model = build(NetworkSpec(), RngStream(0))
    assert model["conv_dropout"].p == 0.25
    assert model["dense_dropout"].p == 0.5
    names = [l.name for l in model.layers]
    assert names.index("conv3_pool") < names.index("conv_dropout") < names.index("dense1")
    assert names.index("dense1_relu") < names.index("dense_dropout") < names.index("head")


def test_build_is_deterministic():
    assert params_bytes(build(SMALL, RngStream(3))) == params_bytes(build(SMALL, RngStream(3)))
    assert params_bytes(build(SMALL, RngStream(3))) != params_bytes(build(SMALL, RngStream(4)))


def test_he_initialisation_statistics():
    model = build(NetworkSpec(), RngStream(0))
    w = model["conv3"].params["weight"]
    assert abs(w.std() / np.sqrt(2.0 / (128 * 25)) - 1.0) < 0.05
    assert not model["conv3"].params["bias"].any()


def test_head_size_limits():
    NetworkSpec(head_units=50, head_activation="sigmoid")
    with pytest.raises(ValueError):
        NetworkSpec(head_units=51, head_activation="sigmoid")


def test_shape_plan_rejects_odd_pooling():
    from fxnet.layers import ShapePlanError

    with pytest.raises(ShapePlanError):
        build(NetworkSpec(input_shape=(1, 20, 20)), RngStream(0))  # 20 -> 10 -> 5 -> odd


def test_whole_network_gradient(f64):
    spec = NetworkSpec(input_shape=(1, 8, 8), conv_filters=(2, 3), dense_units=5, head_units=4)
    model = build(spec, RngStream(1))
    rng = np.random.default_rng(0)
    for layer in model.layers:
        if "bias" in layer.params:
            layer.params["bias"][:] = rng.normal(scale=0.1, size=layer.params["bias"].shape)
    x = rng.random((2, 1, 8, 8))
    y = np.array([1, 3])
    from fxnet.optim import softmax_cross_entropy

    loss = lambda: softmax_cross_entropy(model.forward(x), y)[0]
    _, g = softmax_cross_entropy(model.forward(x), y)
    gx = model.backward(g)
    assert rel_error(gx, numeric_grad(loss, x)) <= 1e-5
    for name, p in model.named_parameters():
        layer, pname = name.split(".")
        assert rel_error(model[layer].grads[pname], numeric_grad(loss, p)) <= 1e-5, name


def test_predict_probabilities_and_features():
    model = build(NetworkSpec(), RngStream(0))
    img = np.random.default_rng(0).random((1, 48, 48)).astype(np.float32)
    p = predict(model, img)
    assert p.shape == (8,)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert extract_features(model, img).shape == (512,)
    with pytest.raises(KeyError):
        extract_features(model, img, layer="nope")


def test_predict_is_pure():
    model = build(SMALL, RngStream(0))
    x = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(predict(model, x), predict(model, x))


def test_untrained_predictions_roughly_uniform():
    # smoke check only: averaged over symmetric noise inputs no class dominates completely
    model = build(NetworkSpec(), RngStream(0))
    x = np.random.default_rng(1).random((32, 1, 48, 48)).astype(np.float32)
    mean = predict(model, x).mean(axis=0)
    assert mean.max() < 0.9


def test_training_learns_and_is_deterministic():
    x, y = synthetic_corpus(32, 4, 16, seed=2)
    spec = NetworkSpec(input_shape=(1, 16, 16), conv_filters=(4, 6), dense_units=16, head_units=4)
    runs = []
    for _ in range(2):
        model = build(spec, RngStream(0))
        trace = train(model, x, y, TrainConfig(epochs=15, batch_size=8, seed=5))
        runs.append(([e.loss for e in trace], params_bytes(model)))
    assert runs[0] == runs[1]
    losses = runs[0][0]
    assert losses[-1] < losses[0]
    assert [e.epoch for e in trace] == list(range(len(trace)))


def test_loss_decreases_over_first_steps():
    x, y = synthetic_corpus(16, 4, 16, seed=3)
    spec = NetworkSpec(input_shape=(1, 16, 16), conv_filters=(4, 6), dense_units=16, head_units=4)
    drops = []
    for seed in range(5):
        model = build(spec, RngStream(seed))
        trace = train(model, x, y, TrainConfig(epochs=10, batch_size=16, seed=seed, eval_train=False))
        drops.append(trace[-1].loss < trace[0].loss)
    assert sum(drops) >= 3  # median over five seeds


def test_label_out_of_range():
    model = build(SMALL, RngStream(0))
    with pytest.raises(ValueError, match="outside head range"):
        train(model, np.zeros((2, 1, 16, 16), dtype=np.float32), np.array([0, 8]), TrainConfig())


def test_nan_loss_aborts():
    from fxnet.tensor import NonFiniteError

    model = build(SMALL, RngStream(0))
    model["head"].params["weight"][:] = np.nan
    with pytest.raises(NonFiniteError):
        train(model, np.zeros((2, 1, 16, 16), dtype=np.float32), np.array([0, 1]), TrainConfig(eval_train=False))


def test_frozen_all_is_noop():
    model = build(SMALL, RngStream(0))
    before = params_bytes(model)
    x, y = synthetic_corpus(8, 8, 16)
    train(model, x, y, TrainConfig(epochs=2, batch_size=4, frozen=frozenset({"all"})))
    assert params_bytes(model) == before


def test_unknown_frozen_layer():
    model = build(SMALL, RngStream(0))
    with pytest.raises(KeyError):
        train(model, np.zeros((1, 1, 16, 16), dtype=np.float32), np.array([0]),
              TrainConfig(frozen=frozenset({"conv9"})))


def test_transfer_copies_trunk_and_freezes_conv():
    source = build(SMALL, RngStream(0))
    target = transfer_head(source, 44, "sigmoid", RngStream(1))
    assert target.spec.head_units == 44
    assert params_bytes(target, "conv") == params_bytes(source, "conv")
    assert params_bytes(target, "dense1") == params_bytes(source, "dense1")
    x, _ = synthetic_corpus(8, 8, 16)
    au = np.random.default_rng(0).integers(0, 2, size=(8, 44))
    train(target, x, au, TrainConfig(epochs=100, batch_size=8, max_steps=100, loss=LossSpec("sparse_au"),
                                      frozen=frozenset({"conv"}), eval_train=False))
    assert params_bytes(target, "conv") == params_bytes(source, "conv")
    assert params_bytes(target, "dense1") != params_bytes(source, "dense1")
    with pytest.raises(ValueError):
        transfer_head(source, 51, "sigmoid", RngStream(1))


def test_intensity_head_rounds_to_0_5():
    from fxnet.model import decide

    model = build(NetworkSpec(input_shape=(1, 16, 16), conv_filters=(4,), dense_units=8, head_units=3,
                              head_activation="linear"), RngStream(0))
    np.testing.assert_array_equal(decide(model, np.array([[-0.7, 2.4, 9.0]])), [[0, 2, 5]])


def test_save_load_round_trip(tmp_path):
    model = build(SMALL, RngStream(0), meta={"seed": 0, "class_names": list("abcdefgh")})
    a, b = tmp_path / "a.fxm", tmp_path / "b.fxm"
    save(model, a)
    loaded = load(a)
    save(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.class_names == list("abcdefgh")
    header, arrays = read_fxm(a)
    assert sum(arr.size for _, arr in arrays) == model.parameter_count()


def test_payload_length_is_four_bytes_per_parameter(tmp_path):
    import struct

    model = build(SMALL, RngStream(0))
    path = tmp_path / "m.fxm"
    save(model, path)
    blob = path.read_bytes()
    assert blob[:4] == b"FXM1"
    _, hlen = struct.unpack("<II", blob[4:12])
    assert len(blob) - 12 - hlen == 4 * model.parameter_count()
    # weights precede biases, layers in declared order
    names = [n for n, _ in model.named_parameters()]
    assert names[:4] == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "m.fxm"
    save(build(SMALL, RngStream(0)), path)
    blob = bytearray(path.read_bytes())
    blob[0:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFileError, match="FXM1"):
        load(path)


def test_truncated_payload_rejected(tmp_path):
    model = build(SMALL, RngStream(0))
    path = tmp_path / "m.fxm"
    save(model, path)
    path.write_bytes(path.read_bytes()[:-10])
    expected = 4 * model.parameter_count()
    with pytest.raises(ModelFileError, match=f"{expected - 10} bytes, expected {expected}"):
        load(path)


def test_unknown_version_rejected(tmp_path):
    import struct

    path = tmp_path / "m.fxm"
    save(build(SMALL, RngStream(0)), path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFileError, match="version 99"):
        load(path)
