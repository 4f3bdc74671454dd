import json
import struct

import numpy as np
import pytest

from sparse_sieve import tensor as T
from sparse_sieve.models import (
    CheckpointError,
    CheckpointVersionError,
    Model,
    ModelSpec,
    SpecError,
    accuracy,
    build_model,
    forward_logits,
    least_likely_class,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)


def fixed_logits_model(logits):
    # one-feature MLP whose logits equal the bias vector
    logits = np.asarray(logits, dtype=np.float64)
    spec = ModelSpec("mlp", (), len(logits), (1, 1, 1))
    return Model(spec, {"dense0.weight": np.zeros((1, len(logits))), "dense0.bias": logits})


def test_same_seed_same_params():
    a = build_model(ModelSpec.mlp(), 3)
    b = build_model(ModelSpec.mlp(), 3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_mlp_param_shapes():
    model = build_model(ModelSpec.mlp((128,)), 0)
    shapes = {k: v.shape for k, v in model.params.items()}
    assert shapes == {
        "dense0.weight": (784, 128),
        "dense0.bias": (128,),
        "dense1.weight": (128, 10),
        "dense1.bias": (10,),
    }


def test_different_seeds_differ():
    a = build_model(ModelSpec.tiny_cnn(), 0)
    b = build_model(ModelSpec.tiny_cnn(), 1)
    assert all(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_invalid_spec():
    with pytest.raises(SpecError):
        ModelSpec("mlp", (0,), 10, (1, 28, 28))
    with pytest.raises(SpecError):
        ModelSpec("resnet", (8,), 10, (1, 28, 28))


def test_zero_final_layer_gives_equal_logits(rng):
    model = build_model(ModelSpec.tiny_cnn(), 0)
    model.params["dense0.weight"][:] = 0
    model.params["dense0.bias"][:] = 0
    z = forward_logits(model, rng.uniform(size=(1, 28, 28))).data
    assert np.all(z == z[0])


def test_identical_images_identical_rows(rng):
    model = build_model(ModelSpec.tiny_cnn(), 0)
    x = np.repeat(rng.uniform(size=(1, 1, 28, 28)), 3, axis=0)
    z = forward_logits(model, x).data
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])


def test_forward_shape_mismatch():
    with pytest.raises(T.ShapeError):
        forward_logits(build_model(ModelSpec.mlp(), 0), np.zeros((1, 27, 28)))


def test_input_gradient_flows(rng):
    model = build_model(ModelSpec.tiny_cnn((2, 3), 4, (1, 8, 8)), 0)
    x = T.Tensor(rng.uniform(size=(2, 1, 8, 8)))
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(forward_logits(model, x), [0, 1])
    g = tape.backward(loss)[x]
    assert g.shape == x.shape and np.abs(g).sum() > 0


def test_predict_argmax():
    assert predict(fixed_logits_model([0.1, 0.9, 0.5]), np.zeros((1, 1, 1))) == 1


def test_predict_ties_lowest_index():
    assert predict(fixed_logits_model([0.3, 0.3, 0.3]), np.zeros((1, 1, 1))) == 0


def test_least_likely():
    assert least_likely_class(fixed_logits_model([3, -1, 2]), np.zeros((1, 1, 1))) == 1
    assert least_likely_class(fixed_logits_model([1, 1, 1]), np.zeros((1, 1, 1))) == 0


def test_least_likely_differs_from_predict(rng):
    model = build_model(ModelSpec.mlp((8,), 5, (1, 4, 4)), 0)
    x = rng.uniform(size=(50, 1, 4, 4))
    assert np.all(predict(model, x) != least_likely_class(model, x))


def test_predict_is_argmax_of_logits(rng):
    model = build_model(ModelSpec.tiny_cnn((2, 2), 3, (1, 8, 8)), 4)
    x = rng.uniform(size=(20, 1, 8, 8))
    np.testing.assert_array_equal(predict(model, x), forward_logits(model, x).data.argmax(axis=1))


def test_zero_epochs_leaves_params(blob_split):
    trn, _ = blob_split
    model = build_model(ModelSpec.mlp((8,), 3, trn.image_shape), 0)
    trained, history = train(model, trn, epochs=0)
    assert history == []
    assert all(np.array_equal(model.params[k], trained.params[k]) for k in model.params)


def test_training_deterministic(blob_split):
    trn, _ = blob_split
    spec = ModelSpec.mlp((8,), 3, trn.image_shape)
    a, _ = train(build_model(spec, 0), trn, epochs=1, batch_size=32, seed=5)
    b, _ = train(build_model(spec, 0), trn, epochs=1, batch_size=32, seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_reports_curve_and_learns(blob_model, blob_split):
    _, tst = blob_split
    assert accuracy(blob_model, tst) >= 0.95
    assert blob_model.metadata["test_accuracy"] >= 0.95


def test_train_empty_dataset(blob_split):
    trn, _ = blob_split
    with pytest.raises(ValueError):
        train(build_model(ModelSpec.mlp((8,), 3, trn.image_shape), 0), trn.head(0), epochs=1)


def test_checkpoint_round_trip(tmp_path, blob_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(blob_model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == blob_model.spec
    for k, v in blob_model.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()


def test_checkpoint_bytes_deterministic(tmp_path, blob_model):
    save_checkpoint(blob_model, tmp_path / "a.ckpt")
    save_checkpoint(blob_model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_checkpoint(tmp_path, blob_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(blob_model, path)
    blob = path.read_bytes()
    for cut in (3, 20, len(blob) - 8):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_corrupt_payload(tmp_path, blob_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(blob_model, path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, blob_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(blob_model, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_header_is_inspectable_json(tmp_path, blob_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(blob_model, path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    assert header["spec"]["arch"] == "mlp"
    assert [p["name"] for p in header["params"]] == list(blob_model.spec.param_shapes())
