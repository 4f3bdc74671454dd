"""Small image classifiers, their training loop, and the checkpoint format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iter

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1

ARCHITECTURES = ("mlp", "tiny-cnn")


class SpecError(ValueError):
    pass


class CheckpointError(IOError):
    """Unreadable or corrupt checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    For ``mlp``, ``layers`` lists hidden widths. For ``tiny-cnn`` it lists the
    output channels of the two 3x3 conv layers; each conv is followed by ReLU
    and 2x2 max pooling, then one dense layer maps to the classes.
    """

    arch: str = "tiny-cnn"
    layers: tuple[int, ...] = (8, 16)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 28, 28)
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.arch not in ARCHITECTURES:
            raise SpecError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.activation != "relu":
            raise SpecError(f"unsupported activation {self.activation!r}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if any(v < 1 for v in self.layers):
            raise SpecError("layer extents must be positive")
        if self.arch == "tiny-cnn":
            if len(self.layers) != 2:
                raise SpecError("tiny-cnn takes exactly two conv channel counts")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise SpecError("tiny-cnn needs H and W divisible by 4 (two 2x2 pools)")

    @classmethod
    def mlp(cls, hidden=(128,), num_classes=10, input_shape=(1, 28, 28)) -> "ModelSpec":
        return cls("mlp", tuple(hidden), num_classes, tuple(input_shape))

    @classmethod
    def tiny_cnn(cls, channels=(8, 16), num_classes=10, input_shape=(1, 28, 28)) -> "ModelSpec":
        return cls("tiny-cnn", tuple(channels), num_classes, tuple(input_shape))

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.arch == "mlp":
            widths = [self.input_dim, *self.layers, self.num_classes]
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"dense{i}.weight"] = (fan_in, fan_out)
                shapes[f"dense{i}.bias"] = (fan_out,)
        else:
            c, h, w = self.input_shape
            c1, c2 = self.layers
            shapes["conv0.weight"] = (c1, c, 3, 3)
            shapes["conv0.bias"] = (c1,)
            shapes["conv1.weight"] = (c2, c1, 3, 3)
            shapes["conv1.bias"] = (c2,)
            flat = c2 * (h // 4) * (w // 4)
            shapes["dense0.weight"] = (flat, self.num_classes)
            shapes["dense0.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            layers=tuple(d["layers"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
            activation=d.get("activation", "relu"),
        )


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.metadata))

    def logits(self, images) -> np.ndarray:
        return forward_logits(self, images).data


def _fan_in(shape: tuple[int, ...]) -> int:
    # conv kernels (O, C, kh, kw): C*kh*kw; dense weights (in, out): in
    return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize parameters uniformly in +-1/sqrt(fan_in), seeded."""
    rng = np.random.default_rng(seed)
    shapes = spec.param_shapes()
    params = {}
    for name, shape in shapes.items():
        weight_shape = shapes[name.replace(".bias", ".weight")]
        bound = 1.0 / np.sqrt(_fan_in(weight_shape))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params)


def _as_batch(model: Model, images) -> tuple[T.Tensor, bool]:
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    shape = model.spec.input_shape
    if x.shape == shape:
        return x.reshape((1, *shape)), True
    if x.ndim == 1 and x.size == model.spec.input_dim:
        return x.reshape((1, *shape)), True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    if x.ndim == 2 and x.shape[1] == model.spec.input_dim:
        return x.reshape((x.shape[0], *shape)), False
    raise T.ShapeError(f"image shape {x.shape} does not match model input {shape}")


def forward_logits(model: Model, images, params: dict[str, T.Tensor] | None = None) -> T.Tensor:
    """Class scores for one image (-> (k,)) or a batch (-> (n, k)).

    Records on the active tape, so gradients flow to ``images`` when it is a
    Tensor, and to ``params`` when Tensor parameters are passed in.
    """
    x, single = _as_batch(model, images)
    p = params if params is not None else {k: T.Tensor._wrap(v) for k, v in model.params.items()}
    n = x.shape[0]
    if model.spec.arch == "mlp":
        h = x.reshape((n, model.spec.input_dim))
        depth = len(model.spec.layers) + 1
        for i in range(depth):
            h = T.matmul(h, p[f"dense{i}.weight"]) + p[f"dense{i}.bias"]
            if i < depth - 1:
                h = T.relu(h)
    else:
        h = x
        for i in range(2):
            bias = p[f"conv{i}.bias"].reshape((-1, 1, 1))
            h = T.max_pool2d(T.relu(T.conv2d(h, p[f"conv{i}.weight"], 1, 1) + bias))
        h = h.reshape((n, -1))
        h = T.matmul(h, p["dense0.weight"]) + p["dense0.bias"]
    return h.reshape((model.spec.num_classes,)) if single else h


def predict(model: Model, images) -> np.ndarray | int:
    """Argmax class; ties go to the lowest index (np.argmax semantics)."""
    z = forward_logits(model, images).data
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


def least_likely_class(model: Model, images) -> np.ndarray | int:
    z = forward_logits(model, images).data
    return int(np.argmin(z)) if z.ndim == 1 else np.argmin(z, axis=1)


def accuracy(model: Model, dataset: Dataset, batch_size: int = 1000) -> float:
    correct = 0
    for xb, yb in batch_iter(dataset, batch_size):
        correct += int((predict(model, xb) == yb).sum())
    return correct / len(dataset)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None


def loss_and_grads(model: Model, xb: np.ndarray, yb: np.ndarray) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Mean cross-entropy on a batch, the batch logits, and parameter gradients."""
    with T.Tape() as tape:
        p = {k: T.Tensor._wrap(v) for k, v in model.params.items()}
        logits = forward_logits(model, xb, params=p)
        loss = T.softmax_cross_entropy(logits, yb, reduction="mean")
    grads = tape.backward(loss)
    return loss.item(), logits.data, {k: grads[t] for k, t in p.items()}


def train(
    model: Model,
    dataset: Dataset,
    epochs: int,
    batch_size: int = 128,
    seed: int = 0,
    lr: float = 0.05,
    momentum: float = 0.9,
    test: Dataset | None = None,
    batch_transform=None,
    log=None,
) -> tuple[Model, list[EpochRecord]]:
    """Minibatch SGD with momentum on mean cross-entropy.

    Returns a trained copy and one :class:`EpochRecord` per epoch. Shuffling
    uses ``seed + epoch`` so runs are reproducible. ``batch_transform(model,
    xb, yb, rng)`` may replace each batch before the step (adversarial
    training hooks in here).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if test is not None and test.num_classes != model.spec.num_classes:
        raise ValueError("test set class count does not match the model")
    model = model.copy()
    states = {k: T.MomentumState(lr, momentum) for k in model.params}
    rng = np.random.default_rng(seed)
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        total_loss = 0.0
        correct = 0
        for xb, yb in batch_iter(dataset, batch_size, shuffle_seed=seed + epoch):
            if batch_transform is not None:
                xb = batch_transform(model, xb, yb, rng)
            loss, logits, grads = loss_and_grads(model, xb, yb)
            total_loss += loss * len(yb)
            correct += int((np.argmax(logits, axis=1) == yb).sum())
            for k, g in grads.items():
                model.params[k] = T.sgd_momentum_step(model.params[k], g, states[k])
        rec = EpochRecord(
            epoch + 1,
            total_loss / len(dataset),
            correct / len(dataset),
            accuracy(model, test) if test is not None else None,
        )
        history.append(rec)
        if log is not None:
            log(rec)
    model.metadata = {
        **model.metadata,
        "seed": seed,
        "epochs": model.metadata.get("epochs", 0) + epochs,
        "test_accuracy": history[-1].test_accuracy if history else model.metadata.get("test_accuracy"),
    }
    return model, history


# Checkpoint layout (all integers little-endian):
#   magic "SSCK" | u32 version | u64 header length | header JSON (utf-8) | float64 payload
# The header lists each parameter's name, shape and element offset, plus a CRC32
# of the payload.


def save_checkpoint(model: Model, path) -> None:
    names = list(model.spec.param_shapes())
    entries, blocks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blocks.append(arr.tobytes())
    payload = b"".join(blocks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "metadata": model.metadata,
        "params": entries,
        "payload_crc32": zlib.crc32(payload),
        "payload_elements": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != version:
        raise CheckpointVersionError(f"{path}: header version {header.get('format_version')} disagrees")
    payload = blob[16 + hlen :]
    if len(payload) != 8 * header["payload_elements"] or zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: corrupt or truncated parameter payload")
    spec = ModelSpec.from_dict(header["spec"])
    values = np.frombuffer(payload, dtype="<f8")
    expected = spec.param_shapes()
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        if expected.get(e["name"]) != shape:
            raise CheckpointError(f"{path}: parameter {e['name']} shape {shape} does not match spec")
        n = int(np.prod(shape))
        params[e["name"]] = values[e["offset"] : e["offset"] + n].reshape(shape).astype(np.float64)
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter set does not match spec")
    return Model(spec, params, header.get("metadata", {}))
