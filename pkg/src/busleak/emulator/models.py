"""Reference victim models and a random DAG model generator."""

from __future__ import annotations

import numpy as np

from ..model import DnnModel, Layer, expected_blob_sizes, infer_shapes, layer_output_shape


class _Builder:
    """Keras-flavoured helper: every call appends a layer and returns its name."""

    def __init__(self, input_shape, rng, name=""):
        self.input_shape = tuple(input_shape)
        self.rng = rng
        self.layers = []
        self.shapes = {"input": self.input_shape}
        self.name = name

    def add(self, layer_type, inbound, **params):
        name = f"{layer_type.lower()}_{len(self.layers)}"
        inbound = [inbound] if isinstance(inbound, str) else list(inbound)
        layer = Layer(name, layer_type, params, inbound)
        in_shape = self.shapes[inbound[0]] if inbound else self.input_shape
        sizes = expected_blob_sizes(layer, in_shape)
        for blob, n in sizes.items():
            scale = 0.05 if blob in ("kernel", "bias", "beta", "moving_mean") else 1.0
            values = self.rng.standard_normal(n).astype("<f4") * np.float32(scale)
            if blob == "moving_variance":
                values = np.abs(values) + np.float32(0.5)
            layer.blobs[blob] = values
        layer.__post_init__()
        self.layers.append(layer)
        self.shapes[name] = layer_output_shape(layer, [self.shapes[s] for s in inbound] or [self.input_shape])
        return name

    def model(self) -> DnnModel:
        return DnnModel(self.input_shape, self.layers, self.name)


def mnist_model(seed: int = 0) -> DnnModel:
    """Small CNN on 28x28x1 input; 8 layers, 544,522 parameters."""
    b = _Builder((28, 28, 1), np.random.default_rng(seed), "mnist")
    x = b.add("Conv2D", "input", filters=32, kernel_size=(3, 3), strides=(1, 1), padding="valid",
              use_bias=True, activation="relu")
    x = b.add("Conv2D", x, filters=64, kernel_size=(3, 3), strides=(1, 1), padding="valid",
              use_bias=True, activation="relu")
    x = b.add("MaxPool", x, pool_size=(3, 3), strides=(3, 3), padding="valid")
    x = b.add("Dropout", x, rate=0.25)
    x = b.add("Flatten", x)
    x = b.add("Dense", x, units=128, use_bias=True, activation="relu")
    x = b.add("Dropout", x, rate=0.5)
    b.add("Dense", x, units=10, use_bias=True, activation="softmax")
    return b.model()


def vgg16_model(seed: int = 0) -> DnnModel:
    """VGG16 for 32x32x3 input with batch norm; 60 layers, 15,001,418 parameters."""
    b = _Builder((32, 32, 3), np.random.default_rng(seed), "vgg16")
    x = "input"
    blocks = [(64, 2, 1), (128, 2, 1), (256, 3, 2), (512, 3, 2), (512, 3, 2)]
    for filters, n_conv, n_drop in blocks:
        for i in range(n_conv):
            x = b.add("Conv2D", x, filters=filters, kernel_size=(3, 3), strides=(1, 1), padding="same",
                      use_bias=True)
            x = b.add("Relu", x)
            x = b.add("BatchNorm", x)
            if i < n_drop:
                x = b.add("Dropout", x, rate=0.4)
        x = b.add("MaxPool", x, pool_size=(2, 2), strides=(2, 2), padding="valid")
    x = b.add("Dropout", x, rate=0.5)
    x = b.add("Flatten", x)
    x = b.add("Dense", x, units=512, use_bias=True)
    x = b.add("Relu", x)
    x = b.add("BatchNorm", x)
    x = b.add("Dropout", x, rate=0.5)
    x = b.add("Dense", x, units=10, use_bias=True)
    b.add("Softmax", x)
    return b.model()


def resnet20_model(seed: int = 0) -> DnnModel:
    """ResNet-20 (v1) for 32x32x3 input; 72 layers, 274,442 parameters."""
    b = _Builder((32, 32, 3), np.random.default_rng(seed), "resnet20")
    x = b.add("Input", [])
    x = b.add("Conv2D", x, filters=16, kernel_size=(3, 3), strides=(1, 1), padding="same", use_bias=True)
    x = b.add("BatchNorm", x)
    x = b.add("Relu", x)
    for stack, filters in enumerate((16, 32, 64)):
        for block in range(3):
            stride = 2 if stack > 0 and block == 0 else 1
            y = b.add("Conv2D", x, filters=filters, kernel_size=(3, 3), strides=(stride, stride),
                      padding="same", use_bias=True)
            y = b.add("BatchNorm", y)
            y = b.add("Relu", y)
            y = b.add("Conv2D", y, filters=filters, kernel_size=(3, 3), strides=(1, 1), padding="same",
                      use_bias=True)
            y = b.add("BatchNorm", y)
            if stride != 1:
                x = b.add("Conv2D", x, filters=filters, kernel_size=(1, 1), strides=(stride, stride),
                          padding="same", use_bias=True)
            x = b.add("Add", [x, y])
            x = b.add("Relu", x)
    x = b.add("AvgPool", x, pool_size=(8, 8), strides=(8, 8), padding="valid")
    x = b.add("Flatten", x)
    b.add("Dense", x, units=10, use_bias=True, activation="softmax")
    return b.model()


def make_reference_models(seed: int = 0) -> list:
    return [mnist_model(seed), vgg16_model(seed), resnet20_model(seed)]


REFERENCE_MODELS = {"mnist": mnist_model, "vgg16": vgg16_model, "resnet20": resnet20_model}


def random_model(seed: int, max_blocks: int = 6) -> DnnModel:
    """A small random model, possibly with residual branches.

    Shapes are tracked while building so every layer is valid; conv blocks
    occasionally fork into a residual branch joined by an Add.
    """
    rng = np.random.default_rng(seed)
    h = int(rng.integers(8, 21))
    w = int(rng.integers(8, 21))
    b = _Builder((h, w, int(rng.integers(1, 5))), rng, f"random{seed}")
    x = "input"
    if rng.random() < 0.3:
        x = b.add("Input", [])
    for _ in range(int(rng.integers(1, max_blocks + 1))):
        hh, ww, c = b.shapes[x]
        choice = rng.choice(["conv", "conv", "res", "pool", "pad", "bn", "drop"])
        if choice == "conv":
            k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            pad = str(rng.choice(["valid", "same"]))
            if pad == "valid" and (hh < k[0] or ww < k[1]):
                pad = "same"
            act = rng.choice([None, "relu"])
            x = b.add("Conv2D", x, filters=int(rng.integers(2, 17)), kernel_size=k, strides=s,
                      padding=pad, use_bias=bool(rng.random() < 0.7),
                      **({"activation": str(act)} if act else {}))
        elif choice == "res":
            f = int(c if rng.random() < 0.5 else rng.integers(2, 17))
            y = b.add("Conv2D", x, filters=f, kernel_size=(3, 3), strides=(1, 1), padding="same",
                      use_bias=bool(rng.random() < 0.5))
            if rng.random() < 0.5:
                y = b.add("BatchNorm", y)
            y = b.add("Relu", y)
            y = b.add("Conv2D", y, filters=f, kernel_size=(3, 3), strides=(1, 1), padding="same",
                      use_bias=bool(rng.random() < 0.5))
            short = x
            if f != c:
                short = b.add("Conv2D", x, filters=f, kernel_size=(1, 1), strides=(1, 1), padding="valid",
                              use_bias=bool(rng.random() < 0.5))
            pair = [short, y] if rng.random() < 0.5 else [y, short]
            x = b.add("Add", pair)
            x = b.add("Relu", x)
        elif choice == "pool" and hh >= 2 and ww >= 2:
            kind = str(rng.choice(["MaxPool", "AvgPool"]))
            ps = (int(rng.integers(1, min(3, hh) + 1)), int(rng.integers(1, min(3, ww) + 1)))
            st = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            x = b.add(kind, x, pool_size=ps, strides=st, padding=str(rng.choice(["valid", "same"])))
        elif choice == "pad":
            x = b.add("ZeroPad", x, padding_hw=(int(rng.integers(0, 3)), int(rng.integers(1, 3))))
        elif choice == "bn":
            x = b.add("BatchNorm", x)
        else:
            x = b.add("Dropout", x, rate=0.3)
    x = b.add("Flatten", x)
    for _ in range(int(rng.integers(0, 2))):
        x = b.add("Dense", x, units=int(rng.integers(4, 33)), use_bias=bool(rng.random() < 0.7),
                  activation="relu")
        if rng.random() < 0.3:
            x = b.add("BatchNorm", x)
    b.add("Dense", x, units=int(rng.integers(2, 11)), use_bias=True,
          activation=str(rng.choice(["softmax", "relu", "linear"])))
    model = b.model()
    model.validate()
    return model


def total_params(model: DnnModel) -> int:
    return model.param_count()


def shapes_of(model: DnnModel) -> dict:
    return infer_shapes(model)
