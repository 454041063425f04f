"""Model definitions: the small MNIST CNN and a linear oracle model."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


class Model:
    """Named parameter tensors plus a pure forward function.

    ``architecture`` is a JSON-able descriptor (layer kinds and shapes) so
    that checkpoints and run artifacts are self-describing.
    """

    def __init__(self, params, architecture):
        names = list(params)
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")
        self.params = params
        self.architecture = architecture

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        raise NotImplementedError

    # -- parameter plumbing ------------------------------------------------

    def param_vector(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_param_data(self, named_arrays):
        for name, arr in named_arrays.items():
            p = self.params[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap):
        self.set_param_data(snap)

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def num_params(self):
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def logits(self, x):
        """Plain forward pass on a numpy batch; returns a numpy array."""
        return self.forward(Tape(), Tensor(x)).data

    def predict(self, x):
        return self.logits(x).argmax(axis=1)


class MnistCNN(Model):
    """conv16-relu-conv32-relu-flatten-dense100-relu-dense10.

    Both convs use 4x4 kernels, stride 2, padding 1, so 28x28 inputs map to
    14x14 then 7x7 feature maps.
    """

    KERNEL, STRIDE, PADDING = 4, 2, 1

    def __init__(self, dtype=np.float32):
        k, s, p = self.KERNEL, self.STRIDE, self.PADDING
        shapes = {
            "conv1.w": (16, 1, k, k),
            "conv1.b": (16,),
            "conv2.w": (32, 16, k, k),
            "conv2.b": (32,),
            "fc1.w": (32 * 7 * 7, 100),
            "fc1.b": (100,),
            "fc2.w": (100, 10),
            "fc2.b": (10,),
        }
        params = {n: Tensor(np.zeros(sh, dtype=dtype), requires_grad=True) for n, sh in shapes.items()}
        arch = {
            "kind": "mnist_cnn",
            "input_shape": [1, 28, 28],
            "num_classes": 10,
            "conv": {"kernel": k, "stride": s, "padding": p, "filters": [16, 32]},
            "dense": [100, 10],
        }
        super().__init__(params, arch)

    def forward(self, tape, x):
        s, p = self.STRIDE, self.PADDING
        h = tape.relu(tape.bias_add(tape.conv2d(x, self.params["conv1.w"], s, p), self.params["conv1.b"]))
        h = tape.relu(tape.bias_add(tape.conv2d(h, self.params["conv2.w"], s, p), self.params["conv2.b"]))
        h = tape.flatten(h)
        h = tape.relu(tape.bias_add(tape.matmul(h, self.params["fc1.w"]), self.params["fc1.b"]))
        return tape.bias_add(tape.matmul(h, self.params["fc2.w"]), self.params["fc2.b"])


class LinearModel(Model):
    """Single dense layer, logits = xW + b; inputs flattened if needed."""

    def __init__(self, d, num_classes, dtype=np.float64):
        if d < 1:
            raise ValueError("d must be >= 1")
        params = {
            "w": Tensor(np.zeros((d, num_classes), dtype=dtype), requires_grad=True),
            "b": Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
        }
        arch = {"kind": "linear", "input_shape": [d], "num_classes": num_classes}
        super().__init__(params, arch)

    def forward(self, tape, x):
        if x.data.ndim > 2:
            x = tape.flatten(x)
        return tape.bias_add(tape.matmul(x, self.params["w"]), self.params["b"])


def build_mnist_cnn(dtype=np.float32) -> MnistCNN:
    return MnistCNN(dtype=dtype)


def build_linear(d, num_classes, dtype=np.float64) -> LinearModel:
    return LinearModel(d, num_classes, dtype=dtype)


def _fan_in(name, shape):
    if len(shape) == 4:  # conv kernel [oc, c, kh, kw]
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:  # dense [in, out]
        return shape[0]
    return shape[0]


def init_parameters(model: Model, rng: np.random.Generator) -> Model:
    """Fan-in-scaled uniform weights, zero biases. In place; returns model."""
    for name, p in model.params.items():
        if name.endswith(".b") or name == "b":
            p.data = np.zeros_like(p.data)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, p.data.shape))
            p.data = rng.uniform(-bound, bound, size=p.data.shape).astype(p.data.dtype)
    return model


def build_model(kind, dtype=np.float32, **kwargs) -> Model:
    if kind == "mnist_cnn":
        return build_mnist_cnn(dtype=dtype)
    if kind == "linear":
        return build_linear(kwargs["d"], kwargs.get("num_classes", 2), dtype=dtype)
    raise ValueError(f"unknown model kind: {kind}")
