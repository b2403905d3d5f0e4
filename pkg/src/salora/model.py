"""Toy feed-forward model with adapter-bearing linear layers.

Layer ``l`` computes ``z_l = W_eff,l @ h_l`` and the next input is
``h_{l+1} = act(z_l)``; no activation follows the last layer. Gradients are
hand-derived per layer rather than taped.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mtx
from .adapters import AdapterSlot
from .errors import ConfigurationError, FormatError, ShapeError
from .linalg import as_matrix, matmul


def _relu_grad(z):
    return (z > 0).astype(np.float64)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
    "identity": (lambda z: z, np.ones_like),
}


@dataclass
class LinearLayer:
    weight: np.ndarray
    adapter: AdapterSlot | None = None

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        if self.adapter is not None and (self.adapter.out_dim, self.adapter.in_dim) != self.weight.shape:
            raise ShapeError(
                f"adapter {self.adapter.out_dim}x{self.adapter.in_dim} "
                f"does not fit weight {self.weight.shape}"
            )

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def effective_weight(self):
        if self.adapter is None:
            return self.weight
        return self.adapter.effective_weight(self.weight)

    def apply(self, x):
        if self.adapter is None:
            return matmul(self.weight, x)
        return self.adapter.apply(self.weight, x)


@dataclass
class ToyModel:
    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("a model needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].out_dim} but layer {i + 1} "
                    f"expects {self.layers[i + 1].in_dim}"
                )

    @classmethod
    def from_weights(cls, weights, activation="tanh"):
        return cls([LinearLayer(np.array(w, dtype=np.float64)) for w in weights], activation)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def weights(self):
        return [layer.weight for layer in self.layers]

    def adapted(self):
        """Indices of layers that carry an adapter."""
        return [i for i, layer in enumerate(self.layers) if layer.adapter is not None]

    def copy(self):
        return ToyModel(
            [
                LinearLayer(
                    layer.weight.copy(),
                    None if layer.adapter is None else layer.adapter.copy(),
                )
                for layer in self.layers
            ],
            self.activation,
        )

    def without_adapters(self):
        return ToyModel([LinearLayer(layer.weight.copy()) for layer in self.layers], self.activation)

    def effective_weights(self):
        return [layer.effective_weight() for layer in self.layers]


@dataclass
class FeatureTrace:
    per_layer_inputs: list = field(default_factory=list)
    per_layer_outputs: list = field(default_factory=list)


def forward(model, x, capture=False):
    """Run ``x`` (``in_dim x batch``) through the model.

    Returns ``(output, trace)``; ``trace`` is None unless ``capture``. The
    trace holds each layer's input and pre-activation output.
    """
    x = as_matrix(x, "x")
    if x.shape[0] != model.in_dim:
        raise ShapeError(f"model expects {model.in_dim} input rows, got {x.shape}")
    act = ACTIVATIONS[model.activation][0]
    trace = FeatureTrace() if capture else None
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = layer.apply(h)
        if capture:
            trace.per_layer_inputs.append(h)
            trace.per_layer_outputs.append(z)
        h = act(z) if i < last else z
    return h, trace


def output_grads(model, trace, upstream_grad):
    """Gradient of the loss with respect to every layer's pre-activation output."""
    d_act = ACTIVATIONS[model.activation][1]
    grads = [None] * len(model.layers)
    g = upstream_grad
    for i in range(len(model.layers) - 1, -1, -1):
        grads[i] = g
        if i == 0:
            break
        layer = model.layers[i]
        slot = layer.adapter
        if slot is None:
            dh = matmul(layer.weight.T, g)
        else:
            dh = matmul(slot.base(layer.weight).T, g) + matmul(slot.a.T, _adapter_out_grad(slot, g)[1])
        g = dh * d_act(trace.per_layer_outputs[i - 1])
    return grads


def _adapter_out_grad(slot, g):
    # returns (dL/d(B A h), dL/d(A h)) for output gradient g
    gv = g if slot.c is None else matmul(slot.c.T, g)
    return gv, matmul(slot.b.T, gv)


def backward(model, x, upstream_grad):
    """Adapter gradients for the scalar loss whose output gradient is ``upstream_grad``.

    Returns a list with one entry per layer: None for plain layers, else a
    dict ``{"a": dL/dA, "b": dL/dB}``. Projector, initial copies and residual
    weights are frozen and get no gradient.
    """
    if not model.adapted():
        raise ConfigurationError("backward needs at least one adapter slot")
    out, trace = forward(model, x, capture=True)
    upstream_grad = as_matrix(upstream_grad, "upstream_grad")
    if upstream_grad.shape != out.shape:
        raise ShapeError(f"upstream gradient {upstream_grad.shape} does not match output {out.shape}")
    return adapter_grads(model, trace, upstream_grad)


def adapter_grads(model, trace, upstream_grad):
    result = [None] * len(model.layers)
    for i, g in enumerate(output_grads(model, trace, upstream_grad)):
        slot = model.layers[i].adapter
        if slot is None:
            continue
        h = trace.per_layer_inputs[i]
        gv, gu = _adapter_out_grad(slot, g)
        ah = matmul(slot.a, h)
        result[i] = {
            "a": matmul(gu, h.T),
            "b": matmul(gv, ah.T),
        }
    return result


def save_model(path, model):
    """Write the base weights as ``layer_<i>.mtx`` plus ``manifest.txt``.

    Adapters are not part of a model checkpoint; see ``adapters.save_adapters``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "salora-model-1",
        "num_layers": len(model.layers),
        "activation": model.activation,
    }
    for i, layer in enumerate(model.layers):
        mtx.save(path / f"layer_{i}.mtx", layer.weight)
        manifest[f"layer.{i}.dims"] = f"{layer.out_dim},{layer.in_dim}"
        manifest[f"layer.{i}.adapter"] = "none" if layer.adapter is None else layer.adapter.kind.value
    mtx.write_manifest(path / "manifest.txt", manifest)


def load_model(path):
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise FormatError(f"no model manifest in {path}")
    manifest = mtx.read_manifest(path / "manifest.txt")
    layers = []
    for i in range(int(manifest["num_layers"])):
        w = mtx.load(path / f"layer_{i}.mtx")
        dims = tuple(int(d) for d in manifest[f"layer.{i}.dims"].split(","))
        if w.shape != dims:
            raise FormatError(f"layer {i}: manifest says {dims}, file holds {w.shape}")
        layers.append(LinearLayer(w))
    return ToyModel(layers, manifest["activation"])

