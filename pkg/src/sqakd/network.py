"""Layer stacks with optional per-layer fake quantization.

By convention the first and the last parametric layer stay unquantized;
``attach_quantizers`` honours that unless told otherwise. A teacher network
is simply a stack with no quantizers attached.
"""

from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from . import quantizers as q
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Dense:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = (rng.standard_normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim)).astype(dtype)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.weight_q: Optional[q.QuantizerSpec] = None
        self.act_q: Optional[q.QuantizerSpec] = None

    def descriptor(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Conv2d:
    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype)
        else:
            w = (rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.weight_q: Optional[q.QuantizerSpec] = None
        self.act_q: Optional[q.QuantizerSpec] = None

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


class ReLU:
    kind = "relu"

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class Flatten:
    kind = "flatten"

    def descriptor(self) -> dict:
        return {"kind": self.kind}


_PARAMETRIC = (Dense, Conv2d)


class Network:
    def __init__(self, layers):
        self.layers = list(layers)

    # -- structure -----------------------------------------------------------

    def parametric_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, _PARAMETRIC)]

    def topology(self) -> list:
        return [l.descriptor() for l in self.layers]

    def has_quantizers(self) -> bool:
        return any(l.weight_q or l.act_q for _, l in self.parametric_layers())

    def quantizer_specs(self):
        out = []
        for i, l in self.parametric_layers():
            if l.weight_q:
                out.append((f"l{i}.wq", l.weight_q))
            if l.act_q:
                out.append((f"l{i}.aq", l.act_q))
        return out

    # -- parameters ----------------------------------------------------------

    def layer_parameters(self):
        """(name, tensor) pairs for the layer weights and biases only."""
        named = []
        for i, l in self.parametric_layers():
            named.append((f"l{i}.W", l.W))
            named.append((f"l{i}.b", l.b))
        return named

    def parameters(self):
        """Stable-ordered (name, tensor) pairs: layer weights then quantizer scalars."""
        named = list(self.layer_parameters())
        for prefix, spec in self.quantizer_specs():
            for pname, t in spec.param_tensors():
                named.append((f"{prefix}.{pname}", t))
        return named

    def param_state(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_param_state(self, state: dict) -> None:
        for name, t in self.parameters():
            if name not in state:
                raise ConfigError(f"parameter '{name}' missing from state")
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(f"parameter '{name}' has shape {arr.shape}, expected {t.data.shape}")
            t.data = arr.copy()

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.parameters():
            digest.update(name.encode())
            digest.update(t.data.tobytes())
        return digest.hexdigest()

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.parameters():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    # -- forward ---------------------------------------------------------------

    def forward(self, x, quantized: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        for layer in self.layers:
            if isinstance(layer, Dense):
                if h.data.ndim != 2:
                    raise DimensionError(f"dense layer expects 2-D input, got shape {h.shape}")
                h = self._quantize_input(layer, h, quantized)
                w = self._layer_weight(layer, quantized)
                h = T.add(T.matmul(h, w), layer.b)
            elif isinstance(layer, Conv2d):
                h = self._quantize_input(layer, h, quantized)
                w = self._layer_weight(layer, quantized)
                h = T.conv2d(h, w, layer.b, stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, ReLU):
                h = T.relu(h)
            elif isinstance(layer, Flatten):
                h = T.reshape(h, (h.shape[0], -1))
            else:
                raise ConfigError(f"unknown layer kind {layer!r}")
        return h

    @staticmethod
    def _quantize_input(layer, h: Tensor, quantized: bool) -> Tensor:
        if not quantized or layer.act_q is None:
            return h
        if not layer.act_q.initialized:
            layer.act_q.init_from_array(h.data)
        return q.quantize(h, layer.act_q)

    @staticmethod
    def _layer_weight(layer, quantized: bool) -> Tensor:
        if not quantized or layer.weight_q is None:
            return layer.W
        return q.quantize(layer.W, layer.weight_q)


def same_topology(a: Network, b: Network) -> bool:
    return a.topology() == b.topology()


# ---------------------------------------------------------------------------
# model zoo


def build_mlp(in_dim: int, classes: int, rng: Optional[np.random.Generator] = None, hidden: int = 64) -> Network:
    return Network(
        [
            Flatten(),
            Dense(in_dim, hidden, rng),
            ReLU(),
            Dense(hidden, hidden, rng),
            ReLU(),
            Dense(hidden, classes, rng),
        ]
    )


def build_cnn(in_shape, classes: int, rng: Optional[np.random.Generator] = None) -> Network:
    c, h, w = in_shape
    return Network(
        [
            Conv2d(c, 8, 3, stride=1, padding=1, rng=rng),
            ReLU(),
            Conv2d(8, 16, 3, stride=1, padding=1, rng=rng),
            ReLU(),
            Flatten(),
            Dense(16 * h * w, classes, rng),
        ]
    )


def build_model(model: str, feature_shape, classes: int, rng=None) -> Network:
    if model == "mlp":
        in_dim = int(np.prod(feature_shape))
        return build_mlp(in_dim, classes, rng)
    if model == "cnn":
        if len(feature_shape) != 3:
            raise ConfigError(f"cnn model needs [C,H,W] inputs, got feature shape {feature_shape}")
        return build_cnn(feature_shape, classes, rng)
    raise ConfigError(f"unknown model '{model}'")


def attach_quantizers(
    net: Network,
    kind: str,
    bits_w: int,
    bits_a: int,
    rule: q.BackwardRule,
    quantize_first_last: bool = False,
) -> None:
    """Give each eligible parametric layer weight and activation quantizers.

    Weight quantizer parameters initialize from the layer's current latent
    weights; activation quantizers initialize lazily from the first batch
    that reaches them.
    """
    if kind in (None, "none"):
        return
    plist = net.parametric_layers()
    for pos, (i, layer) in enumerate(plist):
        edge = pos == 0 or pos == len(plist) - 1
        if edge and not quantize_first_last:
            continue
        wq = q.make_quantizer(kind, q.Target.WEIGHTS, bits_w, rule)
        wq.init_from_array(layer.W.data)
        layer.weight_q = wq
        layer.act_q = q.make_quantizer(kind, q.Target.ACTIVATIONS, bits_a, rule)
