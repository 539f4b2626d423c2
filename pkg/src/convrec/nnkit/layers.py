"""Small batched neural-network layers on NumPy arrays.

Everything runs in float64. Inputs carry an explicit leading batch axis:
dense layers see ``(B, features)``, convolutions see ``(B, C, H, W)``.
Each layer exposes ``forward`` returning ``(output, cache)`` and
``backward`` taking ``(cache, grad_out)`` and returning
``(grad_in, param_grads)``. Caches are per-call, so frozen layers can be
shared by concurrent readers.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ConfigurationError",
    "Dense",
    "ReLU",
    "Dropout",
    "Conv2d",
    "Flatten",
    "Reshape",
    "Concat",
    "ResidualBlock",
    "Sequential",
    "layer_from_spec",
]

# Modes in which dropout draws a fresh mask. "mc" is an inference-time
# stochastic pass; everything else about the layer behaves like "eval".
_STOCHASTIC_MODES = ("train", "mc")

_AUX_GRAD_PREFIX = "aux:"


class ConfigurationError(ValueError):
    """Input shape does not match the layer's wiring."""


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    # Output size ceil(size/stride); any odd padding goes on the tail edge.
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Layer:
    kind = "?"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        for name, arr in values.items():
            if name not in own:
                raise KeyError(f"{self.kind} has no parameter {name!r}")
            if own[name].shape != arr.shape:
                raise ConfigurationError(
                    f"{self.kind}.{name}: stored shape {arr.shape} != expected {own[name].shape}"
                )
            own[name][...] = arr

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError


class Dense(Layer):
    """Affine map ``y = x @ W + b`` over the feature axis."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, *, rng: np.random.Generator | None = None):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        rng = rng or np.random.default_rng(0)
        self.W = _uniform_fan_in(rng, (self.in_dim, self.out_dim), self.in_dim)
        self.b = _uniform_fan_in(rng, (self.out_dim,), self.in_dim)

    def params(self):
        return {"W": self.W, "b": self.b}

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["in_dim"], spec["out_dim"])

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"dense expects (batch, {self.in_dim}), got {x.shape}"
            )
        return x @ self.W + self.b, x

    def backward(self, cache, grad_out):
        x = cache
        return grad_out @ self.W.T, {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}


class ReLU(Layer):
    kind = "relu"

    @classmethod
    def from_spec(cls, spec):
        return cls()

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        return np.maximum(x, 0.0), x

    def backward(self, cache, grad_out):
        return grad_out * (cache > 0), {}


class Dropout(Layer):
    """Inverted dropout; identity in eval mode and always at rate 0."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["rate"])

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        if self.rate == 0.0 or mode not in _STOCHASTIC_MODES:
            return x, None
        if rng is None:
            raise ConfigurationError("stochastic dropout requires an rng")
        keep = rng.random(x.shape) >= self.rate
        scale = 1.0 / (1.0 - self.rate)
        return x * keep * scale, (keep, scale)

    def backward(self, cache, grad_out):
        if cache is None:
            return grad_out, {}
        keep, scale = cache
        return grad_out * keep * scale, {}


class Conv2d(Layer):
    """2-D convolution with zero "same" padding (output size = ceil(size/stride))."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 *, rng: np.random.Generator | None = None):
        if kernel < 1 or stride < 1:
            raise ConfigurationError("kernel and stride must be >= 1")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        rng = rng or np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel * self.kernel
        self.W = _uniform_fan_in(rng, (self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in)
        self.b = _uniform_fan_in(rng, (self.out_channels,), fan_in)

    def params(self):
        return {"W": self.W, "b": self.b}

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["in_channels"], spec["out_channels"], spec["kernel"], spec["stride"])

    def _geometry(self, height: int, width: int):
        out_h, top, bottom = _same_padding(height, self.kernel, self.stride)
        out_w, left, right = _same_padding(width, self.kernel, self.stride)
        return out_h, out_w, (top, bottom), (left, right)

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"conv2d expects (batch, {self.in_channels}, H, W), got {x.shape}"
            )
        batch, _, height, width = x.shape
        out_h, out_w, pad_h, pad_w = self._geometry(height, width)
        xp = np.pad(x, ((0, 0), (0, 0), pad_h, pad_w))
        k, s = self.kernel, self.stride
        cols = np.empty((batch, self.in_channels, k, k, out_h, out_w))
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + s * out_h:s, j:j + s * out_w:s]
        y = np.einsum("ocij,bcijhw->bohw", self.W, cols, optimize=True)
        y += self.b[None, :, None, None]
        return y, (cols, x.shape, xp.shape, pad_h, pad_w, out_h, out_w)

    def backward(self, cache, grad_out):
        cols, x_shape, xp_shape, pad_h, pad_w, out_h, out_w = cache
        dW = np.einsum("bohw,bcijhw->ocij", grad_out, cols, optimize=True)
        db = grad_out.sum(axis=(0, 2, 3))
        dcols = np.einsum("bohw,ocij->bcijhw", grad_out, self.W, optimize=True)
        dxp = np.zeros(xp_shape)
        k, s = self.kernel, self.stride
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[:, :, i, j]
        _, _, height, width = x_shape
        dx = dxp[:, :, pad_h[0]:pad_h[0] + height, pad_w[0]:pad_w[0] + width]
        return dx, {"W": dW, "b": db}


class Flatten(Layer):
    kind = "flatten"

    @classmethod
    def from_spec(cls, spec):
        return cls()

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}


class Reshape(Layer):
    """Per-sample reshape; the batch axis is untouched."""

    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(int(d) for d in shape)

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape)}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["shape"])

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        if int(np.prod(x.shape[1:])) != int(np.prod(self.shape)):
            raise ConfigurationError(
                f"reshape to {self.shape} incompatible with input {x.shape}"
            )
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}


class Concat(Layer):
    """Appends a named auxiliary input (from the forward ``aux`` dict) to the features."""

    kind = "concat"

    def __init__(self, aux_key: str):
        self.aux_key = str(aux_key)

    def spec(self):
        return {"kind": self.kind, "aux_key": self.aux_key}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["aux_key"])

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        if aux is None or self.aux_key not in aux:
            raise ConfigurationError(f"concat requires aux input {self.aux_key!r}")
        extra = aux[self.aux_key]
        if x.ndim != 2 or extra.ndim != 2 or x.shape[0] != extra.shape[0]:
            raise ConfigurationError(
                f"concat expects matching 2-D batches, got {x.shape} and {extra.shape}"
            )
        return np.concatenate([x, extra], axis=1), x.shape[1]

    def backward(self, cache, grad_out):
        split = cache
        return grad_out[:, :split], {_AUX_GRAD_PREFIX + self.aux_key: grad_out[:, split:]}


class ResidualBlock(Layer):
    """Two convolutions with an additive skip path.

    The skip path is the identity when shapes already match and a 1x1
    strided projection otherwise, so the output is always exactly
    ``inner(x) + skip(x)``. No activation is applied after the sum.
    """

    kind = "residual-block"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 *, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.conv1 = Conv2d(in_channels, out_channels, kernel, stride, rng=rng)
        self.relu = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, kernel, 1, rng=rng)
        if in_channels == out_channels and stride == 1:
            self.proj = None
        else:
            self.proj = Conv2d(in_channels, out_channels, 1, stride, rng=rng)

    def params(self):
        out = {}
        for prefix, sub in self._sublayers():
            for name, arr in sub.params().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_params(self, values):
        by_layer: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in values.items():
            prefix, _, rest = name.partition(".")
            by_layer.setdefault(prefix, {})[rest] = arr
        subs = dict(self._sublayers())
        for prefix, sub_values in by_layer.items():
            subs[prefix].load_params(sub_values)

    def _sublayers(self):
        layers = [("conv1", self.conv1), ("conv2", self.conv2)]
        if self.proj is not None:
            layers.append(("proj", self.proj))
        return layers

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["in_channels"], spec["out_channels"], spec["kernel"], spec["stride"])

    def forward(self, x, *, mode="eval", rng=None, aux=None):
        h1, c1 = self.conv1.forward(x, mode=mode, rng=rng)
        a1, cr = self.relu.forward(h1, mode=mode, rng=rng)
        h2, c2 = self.conv2.forward(a1, mode=mode, rng=rng)
        if self.proj is None:
            skip, cp = x, None
        else:
            skip, cp = self.proj.forward(x, mode=mode, rng=rng)
        return h2 + skip, (c1, cr, c2, cp)

    def backward(self, cache, grad_out):
        c1, cr, c2, cp = cache
        grads = {}
        da1, g2 = self.conv2.backward(c2, grad_out)
        dh1, _ = self.relu.backward(cr, da1)
        dx, g1 = self.conv1.backward(c1, dh1)
        for name, arr in g1.items():
            grads[f"conv1.{name}"] = arr
        for name, arr in g2.items():
            grads[f"conv2.{name}"] = arr
        if self.proj is None:
            dx = dx + grad_out
        else:
            dskip, gp = self.proj.backward(cp, grad_out)
            dx = dx + dskip
            for name, arr in gp.items():
                grads[f"proj.{name}"] = arr
        return dx, grads


_LAYER_KINDS = {
    cls.kind: cls
    for cls in (Dense, ReLU, Dropout, Conv2d, Flatten, Reshape, Concat, ResidualBlock)
}


def layer_from_spec(spec: dict) -> Layer:
    try:
        cls = _LAYER_KINDS[spec["kind"]]
    except KeyError:
        raise ConfigurationError(f"unknown layer kind {spec.get('kind')!r}") from None
    return cls.from_spec(spec)


class Sequential:
    """A chain of layers with optional named auxiliary inputs for concat layers.

    ``backward`` returns ``(grad_in, param_grads, aux_grads)`` where
    ``param_grads`` keys look like ``"3.W"`` or ``"0.conv1.W"`` and
    ``aux_grads`` maps aux keys to gradients w.r.t. the concatenated inputs.
    """

    def __init__(self, layers):
        self.layers = list(layers)

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, specs) -> "Sequential":
        return cls([layer_from_spec(s) for s in specs])

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        by_layer: dict[int, dict[str, np.ndarray]] = {}
        for name, arr in values.items():
            idx, _, rest = name.partition(".")
            by_layer.setdefault(int(idx), {})[rest] = arr
        for idx, sub in by_layer.items():
            self.layers[idx].load_params(sub)

    def forward(self, x, *, mode: str = "eval", rng: np.random.Generator | None = None,
                aux: dict[str, np.ndarray] | None = None):
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x, mode=mode, rng=rng, aux=aux)
            except ConfigurationError as err:
                raise ConfigurationError(f"layer {i} ({layer.kind}): {err}") from None
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out):
        param_grads: dict[str, np.ndarray] = {}
        aux_grads: dict[str, np.ndarray] = {}
        grad = grad_out
        for i in reversed(range(len(self.layers))):
            grad, grads = self.layers[i].backward(caches[i], grad)
            for name, arr in grads.items():
                if name.startswith(_AUX_GRAD_PREFIX):
                    key = name[len(_AUX_GRAD_PREFIX):]
                    if key in aux_grads:
                        aux_grads[key] = aux_grads[key] + arr
                    else:
                        aux_grads[key] = arr
                else:
                    param_grads[f"{i}.{name}"] = arr
        return grad, param_grads, aux_grads
