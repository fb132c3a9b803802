"""Declarative models: layer specs, the 64x64 DCGAN pair, and toy profiles.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` descriptors.
Parameter order (the order of the flat parameter vector exchanged on the
wire) is layer order, and within a layer: weight, bias, bn-gamma, bn-beta.
"""
import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

# instantiated models by spec name (instrumentation)
ALLOCATIONS = Counter()

ACTIVATIONS = {"relu", "leaky_relu", "tanh", "sigmoid", None}
KINDS = {"linear", "conv", "convT"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: Optional[str] = None
    batchnorm: bool = False
    bias: bool = True
    spatial_mean: bool = False  # average conv output over H, W (scalar head)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.stride < 1 or self.kernel < 1:
            raise ConfigError("kernel and stride must be >= 1")

    def weight_shape(self):
        if self.kind == "linear":
            return (self.in_channels, self.out_channels)
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.in_channels, self.out_channels, self.kernel, self.kernel)

    def parameter_shapes(self):
        shapes = [self.weight_shape()]
        if self.bias:
            shapes.append((self.out_channels,))
        if self.batchnorm:
            shapes += [(self.out_channels,), (self.out_channels,)]
        return shapes

    def output_shape(self, shape):
        shape = tuple(shape)
        if self.kind == "linear":
            if int(np.prod(shape)) != self.in_channels:
                raise DimensionError(f"linear layer expects {self.in_channels} features, got input {shape}")
            return (self.out_channels,)
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(f"{self.kind} layer expects ({self.in_channels}, H, W), got {shape}")
        _, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        if self.kind == "conv":
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        else:
            h, w = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        if h < 1 or w < 1:
            raise DimensionError(f"{self.kind} layer collapses spatial size of {shape}")
        if self.spatial_mean:
            return (self.out_channels,)
        return (self.out_channels, h, w)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]
    output_shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.output_shape is not None:
            object.__setattr__(self, "output_shape", tuple(self.output_shape))
        self.layer_shapes()  # static shape check

    def layer_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        if self.output_shape is not None and np.prod(self.output_shape) != np.prod(shapes[-1]):
            raise DimensionError(f"{self.name}: final shape {shapes[-1]} cannot be viewed as {self.output_shape}")
        return shapes

    @property
    def sample_shape(self):
        return self.output_shape if self.output_shape is not None else self.layer_shapes()[-1]

    def parameter_shapes(self):
        return [s for layer in self.layers for s in layer.parameter_shapes()]

    @property
    def parameter_count(self):
        return int(sum(np.prod(s) for s in self.parameter_shapes()))

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_shape": None if self.output_shape is None else list(self.output_shape),
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]),
                   None if d.get("output_shape") is None else tuple(d["output_shape"]))


class Model:
    """Parameters and forward pass for a :class:`ModelSpec`."""

    def __init__(self, spec, rng=None, dtype=np.float32, leaky_slope=0.2):
        ALLOCATIONS[spec.name] += 1
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.leaky_slope = leaky_slope
        self.forward_count = 0
        self._layer_params = []
        self.running_stats = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for layer in spec.layers:
            params = {"weight": Tensor(self._init_weight(layer, rng), requires_grad=True)}
            if layer.bias:
                bound = 1.0 / np.sqrt(self._fan_in(layer))
                params["bias"] = Tensor(rng.uniform(-bound, bound, layer.out_channels).astype(self.dtype),
                                        requires_grad=True)
            if layer.batchnorm:
                params["gamma"] = Tensor(rng.normal(1.0, 0.02, layer.out_channels).astype(self.dtype),
                                         requires_grad=True)
                params["beta"] = Tensor(np.zeros(layer.out_channels, dtype=self.dtype), requires_grad=True)
                self.running_stats.append(T.RunningStats(layer.out_channels, self.dtype))
            else:
                self.running_stats.append(None)
            self._layer_params.append(params)

    @staticmethod
    def _fan_in(layer):
        shape = layer.weight_shape()
        if layer.kind == "linear":
            return shape[0]
        return shape[1] * shape[2] * shape[3] if layer.kind == "conv" else shape[0] * shape[2] * shape[3]

    def _init_weight(self, layer, rng):
        shape = layer.weight_shape()
        if layer.kind == "linear":
            bound = 1.0 / np.sqrt(shape[0])
            return rng.uniform(-bound, bound, shape).astype(self.dtype)
        return rng.normal(0.0, 0.02, shape).astype(self.dtype)

    # parameters ---------------------------------------------------------------

    def parameters(self):
        out = []
        for params in self._layer_params:
            for key in ("weight", "bias", "gamma", "beta"):
                if key in params:
                    out.append(params[key])
        return out

    @property
    def num_parameters(self):
        return self.spec.parameter_count

    def get_flat(self):
        return T.flatten_params(self.parameters()).astype(self.dtype, copy=False)

    def set_flat(self, vec):
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size != self.num_parameters:
            raise DimensionError(f"{self.spec.name}: expected {self.num_parameters} parameters, got {vec.size}")
        pos = 0
        for p in self.parameters():
            k = p.size
            p.data = vec[pos:pos + k].reshape(p.shape).astype(self.dtype)
            pos += k

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def copy(self):
        ALLOCATIONS[self.spec.name] += 1
        other = Model.__new__(Model)
        other.spec = self.spec
        other.dtype = self.dtype
        other.leaky_slope = self.leaky_slope
        other.forward_count = 0
        other._layer_params = [
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}
            for params in self._layer_params
        ]
        other.running_stats = [None if rs is None else rs.copy() for rs in self.running_stats]
        return other

    def state_bytes(self):
        """Weights followed by batchnorm running statistics, as raw bytes."""
        chunks = [self.get_flat().tobytes()]
        for rs in self.running_stats:
            if rs is not None:
                chunks += [rs.mean.tobytes(), rs.var.tobytes()]
        return b"".join(chunks)

    def digest(self):
        return hashlib.sha256(self.state_bytes()).hexdigest()

    # forward ------------------------------------------------------------------

    def _activate(self, x, name):
        if name == "relu":
            return T.relu(x)
        if name == "leaky_relu":
            return T.leaky_relu(x, self.leaky_slope)
        if name == "tanh":
            return T.tanh(x)
        if name == "sigmoid":
            return T.sigmoid(x)
        return x

    def forward(self, x, training=True, logits=False):
        """Run the model on a batch.

        With ``logits=True`` the final sigmoid (if any) is skipped; losses use
        this path to stay numerically stable.
        """
        self.forward_count += 1
        x = T.as_tensor(x)
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        n = x.shape[0]
        if int(np.prod(x.shape[1:])) != int(np.prod(self.spec.input_shape)):
            raise DimensionError(f"{self.spec.name}: input {x.shape} does not match {self.spec.input_shape}")
        x = T.reshape(x, (n,) + self.spec.input_shape)
        last = len(self.spec.layers) - 1
        for i, (layer, params) in enumerate(zip(self.spec.layers, self._layer_params)):
            if layer.kind == "linear":
                if x.ndim != 2:
                    x = T.reshape(x, (n, -1))
                x = T.matmul(x, params["weight"])
            elif layer.kind == "conv":
                x = T.conv2d(x, params["weight"], layer.stride, layer.padding)
            else:
                x = T.conv2d_transposed(x, params["weight"], layer.stride, layer.padding)
            if layer.bias:
                shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
                x = T.add(x, T.reshape(params["bias"], shape))
            if layer.spatial_mean:
                x = T.mean(T.reshape(x, x.shape[:2] + (-1,)), axis=2)
            if layer.batchnorm:
                x = T.batchnorm(x, params["gamma"], params["beta"], self.running_stats[i], training=training)
            if not (logits and i == last and layer.activation == "sigmoid"):
                x = self._activate(x, layer.activation)
        if self.spec.output_shape is not None:
            x = T.reshape(x, (n,) + self.spec.output_shape)
        return x

    __call__ = forward


@dataclass
class GanPair:
    generator: Model
    discriminator: Model
    latent_dim: int
    profile: str = field(default="custom")

    def __post_init__(self):
        if tuple(self.generator.spec.sample_shape) != tuple(self.discriminator.spec.input_shape):
            raise DimensionError(
                f"generator emits {self.generator.spec.sample_shape} but discriminator expects "
                f"{self.discriminator.spec.input_shape}")
        if int(np.prod(self.discriminator.spec.sample_shape)) != 1:
            raise DimensionError("discriminator must emit one scalar per sample")
        if int(np.prod(self.generator.spec.input_shape)) != self.latent_dim:
            raise DimensionError("generator input does not match latent_dim")


# 64x64 DCGAN -------------------------------------------------------------------

DCGAN_LATENT_DIM = 100
DCGAN_RESOLUTION = 64


def dcgan_generator_spec(out_channels=1):
    widths = [1024, 512, 256, 128, out_channels]
    layers, c_in = [], DCGAN_LATENT_DIM
    for i, c_out in enumerate(widths):
        final = i == len(widths) - 1
        layers.append(LayerSpec(
            "convT", c_in, c_out, kernel=4,
            stride=1 if i == 0 else 2, padding=0 if i == 0 else 1,
            activation="tanh" if final else "relu", batchnorm=not final, bias=False))
        c_in = c_out
    return ModelSpec("dcgan-64-generator", (DCGAN_LATENT_DIM, 1, 1), layers)


def dcgan_discriminator_spec(input_channels=1):
    if input_channels < 1:
        raise ConfigError("input_channels must be >= 1")
    widths = [256, 512, 1024, 1]
    layers, c_in = [], input_channels
    for i, c_out in enumerate(widths):
        final = i == len(widths) - 1
        layers.append(LayerSpec(
            "conv", c_in, c_out, kernel=4, stride=2, padding=1,
            activation="sigmoid" if final else "leaky_relu", batchnorm=not final, bias=False,
            spatial_mean=final))
        c_in = c_out
    return ModelSpec("dcgan-64-discriminator", (input_channels, DCGAN_RESOLUTION, DCGAN_RESOLUTION), layers)


def build_dcgan_generator(out_channels=1, rng=None, dtype=np.float32):
    """Five transposed-conv DCGAN generator, 100-channel 1x1 latent to (C, 64, 64)."""
    return Model(dcgan_generator_spec(out_channels), rng, dtype)


def build_dcgan_discriminator(input_channels=1, rng=None, dtype=np.float32):
    """Four-conv DCGAN discriminator, (C, 64, 64) to one probability per sample.

    The last 4x4 conv leaves a 4x4 logit map, which is averaged before the
    sigmoid so every sample gets a single score.
    """
    return Model(dcgan_discriminator_spec(input_channels), rng, dtype)


# toy profiles ----------------------------------------------------------------

def _mlp(name, sizes, hidden_act, final_act, output_shape=None, input_shape=None, batchnorm=False):
    layers = []
    for i in range(len(sizes) - 1):
        final = i == len(sizes) - 2
        layers.append(LayerSpec("linear", sizes[i], sizes[i + 1], activation=final_act if final else hidden_act,
                                batchnorm=batchnorm and not final))
    return ModelSpec(name, input_shape or (sizes[0],), layers, output_shape)


TOY_PROFILES = {
    "gaussian1d": dict(latent=8, g=[8, 32, 1], d=[1, 32, 1], g_final=None, sample_shape=(1,)),
    "gaussian-mixture-2d": dict(latent=8, g=[8, 64, 64, 2], d=[2, 64, 64, 1], g_final=None, sample_shape=(2,)),
    "tiny-image-16x16": dict(latent=32, g=[32, 128, 256, 256], d=[256, 128, 1], g_final="tanh",
                             sample_shape=(1, 16, 16), g_batchnorm=True),
}
PROFILE_ALIASES = {"mixture2d": "gaussian-mixture-2d", "tiny-image": "tiny-image-16x16"}


def toy_specs(profile):
    profile = PROFILE_ALIASES.get(profile, profile)
    if profile not in TOY_PROFILES:
        raise ConfigError(f"unknown toy profile {profile!r}; choose from {sorted(TOY_PROFILES)}")
    p = TOY_PROFILES[profile]
    shape = p["sample_shape"]
    hidden = p.get("hidden", "leaky_relu")
    g = _mlp(f"{profile}-generator", p["g"], hidden, p["g_final"],
             output_shape=shape if len(shape) > 1 else None, batchnorm=p.get("g_batchnorm", False))
    d = _mlp(f"{profile}-discriminator", p["d"], hidden, "sigmoid", input_shape=shape)
    return g, d, p["latent"]


def build_gan(profile, g_rng=None, d_rng=None, dtype=np.float32, out_channels=1):
    """A fresh :class:`GanPair` for ``profile`` ("dcgan-64" or a toy profile)."""
    if profile == "dcgan-64":
        return GanPair(build_dcgan_generator(out_channels, g_rng, dtype),
                       build_dcgan_discriminator(out_channels, d_rng, dtype), DCGAN_LATENT_DIM, profile)
    g, d, latent = toy_specs(profile)
    return GanPair(Model(g, g_rng, dtype), Model(d, d_rng, dtype), latent, PROFILE_ALIASES.get(profile, profile))


def build_toy_gan(profile, rng=None, dtype=np.float32):
    """Desk-scale MLP GAN pair: gaussian1d, gaussian-mixture-2d or tiny-image-16x16."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_gan(profile, rng, rng, dtype)
