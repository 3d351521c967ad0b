"""Fully convolutional network engine: valid convolutions, ReLU, dropout,
backpropagation and Adam.

Tensors are NHWC. Convolution weights are stored as ``(kh, kw, cin, cout)``.
A convolution is computed as a sum of ``kh * kw`` shifted matrix products,
which keeps memory flat and lets BLAS do the work.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
LINEAR = "linear"


@dataclass
class ConvLayer:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    activation: str = RELU
    weights: np.ndarray = None
    bias: np.ndarray = None

    def __post_init__(self):
        if self.activation not in (RELU, LINEAR):
            raise ValueError(f"unknown activation {self.activation!r}")
        shape = (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)
        if self.weights is None:
            self.weights = np.zeros(shape, dtype=np.float32)
        if self.bias is None:
            self.bias = np.zeros(self.out_channels, dtype=self.weights.dtype)
        if self.weights.shape != shape or self.bias.shape != (self.out_channels,):
            raise ValueError(f"parameter shapes do not match layer {shape}")
        self._cache = None

    @property
    def n_params(self):
        return self.kernel_h * self.kernel_w * self.in_channels * self.out_channels + self.out_channels

    def output_shape(self, h, w):
        ho, wo = h - self.kernel_h + 1, w - self.kernel_w + 1
        if ho < 1 or wo < 1:
            raise ValueError(
                f"input {h}x{w} is smaller than the {self.kernel_h}x{self.kernel_w} kernel"
            )
        return ho, wo, self.out_channels

    def forward(self, x, keep_cache):
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(f"layer expects {self.in_channels} channels, got {c}")
        ho, wo, cout = self.output_shape(h, w)
        out = np.empty((n, ho, wo, cout), dtype=x.dtype)
        out[...] = self.bias
        flat = out.reshape(-1, cout)
        for i in range(self.kernel_h):
            for j in range(self.kernel_w):
                patch = x[:, i:i + ho, j:j + wo, :].reshape(-1, c)
                flat += patch @ self.weights[i, j]
        if self.activation == RELU:
            np.maximum(out, 0, out=out)
        self._cache = (x, out) if keep_cache else None
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        x, out = self._cache
        if self.activation == RELU:
            grad_out = grad_out * (out > 0)
        n, h, w, c = x.shape
        _, ho, wo, cout = grad_out.shape
        g = np.ascontiguousarray(grad_out).reshape(-1, cout)
        grad_w = np.empty_like(self.weights)
        grad_x = np.zeros_like(x)
        for i in range(self.kernel_h):
            for j in range(self.kernel_w):
                patch = x[:, i:i + ho, j:j + wo, :].reshape(-1, c)
                grad_w[i, j] = patch.T @ g
                grad_x[:, i:i + ho, j:j + wo, :] += (g @ self.weights[i, j].T).reshape(n, ho, wo, c)
        grad_b = g.sum(axis=0)
        return grad_x, (grad_w, grad_b)

    def params(self):
        return [self.weights, self.bias]


@dataclass
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        self._mask = None

    n_params = 0

    def output_shape(self, h, w, c):
        return h, w, c

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, grad_out):
        return grad_out if self._mask is None else grad_out * self._mask

    def params(self):
        return []


@dataclass
class Network:
    """Ordered stack of :class:`ConvLayer` and :class:`Dropout` entries.

    ``train`` switches dropout on; in inference mode dropout is the identity.
    """

    layers: list
    train: bool = False
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._has_cache = False
        convs = self.conv_layers
        for a, b in zip(convs, convs[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError("consecutive layers disagree on channel count")

    @property
    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, ConvLayer)]

    @property
    def in_channels(self):
        return self.conv_layers[0].in_channels

    @property
    def out_channels(self):
        return self.conv_layers[-1].out_channels

    @property
    def margins(self):
        """Rows and columns lost by the valid convolutions, ``(dh, dw)``."""
        convs = self.conv_layers
        return (sum(c.kernel_h - 1 for c in convs), sum(c.kernel_w - 1 for c in convs))

    @property
    def dtype(self):
        return self.conv_layers[0].weights.dtype

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def layer_shapes(self, h, w):
        """Per-entry output shapes for an ``h x w`` input, as a list of tuples."""
        shapes = []
        c = self.in_channels
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                h, w, c = layer.output_shape(h, w)
            shapes.append((h, w, c))
        return shapes

    def forward(self, x, keep_cache=None, train=None):
        """Run the network on an ``(H, W, C)`` or ``(N, H, W, C)`` tensor.

        ``train`` overrides the network mode for this call. Caches for
        :meth:`backward` are kept in train mode, or whenever ``keep_cache``
        is true.
        """
        if train is None:
            train = self.train
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4:
            raise ValueError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
        if x.shape[3] != self.in_channels:
            raise ValueError(f"network expects {self.in_channels} input channels, got {x.shape[3]}")
        if keep_cache is None:
            keep_cache = train
        dh, dw = self.margins
        if x.shape[1] <= dh or x.shape[2] <= dw:
            raise ValueError(
                f"input {x.shape[1]}x{x.shape[2]} is smaller than the receptive field {dh + 1}x{dw + 1}"
            )
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                x = layer.forward(x, keep_cache)
            else:
                x = layer.forward(x, train, self._rng)
        self._has_cache = keep_cache
        self._single = single
        return x[0] if single else x

    def backward(self, grad_out):
        """Backpropagate ``grad_out`` through the last cached forward pass.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` lines up
        with :meth:`params`.
        """
        if not self._has_cache:
            raise RuntimeError("backward called without a cached forward pass")
        g = np.asarray(grad_out, dtype=self.dtype)
        if self._single:
            g = g[None]
        grads = []
        for layer in reversed(self.layers):
            if isinstance(layer, ConvLayer):
                g, (gw, gb) = layer.backward(g)
                grads.append((gw, gb))
            else:
                g = layer.backward(g)
        param_grads = [t for pair in reversed(grads) for t in pair]
        return param_grads, (g[0] if self._single else g)

    def astype(self, dtype):
        layers = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                layers.append(ConvLayer(layer.kernel_h, layer.kernel_w, layer.in_channels,
                                        layer.out_channels, layer.activation,
                                        layer.weights.astype(dtype), layer.bias.astype(dtype)))
            else:
                layers.append(Dropout(layer.rate))
        return Network(layers, train=self.train, seed=self.seed)


def count_parameters(net):
    return sum(layer.n_params for layer in net.layers)


def build_network(schedule, in_channels, seed=0, dtype=np.float32, zero_last=False):
    """Create a network from a compact layer schedule.

    ``schedule`` entries are ``("conv", kh, kw, cout)`` or ``("dropout", rate)``.
    Every convolution but the last uses ReLU. Weights are He-uniform for ReLU
    layers and Glorot-uniform for the final linear layer; biases start at 0.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    convs = [i for i, entry in enumerate(schedule) if entry[0] == "conv"]
    layers = []
    cin = in_channels
    for i, entry in enumerate(schedule):
        if entry[0] == "dropout":
            layers.append(Dropout(float(entry[1])))
            continue
        _, kh, kw, cout = entry
        last = i == convs[-1]
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
        limit = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(kh, kw, cin, cout)).astype(dtype)
        if last and zero_last:
            w[...] = 0
        layers.append(ConvLayer(kh, kw, cin, cout, LINEAR if last else RELU, w, np.zeros(cout, dtype=dtype)))
        cin = cout
    return Network(layers, seed=seed)


CANONICAL_SCHEDULE = [
    ("conv", 3, 3, 12),
    ("conv", 3, 3, 24),
    ("conv", 3, 3, 32),
    ("dropout", 0.1),
    ("conv", 3, 3, 46),
    ("conv", 3, 3, 72),
    ("dropout", 0.1),
    ("conv", 1, 3, 100),
    ("conv", 3, 3, 200),
    ("conv", 1, 1, 200),
    ("conv", 3, 3, 128),
    ("conv", 1, 3, 64),
    ("conv", 1, 1, 32),
    ("conv", 1, 1, 1),
]

# Same 15x19 receptive field and layer vocabulary, 47,193 parameters.
SMALL_SCHEDULE = [
    ("conv", 3, 3, 12),
    ("conv", 3, 3, 16),
    ("conv", 3, 3, 20),
    ("dropout", 0.1),
    ("conv", 3, 3, 24),
    ("conv", 3, 3, 32),
    ("dropout", 0.1),
    ("conv", 1, 3, 32),
    ("conv", 3, 3, 40),
    ("conv", 1, 1, 40),
    ("conv", 3, 3, 32),
    ("conv", 1, 3, 24),
    ("conv", 1, 1, 16),
    ("conv", 1, 1, 1),
]


def canonical_network(in_channels=6, out_channels=1, seed=0, dtype=np.float32, zero_last=False):
    """The canonical stereo network: 552,775 parameters, 15x19 receptive field."""
    schedule = CANONICAL_SCHEDULE[:-1] + [("conv", 1, 1, out_channels)]
    return build_network(schedule, in_channels, seed=seed, dtype=dtype, zero_last=zero_last)


def small_network(in_channels=6, out_channels=1, seed=0, dtype=np.float32, zero_last=False):
    schedule = SMALL_SCHEDULE[:-1] + [("conv", 1, 1, out_channels)]
    return build_network(schedule, in_channels, seed=seed, dtype=dtype, zero_last=zero_last)


@dataclass
class Adam:
    """Adam optimizer with bias correction.

    Moment buffers are created lazily on the first :meth:`step` and are
    shaped like the network parameters.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = None
    v: list = None

    def step(self, net, grads):
        params = net.params()
        if len(grads) != len(params):
            raise ValueError("gradient list does not match network parameters")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# Checkpoint layout (all integers little-endian):
#   magic b"RPCN", u32 version, u32 entry count
#   per entry: u8 kind (0 conv, 1 dropout)
#     conv:    u32 kh, u32 kw, u32 cin, u32 cout, u8 activation (0 linear, 1 relu)
#     dropout: f32 rate
#   then per conv entry, in order: f32 weights (kh, kw, cin, cout) C-order, f32 bias (cout)
CHECKPOINT_MAGIC = b"RPCN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net, path):
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            parts.append(struct.pack("<BIIIIB", 0, layer.kernel_h, layer.kernel_w, layer.in_channels,
                                     layer.out_channels, 1 if layer.activation == RELU else 0))
        else:
            parts.append(struct.pack("<Bf", 1, layer.rate))
    for layer in net.conv_layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, seed=0):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint (bad magic at offset 0)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header at offset {len(data)}")
    version, n_entries = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    specs = []
    try:
        for _ in range(n_entries):
            (kind,) = struct.unpack_from("<B", data, offset)
            offset += 1
            if kind == 0:
                kh, kw, cin, cout, act = struct.unpack_from("<IIIIB", data, offset)
                offset += 17
                specs.append(("conv", kh, kw, cin, cout, RELU if act else LINEAR))
            elif kind == 1:
                (rate,) = struct.unpack_from("<f", data, offset)
                offset += 4
                specs.append(("dropout", rate))
            else:
                raise CheckpointError(f"{path}: unknown layer kind {kind} at offset {offset - 1}")
    except struct.error:
        raise CheckpointError(f"{path}: truncated layer table at offset {offset}") from None

    layers = []
    for spec in specs:
        if spec[0] == "dropout":
            layers.append(Dropout(float(spec[1])))
            continue
        _, kh, kw, cin, cout, act = spec
        n_w = kh * kw * cin * cout
        need = 4 * (n_w + cout)
        if offset + need > len(data):
            raise CheckpointError(f"{path}: truncated weights at offset {offset}")
        w = np.frombuffer(data, dtype="<f4", count=n_w, offset=offset).reshape(kh, kw, cin, cout)
        b = np.frombuffer(data, dtype="<f4", count=cout, offset=offset + 4 * n_w)
        offset += need
        layers.append(ConvLayer(kh, kw, cin, cout, act, w.astype(np.float32), b.astype(np.float32)))
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return Network(layers, seed=seed)
