"""Layered PLIF network description, parameter initialisation and time-stepped forward pass.

Activations flow through the network either as a *static* batch ``(B, ...)``
(analog input presented as a constant current at every step, before the first
spiking layer) or as a spike sequence ``(T, B, ...)``. Static activations are
broadcast over time when they reach a spiking layer, so the encoder
convolution is evaluated once per sample instead of ``T`` times.

Weighted layers never compute their contraction directly: they hand a lowered
weight matrix and an input matrix to a *contraction* callable. The default is a
float matmul; the systolic simulator swaps in a fixed-point, fault-injectable
version.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, StructuralError
from .neuron import PlifParams, plif_charge

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    padding: int = 1
    stride: int = 1
    batch_norm: bool = False
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class Pool:
    kernel_size: int = 2
    kind: str = field(default="pool", init=False)


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5
    kind: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class Plif:
    params: PlifParams = PlifParams()
    kind: str = field(default="plif", init=False)


Layer = Union[Conv, Linear, Pool, Dropout, Plif]
_KINDS = {"conv": Conv, "linear": Linear, "pool": Pool, "dropout": Dropout, "plif": Plif}

TRAINABLE_SUFFIXES = ("weight", "bn_scale", "bn_shift", "tau_param", "v_threshold")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    time_steps: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.time_steps <= 0:
            raise ConfigurationError("time_steps must be a positive integer")
        if not self.layers or not isinstance(self.layers[-1], Plif):
            raise StructuralError("the last layer must be a spiking (plif) layer")
        self.shapes()

    def shapes(self):
        """Per-layer output shapes (without batch/time axes)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise StructuralError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                k, p, s = layer.kernel_size, layer.padding, layer.stride
                h = (shape[1] + 2 * p - k) // s + 1
                w = (shape[2] + 2 * p - k) // s + 1
                if h <= 0 or w <= 0:
                    raise StructuralError(f"layer {i}: kernel larger than input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Linear):
                if int(np.prod(shape)) != layer.in_features:
                    raise StructuralError(
                        f"layer {i}: linear expects {layer.in_features} inputs, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Pool):
                if len(shape) != 3:
                    raise StructuralError(f"layer {i}: pooling needs (C, H, W) input, got {shape}")
                shape = (shape[0], shape[1] // layer.kernel_size, shape[2] // layer.kernel_size)
            out.append(shape)
        return out

    @property
    def num_classes(self):
        return int(np.prod(self.shapes()[-1]))

    def weight_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv, Linear))]

    def spiking_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, Plif)]

    def array_layers(self, spiking_input=False):
        """Weighted layers whose input is a binary spike tensor, i.e. that run on the PE grid.

        With analog input the layers before the first spiking layer (the encoder)
        see real-valued currents and are evaluated off the array.
        """
        seen_spikes = spiking_input
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, Linear)) and seen_spikes:
                out.append(i)
            if isinstance(layer, Plif):
                seen_spikes = True
        return out

    def lowered_shapes(self):
        """Matrix shape ``(out, in)`` of every weighted layer after im2col lowering."""
        out = {}
        for i in self.weight_layers():
            layer = self.layers[i]
            if isinstance(layer, Conv):
                out[i] = (layer.out_channels, layer.in_channels * layer.kernel_size ** 2)
            else:
                out[i] = (layer.out_features, layer.in_features)
        return out

    # -- serialisation -------------------------------------------------------
    def to_dict(self):
        layers = []
        for layer in self.layers:
            d = asdict(layer)
            if isinstance(layer, Plif):
                d["params"] = asdict(layer.params)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "time_steps": self.time_steps, "layers": layers}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"input_shape", "time_steps", "layers"}
        if unknown:
            raise ConfigurationError(f"unknown network keys: {sorted(unknown)}")
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind", None)
            if kind not in _KINDS:
                raise ConfigurationError(f"unknown layer kind {kind!r}")
            if kind == "plif":
                ld["params"] = PlifParams(**ld.get("params", {}))
            try:
                layers.append(_KINDS[kind](**ld))
            except TypeError as e:
                raise ConfigurationError(f"bad {kind} layer: {e}") from None
        return cls(tuple(d["input_shape"]), tuple(layers), int(d.get("time_steps", 8)))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def desk_network(time_steps=8, channels=(12, 24), plif=PlifParams()):
    """Default desk-scale MNIST net.

    conv(1->12, 3x3)+PLIF, maxpool(2), conv(12->24, 3x3)+PLIF, maxpool(2),
    fc(->10)+PLIF. The first conv is the analog encoder; the second conv and the
    classifier run on the systolic array. With only the encoder conv, nothing
    but the readout would be exposed to array faults, and accuracy on a
    2,000-image training set stays well short of 95%.
    """
    c1, c2 = channels
    return NetworkSpec(
        input_shape=(1, 28, 28),
        layers=(
            Conv(1, c1, 3, padding=1),
            Plif(plif),
            Pool(2),
            Conv(c1, c2, 3, padding=1),
            Plif(plif),
            Pool(2),
            Linear(c2 * 7 * 7, 10),
            Plif(plif),
        ),
        time_steps=time_steps,
    )


def full_network(time_steps=8, channels=128, hidden=2048, plif=PlifParams()):
    """Full-size MNIST classifier layout (encoder + 2x conv block + 2x fc block)."""
    layers = [Conv(1, channels, 3, batch_norm=True), Plif(plif)]
    size = 28
    for _ in range(2):
        layers += [Conv(channels, channels, 3, batch_norm=True), Plif(plif), Pool(2)]
        size //= 2
    layers += [Dropout(0.5), Linear(channels * size * size, hidden), Plif(plif),
               Dropout(0.5), Linear(hidden, 10), Plif(plif)]
    return NetworkSpec((1, 28, 28), tuple(layers), time_steps)


def init_params(spec: NetworkSpec, seed=0, gain=1.0):
    """Uniform fan-in initialisation (bound ``gain * sqrt(3 / fan_in)``); no biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            bound = gain * np.sqrt(3.0 / fan_in)
            params[f"{i}.weight"] = rng.uniform(
                -bound, bound, (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size))
            if layer.batch_norm:
                params[f"{i}.bn_scale"] = np.ones(layer.out_channels)
                params[f"{i}.bn_shift"] = np.zeros(layer.out_channels)
                params[f"{i}.bn_mean"] = np.zeros(layer.out_channels)
                params[f"{i}.bn_var"] = np.ones(layer.out_channels)
        elif isinstance(layer, Linear):
            bound = gain * np.sqrt(3.0 / layer.in_features)
            params[f"{i}.weight"] = rng.uniform(-bound, bound, (layer.out_features, layer.in_features))
        elif isinstance(layer, Plif):
            params[f"{i}.tau_param"] = np.array(float(layer.params.tau_param))
            params[f"{i}.v_threshold"] = np.array(float(layer.params.v_threshold))
            params[f"{i}.v_rest"] = np.array(float(layer.params.v_rest))
    return params


def trainable_keys(params):
    return [k for k in params if k.split(".", 1)[1] in TRAINABLE_SUFFIXES]


# -- lowering helpers ----------------------------------------------------------

def im2col(x, k, padding, stride):
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k), column order (c, kh, kw)."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (ho, wo)


def col2im(dcols, x_shape, k, padding, stride):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    d = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    dx = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[i, j]
    return dx[:, :, padding:padding + h, padding:padding + w]


def max_pool(x, k):
    """Non-overlapping k x k max pooling; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], -1)[..., 0], idx


def max_pool_backward(g, idx, x_shape, k):
    n, c, h, w = x_shape
    ho, wo = idx.shape[2:]
    blocks = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(blocks, idx[..., None], g[..., None], -1)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * k, :wo * k] = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho * k, wo * k)
    return dx


def dense_contract(layer_index, w2d, cols, on_array):
    return cols @ w2d.T


Contract = Callable[[int, np.ndarray, np.ndarray, bool], np.ndarray]


# -- forward -------------------------------------------------------------------

@dataclass
class NetworkState:
    """Everything recorded by :func:`forward` that backpropagation needs.

    ``membranes[i]`` holds the charged (pre-reset) membrane of spiking layer ``i``
    for every step, ``spikes[i]`` the emitted spikes; both are ``(T, B, ...)``.
    """

    static_input: bool
    batch_size: int
    train: bool
    membranes: dict = field(default_factory=dict)
    spikes: dict = field(default_factory=dict)
    caches: list = field(default_factory=list)


def _merge(a, static):
    return a if static else a.reshape((-1,) + a.shape[2:])


def _split(a, static, t):
    return a if static else a.reshape((t, -1) + a.shape[1:])


def forward(spec: NetworkSpec, params, x, *, train=False, rng=None, contract: Optional[Contract] = None):
    """Run the network for ``spec.time_steps`` steps.

    ``x`` is either a static analog batch ``(B, *input_shape)`` fed as constant
    current at every step, or a binary spike sequence ``(T, B, *input_shape)``.
    Returns ``(scores, state)`` where ``scores[b, k]`` is the firing rate of output
    unit ``k`` averaged over the ``T`` steps.
    """
    contract = contract or dense_contract
    t_steps = spec.time_steps
    x = np.asarray(x, dtype=np.float64)
    nd = len(spec.input_shape)
    if x.shape[-nd:] != spec.input_shape or x.ndim not in (nd + 1, nd + 2):
        raise StructuralError(f"input shape {x.shape} does not match {spec.input_shape}")
    static = x.ndim == nd + 1
    if not static:
        if x.shape[0] != t_steps:
            raise StructuralError(f"spike input has {x.shape[0]} steps, network expects {t_steps}")
        if not np.all((x == 0) | (x == 1)):
            raise StructuralError("spike input must be binary")
    batch = x.shape[0] if static else x.shape[1]
    if batch == 0:
        raise ConfigurationError("empty batch")
    if train and rng is None:
        rng = np.random.default_rng(0)
    on_array = set(spec.array_layers(spiking_input=not static))

    state = NetworkState(static_input=static, batch_size=batch, train=train)
    a = x
    for i, layer in enumerate(spec.layers):
        cache = {"static": static}
        if isinstance(layer, Conv):
            inp = _merge(a, static)
            cols, (ho, wo) = im2col(inp, layer.kernel_size, layer.padding, layer.stride)
            w2d = params[f"{i}.weight"].reshape(layer.out_channels, -1)
            out = contract(i, w2d, cols, i in on_array)
            n = inp.shape[0]
            out = out.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
            cache.update(cols=cols, in_shape=inp.shape)
            if layer.batch_norm:
                out, cache["bn"] = _bn_forward(out, params, i, train)
            a = _split(out, static, t_steps)
        elif isinstance(layer, Linear):
            inp = _merge(a, static)
            cols = inp.reshape(inp.shape[0], -1)
            out = contract(i, params[f"{i}.weight"], cols, i in on_array)
            cache.update(cols=cols, in_shape=inp.shape)
            a = _split(out, static, t_steps)
        elif isinstance(layer, Pool):
            inp = _merge(a, static)
            out, idx = max_pool(inp, layer.kernel_size)
            cache.update(idx=idx, in_shape=inp.shape)
            a = _split(out, static, t_steps)
        elif isinstance(layer, Dropout):
            if train and layer.p > 0:
                shape = a.shape if static else a.shape[1:]
                mask = (rng.random(shape) >= layer.p) / (1.0 - layer.p)
                cache["mask"] = mask
                a = a * mask
        elif isinstance(layer, Plif):
            cur = np.broadcast_to(a, (t_steps,) + a.shape) if static else a
            tau_param = float(params[f"{i}.tau_param"])
            v_th = float(params[f"{i}.v_threshold"])
            v_rest = float(params[f"{i}.v_rest"])
            v = np.full(cur.shape[1:], v_rest)
            h_all = np.empty(cur.shape)
            o_all = np.empty(cur.shape)
            if not np.all(np.isfinite(a)):
                raise NumericError(f"layer {i}: non-finite input current")
            for t in range(t_steps):
                h = plif_charge(v, cur[t], tau_param, v_rest)
                o = (h / v_th - 1.0 > 0).astype(np.float64)
                h_all[t] = h
                o_all[t] = o
                v = h - v_th * o
            state.membranes[i] = h_all
            state.spikes[i] = o_all
            cache["input"] = a
            a = o_all
            static = False
        state.caches.append(cache)
    scores = a.mean(axis=0).reshape(batch, -1)
    return scores, state


def _bn_forward(x, params, i, train):
    scale, shift = params[f"{i}.bn_scale"], params[f"{i}.bn_shift"]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = params[f"{i}.bn_mean"], params[f"{i}.bn_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return out, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var, "train": train}


def update_running_stats(spec, params, state, momentum=BN_MOMENTUM):
    """Return ``params`` with BN running statistics nudged toward the batch statistics in ``state``."""
    out = dict(params)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv) and layer.batch_norm:
            bn = state.caches[i]["bn"]
            out[f"{i}.bn_mean"] = (1 - momentum) * params[f"{i}.bn_mean"] + momentum * bn["mean"]
            out[f"{i}.bn_var"] = (1 - momentum) * params[f"{i}.bn_var"] + momentum * bn["var"]
    return out


def predict(spec, params, x, batch_size=256, contract=None):
    """Top-1 class per sample; ties resolve to the lowest class index."""
    preds = []
    for s in range(0, len(x), batch_size):
        scores, _ = forward(spec, params, x[s:s + batch_size], contract=contract)
        preds.append(scores.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(spec, params, x, y, batch_size=256, contract=None):
    if len(x) == 0:
        raise ConfigurationError("dataset is empty")
    return float(np.mean(predict(spec, params, x, batch_size, contract) == np.asarray(y)))
