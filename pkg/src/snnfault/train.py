"""Surrogate-gradient backpropagation through time and plain SGD training.

The spike nonlinearity is differentiated with the triangular surrogate
``gamma * max(0, 1 - |z|)``. The soft-reset term ``-v_threshold * o`` is
differentiated with respect to the threshold only; the spike inside it is
treated as a constant.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericError, StructuralError
from .network import (Conv, Dropout, Linear, NetworkSpec, NetworkState, Plif, Pool, _merge, _split,
                      accuracy, col2im, forward, max_pool_backward, update_running_stats)
from .neuron import sigmoid, surrogate_derivative

THRESHOLD_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    gamma: float = 1.0
    optimize_threshold: bool = False
    optimize_tau: bool = True
    rng_seed: int = 0
    # per-epoch multiplicative learning-rate decay (1.0 = constant step size)
    lr_decay: float = 1.0
    # "exact" = full BPTT through the membrane recursion; "truncated" = the
    # closed form that keeps only the one-step reset dependence.
    threshold_grad: str = "exact"
    # random translation of each training image by up to this many pixels (0 = off)
    augment_shift: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.threshold_grad not in ("exact", "truncated"):
            raise ConfigurationError(f"threshold_grad must be 'exact' or 'truncated', got {self.threshold_grad!r}")
        if self.augment_shift < 0:
            raise ConfigurationError("augment_shift must be >= 0")


@dataclass
class GradientBundle:
    grads: dict
    loss: float

    def weight_grads(self):
        return {k: v for k, v in self.grads.items() if k.endswith(".weight")}

    def threshold_grads(self):
        return {k: float(v) for k, v in self.grads.items() if k.endswith(".v_threshold")}

    def tau_grads(self):
        return {k: float(v) for k, v in self.grads.items() if k.endswith(".tau_param")}


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def compute_loss(scores, labels):
    """Mean squared error between firing rates and one-hot targets, averaged over batch and classes."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores")
    return float(np.mean((scores - one_hot(labels, scores.shape[1])) ** 2))


def _plif_backward(g_o, h, o, x_in, static, tau_param, v_th, v_rest, gamma, threshold_grad):
    t_steps = h.shape[0]
    k = sigmoid(tau_param)
    g_z = g_o * surrogate_derivative(h / v_th - 1.0, gamma)
    g_x = np.empty_like(h)
    g_u = np.zeros(h.shape[1:])
    g_vth = 0.0
    g_k = 0.0
    for t in reversed(range(t_steps)):
        # u_t = h_t - v_th * o_t ; z_t = h_t / v_th - 1 ; h_t = u_{t-1} + k (x_t - (u_{t-1} - v_rest))
        g_h = g_z[t] / v_th + g_u
        if threshold_grad == "exact":
            g_vth -= np.sum(g_z[t] * h[t]) / v_th ** 2 + np.sum(g_u * o[t])
        else:
            o_prev = o[t - 1] if t > 0 else 0.0
            g_vth += np.sum(g_z[t] * (-v_th * o_prev - h[t])) / v_th ** 2
        u_prev = h[t - 1] - v_th * o[t - 1] if t > 0 else v_rest
        x_t = x_in if static else x_in[t]
        g_k += np.sum(g_h * (x_t - u_prev + v_rest))
        g_x[t] = g_h * k
        g_u = g_h * (1.0 - k)
    g_in = g_x.sum(axis=0) if static else g_x
    return g_in, g_vth, g_k * k * (1.0 - k)


def _bn_backward(g, params, i, bn):
    scale = params[f"{i}.bn_scale"]
    xhat, inv_std = bn["xhat"], bn["inv_std"]
    d_scale = np.sum(g * xhat, axis=(0, 2, 3))
    d_shift = np.sum(g, axis=(0, 2, 3))
    dxhat = g * scale[None, :, None, None]
    if bn["train"]:
        n = g.shape[0] * g.shape[2] * g.shape[3]
        dx = (inv_std[None, :, None, None] / n) * (
            n * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None])
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, d_scale, d_shift


def backward(spec: NetworkSpec, params, state: NetworkState, labels, config: TrainConfig) -> GradientBundle:
    """Gradients of the MSE rate loss w.r.t. every trainable parameter."""
    n_layers = len(spec.layers)
    if len(state.caches) != n_layers or (n_layers - 1) not in state.spikes:
        raise StructuralError("trace was not produced by this network")
    o_last = state.spikes[n_layers - 1]
    t_steps = o_last.shape[0]
    if t_steps != spec.time_steps:
        raise StructuralError("trace length does not match time_steps")
    batch = state.batch_size
    scores = o_last.mean(axis=0).reshape(batch, -1)
    loss = compute_loss(scores, labels)
    g_scores = 2.0 * (scores - one_hot(labels, scores.shape[1])) / scores.size
    g = np.broadcast_to(g_scores.reshape(o_last.shape[1:]) / t_steps, o_last.shape).copy()

    grads = {}
    for i in reversed(range(n_layers)):
        layer, cache = spec.layers[i], state.caches[i]
        static = cache["static"]
        need_input_grad = i > 0
        if isinstance(layer, Plif):
            g, g_vth, g_tau = _plif_backward(
                g, state.membranes[i], state.spikes[i], cache["input"], static,
                float(params[f"{i}.tau_param"]), float(params[f"{i}.v_threshold"]),
                float(params[f"{i}.v_rest"]), config.gamma, config.threshold_grad)
            grads[f"{i}.v_threshold"] = np.array(g_vth)
            grads[f"{i}.tau_param"] = np.array(g_tau)
        elif isinstance(layer, Linear):
            g2 = _merge(g, static).reshape(-1, layer.out_features)
            grads[f"{i}.weight"] = g2.T @ cache["cols"]
            if need_input_grad:
                g = _split((g2 @ params[f"{i}.weight"]).reshape(cache["in_shape"]), static, t_steps)
        elif isinstance(layer, Conv):
            gm = _merge(g, static)
            if layer.batch_norm:
                gm, d_scale, d_shift = _bn_backward(gm, params, i, cache["bn"])
                grads[f"{i}.bn_scale"] = d_scale
                grads[f"{i}.bn_shift"] = d_shift
            g2 = gm.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
            w = params[f"{i}.weight"]
            grads[f"{i}.weight"] = (g2.T @ cache["cols"]).reshape(w.shape)
            if need_input_grad:
                dcols = g2 @ w.reshape(layer.out_channels, -1)
                g = _split(col2im(dcols, cache["in_shape"], layer.kernel_size, layer.padding, layer.stride),
                           static, t_steps)
        elif isinstance(layer, Pool):
            gm = _merge(g, static)
            g = _split(max_pool_backward(gm, cache["idx"], cache["in_shape"], layer.kernel_size), static, t_steps)
        elif isinstance(layer, Dropout):
            if "mask" in cache:
                g = g * cache["mask"]
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {k}")
    return GradientBundle(grads, loss)


def apply_updates(params, bundle: GradientBundle, learning_rate, *, optimize_threshold=True,
                  optimize_tau=True, frozen=None):
    """One SGD step ``p <- p - lr * g``; returns a new parameter dict.

    ``frozen`` maps weight keys to boolean masks of entries that must not move
    (pruned weights). Thresholds are clamped to at least ``v_rest + 1e-3``.
    """
    for k, v in bundle.grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {k}; update rejected")
    out = dict(params)
    for k, g in bundle.grads.items():
        name = k.split(".", 1)[1]
        if name == "v_threshold" and not optimize_threshold:
            continue
        if name == "tau_param" and not optimize_tau:
            continue
        if not np.any(g):
            continue
        if frozen is not None and k in frozen:
            g = np.where(frozen[k], 0.0, g)
        new = params[k] - learning_rate * g
        if name == "v_threshold":
            layer = k.split(".", 1)[0]
            new = np.maximum(new, params[f"{layer}.v_rest"] + THRESHOLD_FLOOR)
        out[k] = np.asarray(new, dtype=np.float64)
    return out


def thresholds(spec, params):
    return [float(params[f"{i}.v_threshold"]) for i in spec.spiking_layers()]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    v_thresholds: list = field(default_factory=list)


def zero_pruned(params, masks):
    out = dict(params)
    for k, m in (masks or {}).items():
        out[k] = np.where(m, 0.0, params[k])
    return out


def random_shift(x, max_shift, rng):
    """Translate each image in ``(B, C, H, W)`` by up to ``max_shift`` pixels per axis, zero-filled."""
    if x.ndim != 4:
        raise ConfigurationError(f"augment_shift needs (B, C, H, W) images, got shape {x.shape}")
    b, _, h, w = x.shape
    m = max_shift
    padded = np.pad(x, ((0, 0), (0, 0), (m, m), (m, m)))
    dy, dx = rng.integers(0, 2 * m + 1, size=(2, b))
    out = np.empty_like(x)
    for i in range(b):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def fit(spec: NetworkSpec, params, x, y, config: TrainConfig, *, evaluate: Optional[Callable] = None,
        prune_masks=None, on_epoch: Optional[Callable] = None):
    """Train for ``config.epochs`` epochs of mini-batch SGD.

    ``prune_masks`` (weight key -> bool mask) keeps pruned weights frozen at zero
    and re-zeroes them at the end of every epoch. ``evaluate(params)`` returns an
    accuracy and is called after every epoch; it defaults to dense accuracy on
    the training set. Returns ``(params, history)``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ConfigurationError("training set is empty")
    evaluate = evaluate or (lambda p: accuracy(spec, p, x, y))
    params = zero_pruned(params, prune_masks)
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.rng_seed, epoch])
        order = rng.permutation(len(x))
        lr = config.learning_rate * config.lr_decay ** epoch
        losses = []
        good = params
        for s in range(0, len(x), config.batch_size):
            idx = order[s:s + config.batch_size]
            xb = x[idx] if not config.augment_shift else random_shift(x[idx], config.augment_shift, rng)
            _, state = forward(spec, params, xb, train=True, rng=rng)
            bundle = backward(spec, params, state, y[idx], config)
            if not np.isfinite(bundle.loss):
                err = NumericError(f"non-finite loss at epoch {epoch}")
                err.checkpoint = good
                raise err
            params = apply_updates(params, bundle, lr,
                                   optimize_threshold=config.optimize_threshold,
                                   optimize_tau=config.optimize_tau, frozen=prune_masks)
            params = update_running_stats(spec, params, state)
            losses.append(bundle.loss)
        params = zero_pruned(params, prune_masks)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), float(evaluate(params)), thresholds(spec, params))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, history


def write_curve_csv(path_or_file, history, append=False):
    """Training curve as CSV: epoch, loss, accuracy and one column per spiking-layer threshold."""
    n_th = len(history[0].v_thresholds) if history else 0
    cols = ["epoch", "loss", "accuracy"] + [f"v_threshold_{j}" for j in range(n_th)]
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "a" if append else "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        if not append:
            f.write("# schema: " + ",".join(cols) + "\n")
            w.writerow(cols)
        for r in history:
            w.writerow([r.epoch, f"{r.loss:.8f}", f"{r.accuracy:.6f}"] + [f"{v:.8f}" for v in r.v_thresholds])
    finally:
        if own:
            f.close()
