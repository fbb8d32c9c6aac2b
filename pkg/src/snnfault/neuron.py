"""Parametric leaky integrate-and-fire (PLIF) dynamics and the triangular surrogate."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, StructuralError


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class PlifParams:
    """Initial values for one spiking layer.

    ``tau_param`` is the raw learnable parameter; the effective time constant is
    ``1 / sigmoid(tau_param)`` so it always stays above one step. ``v_threshold``
    is shared by every neuron of the layer.
    """

    tau_param: float = 0.0
    v_rest: float = 0.0
    v_threshold: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.tau_param):
            raise ConfigurationError("tau_param must be finite")
        if not self.v_threshold > self.v_rest:
            raise ConfigurationError(
                f"v_threshold ({self.v_threshold}) must exceed v_rest ({self.v_rest})")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be non-negative")

    @property
    def tau(self):
        return 1.0 / sigmoid(self.tau_param)


def plif_step(v, x, tau_param, v_rest, v_threshold):
    """Advance a layer of PLIF neurons by one time step.

    Returns ``(v_next, spikes, z)`` where ``z = h / v_threshold - 1`` is computed
    from the charged (pre-reset) membrane ``h`` and ``v_next = h - v_threshold * spikes``
    (soft reset). A neuron fires only when ``z > 0`` strictly.
    """
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if v.shape != x.shape:
        raise StructuralError(f"membrane shape {v.shape} != input shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input current")
    h = plif_charge(v, x, tau_param, v_rest)
    z = h / v_threshold - 1.0
    spikes = (z > 0).astype(np.float64)
    return h - v_threshold * spikes, spikes, z


def plif_charge(v, x, tau_param, v_rest):
    """Leaky integration ``v + (x - (v - v_rest)) / tau`` with ``1/tau = sigmoid(tau_param)``."""
    k = sigmoid(tau_param)
    return v + k * (x - (v - v_rest))


def surrogate_derivative(z, gamma):
    """Triangular pseudo-derivative of the spike function, peak value ``gamma`` at z=0."""
    return gamma * np.maximum(0.0, 1.0 - np.abs(z))
