"""The exponential smoothstep shared by the cutoff and the shell corrector."""

from __future__ import annotations

import numpy as np


def _flat(tau):
    out = np.zeros_like(tau)
    m = tau > 0
    out[m] = np.exp(-1.0 / tau[m])
    return out


def smoothstep(tau) -> np.ndarray:
    """``e^{-1/t} / (e^{-1/t} + e^{-1/(1-t)})`` on (0, 1), 0 below and 1 above."""
    tau = np.asarray(tau, dtype=float)
    a = _flat(tau)
    b = _flat(1.0 - tau)
    return a / (a + b)


def smoothstep_derivative(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    m = (tau > 0) & (tau < 1)
    t = tau[m]
    # divide through by e^{-1/t} e^{-1/(1-t)} to keep the ratio finite near the ends
    with np.errstate(over="ignore", divide="ignore"):
        ea = np.exp(1.0 / t - 1.0 / (1.0 - t))
        out[m] = (1.0 / t**2 + 1.0 / (1.0 - t) ** 2) / (ea + 2.0 + 1.0 / ea)
    return out


def smoothstep_second_derivative(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    m = (tau > 0) & (tau < 1)
    t = tau[m]
    g = 1.0 / t**2 + 1.0 / (1.0 - t) ** 2
    dg = -2.0 / t**3 + 2.0 / (1.0 - t) ** 3
    z = 1.0 / t - 1.0 / (1.0 - t)
    out[m] = smoothstep_derivative(t) * (dg / g + g * np.tanh(0.5 * z))
    return out
