"""Analytic post-synaptic-potential shape.

The membrane response to a single synaptic event is a difference of
exponentials in the two time constants (membrane and synaptic), normalized so
its peak equals the height parameter exactly; when the constants coincide the
shape degenerates to an alpha function peaking at ``t0 + tau``.
"""

from __future__ import annotations

import numpy as np

# below this relative time-constant difference the difference-of-exponentials
# form is numerically degenerate and the alpha branch takes over
ALPHA_SWITCH = 1e-9


def psp_peak_factor(tau1: float, tau2: float) -> float:
    """Peak value of exp(-s/tau1) - exp(-s/tau2) over s >= 0, signed."""
    r = tau2 / tau1
    if r <= 0.0:
        raise ValueError("time constants must be positive")
    log_r = np.log(r)
    return float(np.exp(r * log_r / (1.0 - r)) - np.exp(log_r / (1.0 - r)))


def psp_peak_time(tau1: float, tau2: float) -> float:
    """Time after onset at which the PSP reaches its peak."""
    if abs(tau1 - tau2) <= ALPHA_SWITCH * max(abs(tau1), abs(tau2)):
        return 0.5 * (tau1 + tau2)
    return tau1 * tau2 * np.log(tau1 / tau2) / (tau1 - tau2)


def psp_analytic(t, t0: float, h: float, tau1: float, tau2: float,
                 e_leak: float = 0.0):
    """Membrane voltage of a single PSP with peak height exactly ``h``.

    ``tau1`` and ``tau2`` are interchangeable; for ``t < t0`` the baseline
    ``e_leak`` is returned. Works on scalars and arrays.
    """
    if tau1 <= 0.0 or tau2 <= 0.0:
        raise ValueError("time constants must be positive")
    t_arr = np.asarray(t, dtype=float)
    scalar = t_arr.ndim == 0
    s = np.atleast_1d(t_arr) - t0
    out = np.full(s.shape, float(e_leak))
    active = s > 0.0
    if abs(tau1 - tau2) <= ALPHA_SWITCH * max(abs(tau1), abs(tau2)):
        x = s[active] / (0.5 * (tau1 + tau2))
        out[active] = e_leak + h * x * np.exp(1.0 - x)
    else:
        f = np.exp(-s[active] / tau1) - np.exp(-s[active] / tau2)
        out[active] = e_leak + h * f / psp_peak_factor(tau1, tau2)
    return float(out[0]) if scalar else out
