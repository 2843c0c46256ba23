"""Ready-made reconstruction and likelihood hooks.

The SIR hooks rebuild the unobserved susceptible series from the infected
ones using ``S' + I' = -gamma I``, i.e.

    S(t) = S(t0) + I(t0) - I(t) - gamma * int_{t0}^t I(u) du.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .smoothing import cum_trapz


def reconstruct_sir_susceptibles(S0: float, I0: float, gamma: float, times, infected) -> np.ndarray:
    """Susceptible series implied by observed infections and the recovery rate."""
    times = np.asarray(times, dtype=float)
    infected = np.asarray(infected, dtype=float)
    if times.shape != infected.shape:
        raise ValueError("times and infected series differ in length")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return S0 + I0 - infected - gamma * cum_trapz(times, infected)


def sir_reconstruction(s_names: Sequence[str], i_names: Sequence[str], gamma: float | None = None):
    """Hook completing SIR observations.

    With ``gamma`` given the recovery rate is fixed (cases with known
    ``gamma``); otherwise it is read from the current parameter bindings.
    Initial values come from the current x0 bindings, so non-linear trial
    values of ``S0`` are honoured.
    """
    s_names, i_names = tuple(s_names), tuple(i_names)
    if len(s_names) != len(i_names):
        raise ValueError("need one infected series per susceptible series")

    def hook(model, pars, x0, obs):
        g = float(pars["gamma"]) if gamma is None else float(gamma)
        out = dict(obs)
        for s, i in zip(s_names, i_names):
            t, y = obs[i]
            out[s] = (t, reconstruct_sir_susceptibles(float(x0[s]), float(x0[i]), g, t, y))
        return out

    return hook


def gaussian_nll(sigma: float | None = None, sigma_name: str = "sigma"):
    """Negative log-likelihood of i.i.d. Gaussian errors.

    With ``sigma`` ``None`` the standard deviation is read from the
    parameter bindings under ``sigma_name`` (a likelihood-only parameter).
    """

    def nll(pars, times, obs, traj):
        s = float(pars[sigma_name]) if sigma is None else float(sigma)
        if not s > 0:
            return np.inf
        total = 0.0
        for var, y in obs.items():
            r = np.asarray(y) - np.asarray(traj[var])
            total += 0.5 * float(r @ r) / s**2 + r.size * (np.log(s) + 0.5 * np.log(2 * np.pi))
        return total

    return nll
