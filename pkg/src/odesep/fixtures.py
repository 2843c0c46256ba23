"""Reference systems with known parameters, and a noisy-data simulator.

Each builder returns a :class:`Reference` holding the equations, true
parameter and initial values, and the sampling times used in the worked
examples. Roles are left to the caller (``OdeModel.build`` arguments).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fitpipe import ObservationSet
from .model import OdeModel
from .odesolve import ExternalInput, solve_ode
from .rng import Xoshiro256


@dataclass(frozen=True)
class Reference:
    equations: Mapping[str, str]
    theta: Mapping[str, float]
    x0: Mapping[str, float]
    times: np.ndarray
    inputs: tuple = ()
    extra: Mapping[str, object] = field(default_factory=dict)

    @property
    def variables(self) -> tuple:
        return tuple(self.equations)

    def model(self, **roles) -> OdeModel:
        """The system with parameters declared in ``theta`` order, then likelihood-only ones."""
        extra = [p for p in roles.get("likelihood", ()) if p not in self.theta]
        return OdeModel.build(self.equations, parameters=list(self.theta) + extra,
                              inputs=[u.name for u in self.inputs], **roles)


def simulate(model: OdeModel, theta: Mapping[str, float], x0: Mapping[str, float], times,
             sigma: float = 0.0, seed: int = 0, inputs: Sequence[ExternalInput] = (),
             observed: Sequence[str] | None = None, rng: Xoshiro256 | None = None):
    """Solve the system and add i.i.d. Gaussian noise.

    Returns ``(observations, truth)``; the noise for each observed variable
    is drawn in variable order, one variable at a time.
    """
    times = np.asarray(times, dtype=float)
    traj = solve_ode(model, theta, x0, times, inputs)
    g = rng or Xoshiro256(seed)
    observed = model.variables if observed is None else tuple(observed)
    series = {}
    for v in observed:
        y = traj[v] + (g.normals(times.size, sigma) if sigma > 0 else 0.0)
        series[v] = (times, y)
    return ObservationSet(series, tuple(inputs)), traj


def biochemical(n: int = 50) -> Reference:
    """Two-variable power-law system with rate constants and kinetic orders."""
    return Reference(
        {"x1": "alpha1*(x2^g12)-beta1*(x1^h11)", "x2": "alpha2*(x1^g21)-beta2*(x2^h22)"},
        {"alpha1": 2.0, "g12": 1.0, "beta1": 2.4, "h11": 0.5,
         "alpha2": 4.0, "g21": 0.1, "beta2": 2.0, "h22": 1.0},
        {"x1": 2.0, "x2": 0.1},
        np.linspace(0.0, 10.0, n),
    )


BIOCHEMICAL_LINEAR = ("alpha1", "beta1", "alpha2", "beta2")
BIOCHEMICAL_KINETIC = ("g12", "h11", "g21", "h22")


def lotka_volterra(n: int = 100, theta=None, x0=None) -> Reference:
    return Reference(
        {"X": "alpha*X-beta*X*Y", "Y": "delta*X*Y-gamma*Y"},
        dict(theta or {"alpha": 2 / 3, "beta": 4 / 3, "gamma": 1.0, "delta": 1.0}),
        dict(x0 or {"X": 0.9, "Y": 0.9}),
        np.linspace(0.0, 25.0, n),
    )


def forced_lotka_volterra(n: int = 100) -> Reference:
    """Predation rate with a seasonal sine forcing written directly in ``t``."""
    season = "(1+epsilon*sin(2*pi*(t/50+omega)))"
    return Reference(
        {"X": f"alpha*X-beta*{season}*X*Y", "Y": f"delta*{season}*X*Y-gamma*Y"},
        {"alpha": 2 / 3, "beta": 4 / 3, "gamma": 1.0, "delta": 1.0, "epsilon": 0.2, "omega": 0.5},
        {"X": 0.9, "Y": 0.9},
        np.linspace(1.0, 50.0, n),
    )


def tabulated_lotka_volterra(n: int = 100) -> Reference:
    """Seasonal forcing supplied as a sampled input named ``seasonality``."""
    times = np.linspace(1.0, 50.0, n)
    u = ExternalInput.tabulated("seasonality", times, np.sin(2 * np.pi * (times / 50 + 0.5)))
    return Reference(
        {"X": "alpha*X-beta*(1+epsilon*seasonality)*X*Y", "Y": "delta*(1+epsilon*seasonality)*X*Y-gamma*Y"},
        {"alpha": 2 / 3, "beta": 4 / 3, "gamma": 1.0, "delta": 1.0, "epsilon": 0.2},
        {"X": 0.9, "Y": 0.9},
        times,
        (u,),
    )


def fitzhugh_nagumo(n: int = 40) -> Reference:
    return Reference(
        {"V": "c*(V-V^3/3+R)", "R": "-(V-a+b*R)/c"},
        {"a": 0.2, "b": 0.2, "c": 3.0},
        {"V": -1.0, "R": 1.0},
        np.linspace(0.0, 20.0, n),
    )


SIR_S0 = (0.56, 0.57, 0.49, 0.45, 0.56, 0.32, 0.56, 0.47, 0.47, 0.41)
SIR_KAPPA = (0.988, 1.182, 1.037, 1.052)
SIR_I0 = 1e-4


def sir(ages: int = 2, seasons: int = 5, weeks: int = 18) -> Reference:
    """Age-structured SIR over several seasons; ``S{a}_{y}``, ``I{a}_{y}``.

    Transmission ``beta{a}_{j}`` is shared by all seasons, ``kappa{y}``
    scales infectivity of season ``y >= 2`` and ``gamma`` is the recovery rate.
    """
    eqs, s_names, i_names = {}, [], []
    for y in range(1, seasons + 1):
        for a in range(1, ages + 1):
            k = "" if y == 1 else f"kappa{y}*"
            force = "+".join(f"beta{a}_{j}*I{j}_{y}" for j in range(1, ages + 1))
            eqs[f"S{a}_{y}"] = f"-S{a}_{y}*{k}({force})"
            s_names.append(f"S{a}_{y}")
    for y in range(1, seasons + 1):
        for a in range(1, ages + 1):
            k = "" if y == 1 else f"kappa{y}*"
            force = "+".join(f"beta{a}_{j}*I{j}_{y}" for j in range(1, ages + 1))
            eqs[f"I{a}_{y}"] = f"S{a}_{y}*{k}({force})-gamma*I{a}_{y}"
            i_names.append(f"I{a}_{y}")
    beta = {"beta1_1": 6.0, "beta2_1": 2.0, "beta1_2": 1.0, "beta2_2": 3.0}
    if ages != 2:
        beta = {f"beta{a}_{j}": 2.0 + (a == j) for a in range(1, ages + 1) for j in range(1, ages + 1)}
    theta = dict(beta, gamma=7 / 3)
    kap = SIR_KAPPA if seasons == 5 else tuple(1.0 for _ in range(seasons - 1))
    theta.update({f"kappa{y}": kap[y - 2] for y in range(2, seasons + 1)})
    s0 = SIR_S0 if (ages, seasons) == (2, 5) else tuple(0.5 for _ in s_names)
    x0 = dict(zip(s_names, s0))
    x0.update({v: SIR_I0 for v in i_names})
    return Reference(eqs, theta, x0, np.arange(1.0, weeks + 1.0),
                     extra={"S": tuple(s_names), "I": tuple(i_names), "beta": tuple(beta)})
