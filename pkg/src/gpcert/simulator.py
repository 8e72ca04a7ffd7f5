"""Forward-Euler closed-loop simulation of the true plant."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .controller import ClosedLoopModel, optimal_input, value


class NonFiniteState(FloatingPointError):
    pass


def pendulum_f(x) -> np.ndarray:
    """Damped pendulum drift: [x2, -(9.8 sin x1 + x2)]."""
    return np.array([x[1], -(9.8 * math.sin(x[0]) + x[1])])


PENDULUM_G = np.array([[0.0], [1.0]])


@dataclass(frozen=True)
class PlantSpec:
    f_true: object
    g_true: np.ndarray
    dt: float = 0.005
    horizon: float = 20.0
    convergence_radius: float = 0.1
    divergence_radius: float = 50.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ValueError("horizon must be at least one step")
        object.__setattr__(self, "g_true", np.atleast_2d(np.asarray(self.g_true, dtype=float)))

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @classmethod
    def pendulum(cls, **kw) -> "PlantSpec":
        return cls(pendulum_f, PENDULUM_G, **kw)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    values: np.ndarray
    status: str             # converged | diverged | timeout
    error: str | None = field(default=None)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_csv(self) -> str:
        n, m = self.states.shape[1], self.inputs.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)] + ["V"])
        for t, x, u, v in zip(self.times, self.states, self.inputs, self.values):
            w.writerow([repr(float(t))] + [repr(float(a)) for a in x] + [repr(float(a)) for a in u] + [repr(float(v))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "x0": self.states[0].tolist(),
            "x_final": self.final_state.tolist(),
            "status": self.status,
            "steps": int(self.times.size - 1),
            "error": self.error,
        }


def simulate(plant: PlantSpec, controller: ClosedLoopModel | None, x0) -> Trajectory:
    """Integrate x+ = x + dt (f(x) + g u(x)) to the horizon.

    Stops early only when the state leaves the divergence radius.  The
    terminal state decides the classification.  ``controller=None`` applies
    u = 0 and logs V = 0.
    """
    x = np.array(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("initial state is not finite")
    m_in = plant.g_true.shape[1]
    steps = plant.steps
    xs = np.empty((steps + 1, x.size))
    us = np.zeros((steps + 1, m_in))
    vs = np.zeros(steps + 1)
    status = "timeout"
    k = 0
    for k in range(steps + 1):
        xs[k] = x
        if controller is not None:
            us[k] = optimal_input(controller, x)
            vs[k] = value(controller.value, x)
        if not (np.all(np.isfinite(us[k])) and math.isfinite(vs[k])):
            raise NonFiniteState(f"non-finite input at step {k}")
        if np.linalg.norm(x) > plant.divergence_radius:
            status = "diverged"
            break
        if k == steps:
            break
        x = x + plant.dt * (np.asarray(plant.f_true(x), dtype=float) + plant.g_true @ us[k])
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state became non-finite at step {k + 1}")
    n_keep = k + 1
    if status != "diverged":
        status = "converged" if np.linalg.norm(xs[k]) < plant.convergence_radius else "timeout"
    times = np.arange(n_keep) * plant.dt
    return Trajectory(times, xs[:n_keep], us[:n_keep], vs[:n_keep], status)


def sweep(plant: PlantSpec, controller: ClosedLoopModel | None, initial_states) -> list[Trajectory]:
    """One simulation per start; failures are recorded as ``status='error'``."""
    out = []
    for x0 in initial_states:
        try:
            out.append(simulate(plant, controller, x0))
        except NonFiniteState as exc:
            x = np.atleast_2d(np.asarray(x0, dtype=float))
            out.append(Trajectory(np.zeros(1), x, np.zeros((1, plant.g_true.shape[1])), np.zeros(1),
                                  "error", str(exc)))
    return out


def grid_states(box, per_axis: int) -> np.ndarray:
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
