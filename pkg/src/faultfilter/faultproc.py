"""Finite-state continuous-time Markov fault process.

Rate-matrix convention: ``Pi[j, k]`` (j != k) is the rate of jumping from
mode ``k`` to mode ``j``; columns sum to zero and the mode distribution
obeys ``dp/dt = Pi @ p``. Modes are 0-based in code and 1-based in files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

__all__ = [
    "QMatrixError",
    "FaultModel",
    "FaultPath",
    "validate_qmatrix",
    "example31_model",
    "sample_path",
    "kolmogorov_solve",
    "grid_size",
]

_COLSUM_TOL = 1e-12


class QMatrixError(ValueError):
    """Rate matrix or initial distribution fails validation."""


@dataclass(frozen=True)
class FaultModel:
    Pi: np.ndarray
    p0: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def N(self):
        return self.Pi.shape[0]

    def transition(self, dt):
        """Exact transition matrix ``expm(Pi dt)``; column ``k`` is the law after ``dt`` from mode ``k``."""
        P = self._cache.get(dt)
        if P is None:
            P = expm(self.Pi * dt)
            P.setflags(write=False)
            self._cache[dt] = P
        return P

    def to_dict(self):
        return {"Pi": self.Pi.tolist(), "p0": self.p0.tolist()}


@dataclass
class FaultPath:
    """A sampled fault trajectory.

    ``modes[k]`` is the (0-based) mode at ``times[k]``; the path is
    right-continuous, so a jump exactly at a grid time is already visible
    there. ``jumps`` lists ``(time, new_mode)`` for every exact jump.
    """

    times: np.ndarray
    modes: np.ndarray
    jumps: list

    @property
    def jump_times(self):
        return [t for t, _ in self.jumps]

    def mode_at(self, t):
        """Exact (off-grid) mode at time ``t``."""
        mode = int(self.modes[0])
        for tj, m in self.jumps:
            if tj <= t:
                mode = m
            else:
                break
        return mode

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mode"])
            for t, m in zip(self.times, self.modes):
                w.writerow([repr(float(t)), int(m) + 1])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.sidecar(), fh, indent=2)

    @classmethod
    def from_sidecar(cls, data, times):
        """Rebuild a path on ``times`` from :meth:`sidecar` output."""
        times = np.asarray(times, dtype=float)
        jumps = [(float(j["t"]), int(j["mode"]) - 1) for j in data.get("jumps", [])]
        initial = int(data["initial_mode"]) - 1
        return cls(times, _discretize(times, jumps, initial), jumps)

    def sidecar(self):
        return {
            "initial_mode": int(self.modes[0]) + 1,
            "jumps": [{"t": float(t), "mode": int(m) + 1} for t, m in self.jumps],
        }


def validate_qmatrix(Pi, p0=None):
    """Check a rate matrix and return a :class:`FaultModel`.

    ``p0`` defaults to all mass on the first mode.
    """
    Pi = np.array(Pi, dtype=float)
    if Pi.ndim != 2 or Pi.shape[0] != Pi.shape[1] or Pi.shape[0] == 0:
        raise QMatrixError(f"rate matrix must be square, got shape {Pi.shape}")
    if not np.all(np.isfinite(Pi)):
        raise QMatrixError("rate matrix has non-finite entries")
    N = Pi.shape[0]
    off = ~np.eye(N, dtype=bool)
    bad = np.argwhere(off & (Pi < 0))
    if bad.size:
        j, k = bad[0]
        raise QMatrixError(
            f"negative off-diagonal rate Pi[{j},{k}] = {Pi[j, k]:g}"
        )
    colsum = Pi.sum(axis=0)
    bad = np.flatnonzero(np.abs(colsum) > _COLSUM_TOL)
    if bad.size:
        k = bad[0]
        raise QMatrixError(f"column {k} of rate matrix sums to {colsum[k]:g}, not 0")
    if p0 is None:
        p0 = np.zeros(N)
        p0[0] = 1.0
    p0 = np.array(p0, dtype=float).ravel()
    if p0.shape != (N,):
        raise QMatrixError(f"p0 has length {p0.size}, expected {N}")
    if np.any(p0 < 0) or abs(p0.sum() - 1.0) > _COLSUM_TOL:
        raise QMatrixError("p0 must be a probability vector")
    Pi.setflags(write=False)
    p0.setflags(write=False)
    return FaultModel(Pi, p0)


def example31_model(rate):
    """Two-mode model where a fault switches on once, at an exponential time."""
    if not rate > 0:
        raise QMatrixError("fault rate must be positive")
    return validate_qmatrix([[-rate, 0.0], [rate, 0.0]], [1.0, 0.0])


def grid_size(T, dt):
    """Number of steps ``T / dt``, which must be an integer."""
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    n = round(T / dt)
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def sample_path(model, T, dt, rng):
    """Sample a path by exact jump times, then read it off the grid."""
    n = grid_size(T, dt)
    times = np.arange(n + 1) * dt
    N = model.N
    mode = int(rng.choice(N, p=model.p0)) if N > 1 else 0
    initial = mode
    exit_rates = -np.diag(model.Pi)
    jumps = []
    t = 0.0
    while True:
        q = exit_rates[mode]
        if q <= 0:
            break
        t += rng.exponential(1.0 / q)
        if t > T:
            break
        probs = model.Pi[:, mode].copy()
        probs[mode] = 0.0
        mode = int(rng.choice(N, p=probs / q))
        jumps.append((t, mode))
    return FaultPath(times, _discretize(times, jumps, initial), jumps)


def _discretize(times, jumps, initial_mode):
    modes = np.full(times.size, initial_mode, dtype=int)
    for tj, m in jumps:
        modes[np.searchsorted(times, tj, side="left"):] = m
    return modes


def kolmogorov_solve(model, T, dt):
    """Classical RK4 solution of ``dp/dt = Pi p`` on the grid ``0, dt, ..., T``."""
    n = grid_size(T, dt)
    Pi = model.Pi
    out = np.empty((n + 1, model.N))
    p = model.p0.astype(float).copy()
    out[0] = p
    for i in range(n):
        k1 = Pi @ p
        k2 = Pi @ (p + 0.5 * dt * k1)
        k3 = Pi @ (p + 0.5 * dt * k2)
        k4 = Pi @ (p + dt * k3)
        p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = p
    return out
