"""Single-photon wavepacket envelopes.

A wavepacket ``xi(t)`` on ``t >= 0`` is normalized, ``int_0^inf |xi|^2 = 1``.
Its tail energy ``omega(t) = int_t^inf |xi|^2`` and the ancilla coupling
``lambda(t) = xi(t) / sqrt(omega(t))`` describe a two-level source that,
prepared excited and decaying into vacuum, emits exactly this envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

__all__ = ["Wavepacket", "SHAPES"]

SHAPES = ("exponential", "gaussian", "square", "tabulated")

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Wavepacket:
    """Analytic or tabulated single-photon envelope.

    Use the constructors :meth:`exponential`, :meth:`gaussian`,
    :meth:`square` and :meth:`tabulated` rather than calling this directly.

    Parameters
    ----------
    shape : str
        One of :data:`SHAPES`.
    params : dict
        Shape parameters (``gamma``; ``t_c``, ``tau``; ``t_a``, ``t_b``;
        ``values``, ``step``).
    phase : complex
        Constant unit-modulus factor multiplying ``xi``.
    omega_floor : float
        Below this tail energy the ancilla is treated as fully emitted and
        ``lambda`` is clamped to zero.
    """

    shape: str
    params: dict = field(default_factory=dict)
    phase: complex = 1.0 + 0.0j
    omega_floor: float = 1e-8

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown wavepacket shape {self.shape!r}")
        if abs(abs(self.phase) - 1.0) > 1e-12:
            raise ValueError("phase must be a unit-modulus complex number")
        if not self.omega_floor > 0:
            raise ValueError("omega_floor must be positive")
        object.__setattr__(self, "phase", complex(self.phase))
        norm = self.total_energy()
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"wavepacket energy is {norm:.8g}, expected 1")

    # constructors ---------------------------------------------------------

    @classmethod
    def exponential(cls, gamma=1.0, **kw):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        return cls("exponential", {"gamma": float(gamma)}, **kw)

    @classmethod
    def gaussian(cls, t_c, tau, **kw):
        if not tau > 0:
            raise ValueError("tau must be positive")
        return cls("gaussian", {"t_c": float(t_c), "tau": float(tau)}, **kw)

    @classmethod
    def square(cls, t_a, t_b, **kw):
        if not 0 <= t_a < t_b:
            raise ValueError("square pulse needs 0 <= t_a < t_b")
        return cls("square", {"t_a": float(t_a), "t_b": float(t_b)}, **kw)

    @classmethod
    def tabulated(cls, values, step, **kw):
        """Piecewise-constant envelope, renormalized to unit energy."""
        v = np.asarray(values, dtype=complex).ravel()
        if v.size == 0 or not step > 0:
            raise ValueError("tabulated wavepacket needs values and step > 0")
        energy = float(np.sum(np.abs(v) ** 2) * step)
        if energy <= 0:
            raise ValueError("tabulated wavepacket has zero energy")
        # already-normalized input is kept bit for bit so configs round-trip
        if abs(energy - 1.0) > 1e-12:
            v = v / math.sqrt(energy)
        return cls("tabulated", {"values": tuple(v.tolist()), "step": float(step)}, **kw)

    # evaluation -----------------------------------------------------------

    def xi(self, t):
        """Envelope amplitude at ``t`` (scalar or array)."""
        t = _nonneg(t)
        return self.phase * self._envelope(t)

    def omega(self, t):
        """Remaining photon energy after ``t``."""
        t = _nonneg(t)
        p = self.params
        if self.shape == "exponential":
            out = np.exp(-p["gamma"] * t)
        elif self.shape == "gaussian":
            out = special.ndtr((p["t_c"] - t) / p["tau"]) / special.ndtr(p["t_c"] / p["tau"])
        elif self.shape == "square":
            width = p["t_b"] - p["t_a"]
            out = np.clip((p["t_b"] - t) / width, 0.0, 1.0)
        else:
            v2 = np.abs(np.asarray(p["values"])) ** 2
            h = p["step"]
            tail = np.concatenate([np.cumsum(v2[::-1])[::-1], [0.0]]) * h
            idx = np.minimum(_bin_index(t, h), v2.size)
            partial = np.where(
                idx < v2.size,
                v2[np.minimum(idx, v2.size - 1)] * ((idx + 1) * h - t),
                0.0,
            )
            out = tail[np.minimum(idx + 1, v2.size)] + partial
        return _as_scalar(out)

    def coupling(self, t):
        """Ancilla coupling ``xi / sqrt(omega)``; zero once ``omega < omega_floor``."""
        t = _nonneg(t)
        om = np.asarray(self.omega(t), dtype=float)
        xi = np.asarray(self.xi(t), dtype=complex)
        live = om >= self.omega_floor
        out = np.where(live, xi / np.sqrt(np.where(live, om, 1.0)), 0.0)
        return _as_scalar(out)

    def source(self, t):
        """Envelope seen by the filter: ``xi(t)`` while the ancilla is live, else 0."""
        t = _nonneg(t)
        live = np.asarray(self.omega(t)) >= self.omega_floor
        return _as_scalar(np.where(live, self.xi(t), 0.0))

    def is_clamped(self, t):
        return np.asarray(self.omega(t)) < self.omega_floor

    def total_energy(self):
        """``int_0^inf |xi|^2`` by quadrature (exact sum for tabulated)."""
        if self.shape == "tabulated":
            v = np.asarray(self.params["values"])
            return float(np.sum(np.abs(v) ** 2) * self.params["step"])
        f = lambda s: float(abs(self._envelope(s)) ** 2)
        pts = self._breakpoints()
        total = 0.0
        edges = [0.0, *pts]
        for a, b in zip(edges[:-1], edges[1:]):
            total += integrate.quad(f, a, b, epsabs=1e-12, limit=200)[0]
        total += integrate.quad(f, edges[-1], np.inf, epsabs=1e-12, limit=200)[0]
        return total

    def to_dict(self):
        d = {"shape": self.shape}
        if self.shape == "tabulated":
            d["values"] = [[z.real, z.imag] for z in self.params["values"]]
            d["step"] = self.params["step"]
        else:
            d.update(self.params)
        if self.phase != 1:
            d["phase"] = [self.phase.real, self.phase.imag]
        d["omega_floor"] = self.omega_floor
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        shape = d.pop("shape", None)
        kw = {}
        if "omega_floor" in d:
            kw["omega_floor"] = float(d.pop("omega_floor"))
        if "phase" in d:
            ph = d.pop("phase")
            kw["phase"] = complex(*ph) if isinstance(ph, (list, tuple)) else complex(ph)
        try:
            if shape == "exponential":
                return cls.exponential(d.pop("gamma"), **kw)
            if shape == "gaussian":
                return cls.gaussian(d.pop("t_c"), d.pop("tau"), **kw)
            if shape == "square":
                return cls.square(d.pop("t_a"), d.pop("t_b"), **kw)
            if shape == "tabulated":
                vals = [complex(*v) if isinstance(v, (list, tuple)) else complex(v)
                        for v in d.pop("values")]
                return cls.tabulated(vals, d.pop("step"), **kw)
        except KeyError as exc:
            raise ValueError(f"wavepacket {shape!r} missing parameter {exc}") from None
        raise ValueError(f"unknown wavepacket shape {shape!r}")

    # internals ------------------------------------------------------------

    def _envelope(self, t):
        p = self.params
        t = np.asarray(t, dtype=float)
        if self.shape == "exponential":
            out = np.sqrt(p["gamma"]) * np.exp(-0.5 * p["gamma"] * t)
        elif self.shape == "gaussian":
            tc, tau = p["t_c"], p["tau"]
            dens = np.exp(-0.5 * ((t - tc) / tau) ** 2) / (tau * math.sqrt(2 * math.pi))
            out = np.sqrt(dens / special.ndtr(tc / tau))
        elif self.shape == "square":
            inside = (t >= p["t_a"]) & (t < p["t_b"])
            out = np.where(inside, 1.0 / math.sqrt(p["t_b"] - p["t_a"]), 0.0)
        else:
            v = np.asarray(p["values"])
            idx = _bin_index(t, p["step"])
            out = np.where(idx < v.size, v[np.minimum(idx, v.size - 1)], 0.0)
        return _as_scalar(out)

    def _breakpoints(self):
        p = self.params
        if self.shape == "square":
            return [p["t_a"], p["t_b"]]
        if self.shape == "gaussian":
            return [max(p["t_c"], 0.0) + 1e-9]
        return []


def _nonneg(t):
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise ValueError("wavepacket evaluated at negative time")
    return arr


def _bin_index(t, h):
    # guard against t/h landing a hair below an integer
    return np.floor(np.asarray(t) / h + 1e-9).astype(int)


def _as_scalar(x):
    x = np.asarray(x)
    return x[()] if x.ndim == 0 else x
