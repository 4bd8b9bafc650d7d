"""Ancilla-source / atom cascade on ``C^2 (x) H_S``.

The atom ``G_s = (I, L, H(mode))`` is driven by the output of a two-level
ancilla ``(I, lambda(t) sigma_-, 0)``. The series product gives

    L_total = lambda sigma_- (x) I + I (x) L
    H_total = I (x) H(mode) + Im{ lambda sigma_- (x) L^dag }

with ``Im{X} = (X - X^dag) / 2i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .linop import (
    DimensionError,
    HermiticityError,
    check_density_matrix,
    dag,
    identity,
    is_hermitian,
    sigma_minus,
    tensor,
)

__all__ = ["PlantModel", "CascadeOps", "assemble", "imag_part"]

_HERM_TOL = 1e-10


@dataclass(frozen=True)
class PlantModel:
    """Atom model with one Hamiltonian per fault mode.

    Attributes
    ----------
    H_modes : ndarray, shape (N, n, n)
    L : ndarray, shape (n, n)
        Atom coupling to the probe field.
    pi0 : ndarray, shape (n, n)
        Initial atom density matrix.
    """

    H_modes: np.ndarray
    L: np.ndarray
    pi0: np.ndarray

    def __post_init__(self):
        H = np.array(self.H_modes, dtype=complex)
        if H.ndim == 2:
            H = H[None]
        if H.ndim != 3 or H.shape[1] != H.shape[2]:
            raise DimensionError(f"H_modes must have shape (N, n, n), got {H.shape}")
        n = H.shape[1]
        L = np.array(self.L, dtype=complex)
        if L.shape != (n, n):
            raise DimensionError(f"L has shape {L.shape}, expected {(n, n)}")
        for j, Hj in enumerate(H):
            if not is_hermitian(Hj, _HERM_TOL):
                raise HermiticityError(f"H_modes[{j}] is not Hermitian")
        pi0 = check_density_matrix(np.array(self.pi0, dtype=complex), name="pi0")
        if pi0.shape != (n, n):
            raise DimensionError(f"pi0 has shape {pi0.shape}, expected {(n, n)}")
        for a in (H, L, pi0):
            a.setflags(write=False)
        object.__setattr__(self, "H_modes", H)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "pi0", pi0)

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def N(self):
        return self.H_modes.shape[0]

    @cached_property
    def L_dag(self):
        return dag(self.L)

    @cached_property
    def LdL(self):
        return self.L_dag @ self.L

    @cached_property
    def quadrature(self):
        """``L + L^dag``, the atom part of the homodyne signal."""
        return self.L + self.L_dag

    @cached_property
    def effective(self):
        """Non-Hermitian generators ``-i H_j - L^dag L / 2``, shape (N, n, n)."""
        return -1j * self.H_modes - 0.5 * self.LdL

    def single_mode(self, mode=0):
        """Fault-free plant frozen in ``mode``."""
        return PlantModel(self.H_modes[mode : mode + 1], self.L, self.pi0)


@dataclass(frozen=True)
class CascadeOps:
    H: np.ndarray
    L: np.ndarray


def imag_part(X):
    return (X - dag(X)) / 2j


def assemble(plant, w, t, mode):
    """Total Hamiltonian and coupling of the cascade at time ``t`` in ``mode``."""
    if not 0 <= mode < plant.N:
        raise IndexError(f"mode {mode} out of range for {plant.N} fault modes")
    lam = complex(w.coupling(t))
    n = plant.n
    sm = sigma_minus()
    L_total = lam * tensor(sm, identity(n)) + tensor(identity(2), plant.L)
    H_total = tensor(identity(2), plant.H_modes[mode]) + imag_part(
        lam * tensor(sm, dag(plant.L))
    )
    if not is_hermitian(H_total, _HERM_TOL):
        raise HermiticityError("assembled cascade Hamiltonian is not Hermitian")
    return CascadeOps(H_total, L_total)
