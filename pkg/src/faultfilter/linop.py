"""Dense complex operator algebra for small open quantum systems.

Conventions used throughout the package:

* two-level basis ordered excited-first, ``|up> = [1, 0]``, ``|down> = [0, 1]``,
  so that ``sigma_minus |up> = |down>`` and ``sigma_z = diag(1, -1)``;
* composite spaces are ordered ancilla-first, ``C^2 (x) H_S``;
* hbar = 1.

All functions broadcast over leading axes, so a stack of operators with
shape ``(..., n, n)`` can be processed in one call.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "HermiticityError",
    "HERMITIAN_ATOL",
    "dag",
    "commutator",
    "tensor",
    "identity",
    "sigma_minus",
    "sigma_plus",
    "sigma_x",
    "sigma_y",
    "sigma_z",
    "destroy",
    "is_hermitian",
    "hermitian_part",
    "check_density_matrix",
    "lindblad_heisenberg",
    "lindblad_schrodinger",
    "expect",
    "matrix_to_json",
    "matrix_from_json",
]

# entrywise tolerance for Hermiticity / positivity predicates
HERMITIAN_ATOL = 1e-8


class DimensionError(ValueError):
    """Operands do not share the required shape."""


class HermiticityError(ValueError):
    """An operator that must be Hermitian is not."""


def dag(a):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def commutator(a, b):
    return a @ b - b @ a


def tensor(a, b):
    """Kronecker product ``a (x) b`` with ``a`` in the leading (slow) slot."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("tensor expects two 2-d operators")
    return np.kron(a, b)


def identity(n):
    return np.eye(n, dtype=complex)


def sigma_minus():
    """Lowering operator, ``|up> -> |down>``."""
    return np.array([[0, 0], [1, 0]], dtype=complex)


def sigma_plus():
    return np.array([[0, 1], [0, 0]], dtype=complex)


def sigma_x():
    return np.array([[0, 1], [1, 0]], dtype=complex)


def sigma_y():
    return np.array([[0, -1j], [1j, 0]], dtype=complex)


def sigma_z():
    return np.array([[1, 0], [0, -1]], dtype=complex)


def destroy(n):
    """Truncated bosonic annihilation operator on ``n`` levels."""
    return np.diag(np.sqrt(np.arange(1, n)), k=1).astype(complex)


def _square(a, name):
    a = np.asarray(a, dtype=complex)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


def is_hermitian(a, atol=HERMITIAN_ATOL):
    a = np.asarray(a)
    return bool(np.max(np.abs(a - dag(a)), initial=0.0) <= atol)


def hermitian_part(a):
    return 0.5 * (a + dag(a))


def check_density_matrix(rho, atol=HERMITIAN_ATOL, name="rho"):
    """Validate a single density matrix and return it as a complex array.

    Raises
    ------
    DimensionError
        If ``rho`` is not a square 2-d array.
    ValueError
        If ``rho`` is not Hermitian, unit-trace or positive semidefinite
        within ``atol``.
    """
    rho = _square(rho, name)
    if rho.ndim != 2:
        raise DimensionError(f"{name} must be a single matrix")
    if not is_hermitian(rho, atol):
        raise HermiticityError(f"{name} is not Hermitian")
    tr = np.trace(rho)
    if abs(tr - 1.0) > atol:
        raise ValueError(f"{name} has trace {tr.real:.6g}, expected 1")
    if np.linalg.eigvalsh(hermitian_part(rho)).min() < -max(atol, 1e-10):
        raise ValueError(f"{name} is not positive semidefinite")
    return rho


def _check_generator_args(H, L, X, atol):
    H = _square(H, "H")
    L = _square(L, "L")
    X = _square(X, "X")
    if not (H.shape[-1] == L.shape[-1] == X.shape[-1]):
        raise DimensionError(
            f"dimension mismatch: H {H.shape}, L {L.shape}, operand {X.shape}"
        )
    if not is_hermitian(H, atol):
        dev = np.max(np.abs(H - dag(H)))
        raise HermiticityError(f"H is not Hermitian (max |H - H^dag| = {dev:.3g})")
    return H, L, X


def lindblad_heisenberg(H, L, X, atol=HERMITIAN_ATOL):
    """Heisenberg-picture Lindblad generator.

    ``-i[X, H] + L^dag X L - (L^dag L X + X L^dag L) / 2``
    """
    H, L, X = _check_generator_args(H, L, X, atol)
    Ld = dag(L)
    LdL = Ld @ L
    return -1j * commutator(X, H) + Ld @ X @ L - 0.5 * (LdL @ X + X @ LdL)


def lindblad_schrodinger(H, L, rho, atol=HERMITIAN_ATOL):
    """Trace dual of :func:`lindblad_heisenberg`.

    ``-i[H, rho] + L rho L^dag - (L^dag L rho + rho L^dag L) / 2``, so that
    ``Tr(rho L(X)) == Tr(L*(rho) X)`` for every ``X``.
    """
    H, L, rho = _check_generator_args(H, L, rho, atol)
    return _lindblad_dual(H, L, rho)


def _lindblad_dual(H, L, rho):
    # unchecked hot path; broadcasts over leading axes
    Ld = dag(L)
    LdL = Ld @ L
    return (
        -1j * (H @ rho - rho @ H)
        + L @ rho @ Ld
        - 0.5 * (LdL @ rho + rho @ LdL)
    )


def expect(rho, X):
    """``Tr(rho X)`` over the last two axes."""
    rho = _square(rho, "rho")
    X = _square(X, "X")
    if rho.shape[-1] != X.shape[-1]:
        raise DimensionError(f"dimension mismatch: rho {rho.shape}, X {X.shape}")
    return np.einsum("...ij,...ji->...", rho, X)


def matrix_to_json(a):
    """Row-major nested list of ``[re, im]`` pairs."""
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def matrix_from_json(data):
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise DimensionError(
            "complex matrix must be a nested list of [re, im] pairs"
        )
    return arr[..., 0] + 1j * arr[..., 1]
