"""Fault-tolerant single-photon filter in dual (density-block) form.

For each fault mode ``j`` the filter carries ``n x n`` matrices
``rho00, rho01, rho10, rho11`` such that the conditional quantities are
``sigma_ab^j(X) = Tr(rho_ab^j X)``:

* ``rho11`` - atom state jointly with the event "fault mode is j"; its
  trace is the posterior probability of mode ``j``;
* ``rho00`` - atom state jointly with "source still excited", divided by
  the remaining photon energy ``omega(t)``;
* ``rho10`` and ``rho01 = rho10^dag`` - source/atom coherences scaled by
  ``1/sqrt(omega(t))``.

Only ``rho00``, ``rho10`` and ``rho11`` are stored, stacked in one array
of shape ``(..., N, 3, n, n)``. Leading axes are independent trajectories
advanced in lock step.

Two discretizations are available:

``"positive"`` (default)
    Each step applies a completely positive map to the joint source/atom
    state of every mode (classical mode mixing by the exact transition
    matrix, then ``R -> M R M^dag`` with
    ``M = I + (-iH - L^dag L / 2) dt + L dY``). First-order accurate and
    keeps posteriors inside ``[0, 1]``.
``"euler"``
    Plain Euler-Maruyama on the block equations. Cheaper to reason about
    but it does not preserve positivity: at ``dt = 1e-3`` joint states
    pick up negative eigenvalues of order ``1e-2``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np

from .linop import DimensionError, dag, hermitian_part

__all__ = [
    "DivergenceError",
    "FilterState",
    "FilterConfig",
    "FilterTrajectory",
    "SCHEMES",
    "FORMS",
    "init_state",
    "step",
    "step_normalized",
    "step_zakai",
    "normalize",
    "estimate",
    "posterior",
    "innovation_gain",
    "reference_step",
    "reference_drift",
    "blocks_from_joint",
    "joint_from_blocks",
    "filter_record",
]

FORMS = ("normalized", "zakai")
SCHEMES = ("positive", "euler")
BLOCKS = ("00", "01", "10", "11")

_COLLAPSE = 1e-12

# Sign applied to the predicted drift K inside the fault-tolerant step.
# Test hook only: flipping it must make the reference cross-check fail.
_K_SIGN = 1.0


class DivergenceError(RuntimeError):
    """Filter mass collapsed or became non-finite.

    ``index`` is the flat position of the first offending trajectory in
    the batch (``None`` for unbatched states).
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass
class FilterState:
    """Filter blocks at time ``t``.

    ``data[..., j, 0]`` is ``rho00``, ``[..., j, 1]`` is ``rho10`` and
    ``[..., j, 2]`` is ``rho11`` for mode ``j``. In the zakai form the
    blocks are unnormalized and ``log_normalizer`` accumulates the log of
    every factor divided out so far.
    """

    t: float
    data: np.ndarray
    form: str = "normalized"
    log_normalizer: np.ndarray | float = 0.0
    steps: int = 0
    k_imag: float = 0.0
    rho01_explicit: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self):
        return self.data.shape[-4]

    @property
    def n(self):
        return self.data.shape[-1]

    @property
    def batch_shape(self):
        return self.data.shape[:-4]

    @property
    def rho00(self):
        return self.data[..., 0, :, :]

    @property
    def rho10(self):
        return self.data[..., 1, :, :]

    @property
    def rho11(self):
        return self.data[..., 2, :, :]

    @property
    def rho01(self):
        if self.rho01_explicit is not None:
            return self.rho01_explicit
        return dag(self.rho10)

    def block(self, ab):
        return getattr(self, "rho" + ab)

    def blocks(self):
        """All four blocks, shape ``(..., N, 4, n, n)`` in 00, 01, 10, 11 order."""
        return np.stack([self.rho00, self.rho01, self.rho10, self.rho11], axis=-3)

    def mass(self):
        """``sum_j Tr(rho11^j)`` per trajectory."""
        return np.einsum("...jii->...", self.rho11).real


@dataclass(frozen=True)
class FilterConfig:
    dt: float
    form: str = "normalized"
    scheme: str = "positive"
    renorm_interval: int = 100
    resym_interval: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.renorm_interval < 1 or self.resym_interval < 1:
            raise ValueError("intervals must be >= 1")


def init_state(plant, fm, batch_shape=(), form="normalized"):
    """Source excited, atom in ``pi0``, fault modes at the prior ``p0``."""
    if fm.N != plant.N:
        raise DimensionError(
            f"fault model has {fm.N} modes but plant defines {plant.N} Hamiltonians"
        )
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    weighted = np.asarray(fm.p0, dtype=float)[:, None, None] * plant.pi0
    data = np.zeros(tuple(batch_shape) + (fm.N, 3, plant.n, plant.n), dtype=complex)
    data[..., 0, :, :] = weighted
    data[..., 2, :, :] = weighted
    return FilterState(t=0.0, data=data, form=form,
                       log_normalizer=np.zeros(tuple(batch_shape)))


def _trace(a):
    return np.einsum("...ii->...", a)


def innovation_gain(state, plant, w):
    """Per-mode ``sigma^j(L_total + L_total^dag)`` and their sum.

    Returns ``(c, K)``, complex so callers can confirm ``K`` is real. For a
    zakai state the values are relative to the current (unnormalized) mass.
    """
    xi = complex(w.source(state.t))
    c = _trace(state.rho11 @ plant.quadrature) + 2.0 * (xi * _trace(state.rho10)).real
    return c, c.sum(axis=-1)


def _mix(M, data):
    # (N, N) mode matrix applied along the mode axis of (..., N, 3, n, n)
    shape = data.shape
    flat = data.reshape(shape[:-4] + (shape[-4], -1))
    return (M @ flat).reshape(shape)


def _euler_update(data, plant, Pi, xi, dt, g, hamiltonians=None):
    """Drift and K-free diffusion of the block equations, then ``data + a dt + b g``.

    ``g`` is the diffusion multiplier: ``dW`` (with the ``-K data`` part
    added by the caller) or ``dY``.
    """
    L, Ld, LdL = plant.L, plant.L_dag, plant.LdL
    H = plant.H_modes if hamiltonians is None else hamiltonians
    Hx = H[..., None, :, :]
    xic = np.conj(xi)
    r00 = data[..., 0, :, :]
    r10 = data[..., 1, :, :]
    r01 = dag(r10)
    LS = L @ data
    SLd = data @ Ld
    drift = (
        _mix(Pi, data)
        - 1j * (Hx @ data - data @ Hx)
        + LS @ Ld
        - 0.5 * (LdL @ data + data @ LdL)
    )
    drift[..., 2, :, :] += xic * (L @ r01 - r01 @ L) + xi * (r10 @ Ld - Ld @ r10)
    drift[..., 1, :, :] += xic * (LS[..., 0, :, :] - data[..., 0, :, :] @ L)
    diff = LS + SLd
    diff[..., 2, :, :] += xic * r01 + xi * r10
    diff[..., 1, :, :] += xic * r00
    return drift, diff


def _positive_update(data, plant, fm, w, t, dt, dY, hamiltonians=None):
    """Completely positive one-step map in block variables (unnormalized)."""
    n = plant.n
    xi = complex(w.source(t))
    if xi != 0:
        d_omega = float(w.omega(t) - w.omega(t + dt))
    else:
        d_omega = 0.0
    xic = xi.conjugate()
    if hamiltonians is None:
        A = plant.effective
    else:
        A = -1j * hamiltonians - 0.5 * plant.LdL
    S = _mix(fm.transition(dt), data)
    dYm = np.asarray(dY)[..., None, None, None]
    eye = np.eye(n)
    M = eye + A * dt + plant.L * dYm
    Md = dag(M)
    E = eye * dYm - plant.L_dag * dt
    Ed = dag(E)
    Mx = M[..., None, :, :]
    MS = Mx @ S
    out = MS @ Md[..., None, :, :]
    r00 = S[..., 0, :, :]
    r10 = S[..., 1, :, :]
    if xi != 0:
        out[..., 1, :, :] += xic * (MS[..., 0, :, :] @ Ed)
        Q = xi * (E @ (r10 @ Md))
        out[..., 2, :, :] += (
            Q + dag(Q)
            + abs(xi) ** 2 * (E @ r00 @ Ed)
            - d_omega * out[..., 0, :, :]
        )
    return out


def _symmetrize(data, steps, resym_interval):
    if steps % resym_interval == 0:
        data[..., 0, :, :] = hermitian_part(data[..., 0, :, :])
        data[..., 2, :, :] = hermitian_part(data[..., 2, :, :])
    return data


def _guard(mass, t):
    m = np.asarray(mass)
    bad = ~np.isfinite(m) | (m < _COLLAPSE)
    if np.any(bad):
        flat = np.flatnonzero(bad.ravel())[0]
        raise DivergenceError(
            f"filter mass collapsed to {m.ravel()[flat]:.3g} at t={t:.6g}",
            index=int(flat) if m.ndim else None,
        )


def _quiet(fn):
    # overflow on a runaway record ends up as a non-finite mass, which
    # _guard reports as a DivergenceError; the numpy warnings add nothing
    @functools.wraps(fn)
    def wrapper(*args, **kw):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kw)
    return wrapper


def _check_inputs(state, dY, dt, form):
    if state.form != form:
        raise ValueError(f"state is in {state.form} form, expected {form}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    dY = np.asarray(dY, dtype=float)
    if not np.all(np.isfinite(dY)):
        raise ValueError("observation increment is not finite")
    if dY.shape != state.batch_shape:
        dY = np.broadcast_to(dY, state.batch_shape)
    return dY


def _normalized_step(state, plant, fm, w, dY, dt, scheme, resym_interval,
                     hamiltonians=None, k_sign=1.0):
    xi = complex(w.source(state.t))
    data = state.data
    if scheme == "euler":
        drift, diff = _euler_update(data, plant, fm.Pi, xi, dt, None, hamiltonians)
        Kc = _trace(diff[..., 2, :, :]).sum(axis=-1)
        K = k_sign * Kc.real
        dW = dY - K * dt
        g = dW[..., None, None, None, None]
        new = data + drift * dt + (diff - K[..., None, None, None, None] * data) * g
    else:
        _, Kc = innovation_gain(state, plant, w)
        K = k_sign * Kc.real
        dW = dY - K * dt
        new = _positive_update(data, plant, fm, w, state.t, dt, dY, hamiltonians)
    steps = state.steps + 1
    new = _symmetrize(new, steps, resym_interval)
    s = np.einsum("...jii->...", new[..., 2, :, :]).real
    _guard(s, state.t)
    new /= s[..., None, None, None, None]
    out = replace(state, t=state.t + dt, data=new, steps=steps,
                  k_imag=float(np.max(np.abs(Kc.imag), initial=0.0)),
                  rho01_explicit=None)
    return out, K, dW


@_quiet
def step_normalized(state, plant, fm, w, dY, dt, scheme="positive", resym_interval=1):
    """Advance the normalized filter by one step.

    Returns ``(new_state, K, dW)``: the predicted measurement drift
    ``K = sum_j sigma^j(L + L^dag)`` at the start of the step and the
    innovation ``dW = dY - K dt``. After the update all blocks are divided
    by ``sum_j Tr(rho11^j)``.
    """
    dY = _check_inputs(state, dY, dt, "normalized")
    return _normalized_step(state, plant, fm, w, dY, dt, scheme, resym_interval,
                            k_sign=_K_SIGN)


@_quiet
def step_zakai(state, plant, fm, w, dY, dt, scheme="positive", renorm_interval=100,
               resym_interval=1):
    """Advance the linear (unnormalized) filter by one step, driven directly by ``dY``.

    Every ``renorm_interval`` steps the blocks are rescaled to unit mass and
    the log of the factor is added to ``log_normalizer``.
    Returns ``(new_state, K, dW)`` with ``K`` the normalized predicted drift.
    """
    dY = _check_inputs(state, dY, dt, "zakai")
    data = state.data
    mass = state.mass()
    if scheme == "euler":
        xi = complex(w.source(state.t))
        drift, diff = _euler_update(data, plant, fm.Pi, xi, dt, None)
        Kc = _trace(diff[..., 2, :, :]).sum(axis=-1) / mass
        new = data + drift * dt + diff * dY[..., None, None, None, None]
    else:
        _, Kc = innovation_gain(state, plant, w)
        Kc = Kc / mass
        new = _positive_update(data, plant, fm, w, state.t, dt, dY)
    K = Kc.real
    steps = state.steps + 1
    new = _symmetrize(new, steps, resym_interval)
    s = np.einsum("...jii->...", new[..., 2, :, :]).real
    _guard(s, state.t)
    logn = np.asarray(state.log_normalizer, dtype=float)
    if steps % renorm_interval == 0:
        new /= s[..., None, None, None, None]
        logn = logn + np.log(s)
    out = replace(state, t=state.t + dt, data=new, steps=steps, log_normalizer=logn,
                  k_imag=float(np.max(np.abs(Kc.imag), initial=0.0)),
                  rho01_explicit=None)
    return out, K, dY - K * dt


def step(state, plant, fm, w, dY, config):
    """Dispatch on ``config.form``; returns ``(new_state, K, dW)``."""
    if config.form == "normalized":
        return step_normalized(state, plant, fm, w, dY, config.dt, config.scheme,
                               config.resym_interval)
    return step_zakai(state, plant, fm, w, dY, config.dt, config.scheme,
                      config.renorm_interval, config.resym_interval)


def normalize(state):
    """Divide every block by ``sum_j Tr(rho11^j)``; the result is in normalized form."""
    s = np.asarray(state.mass())
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise DivergenceError("cannot normalize a state with non-positive mass")
    data = state.data / s[..., None, None, None, None]
    explicit = None
    if state.rho01_explicit is not None:
        explicit = state.rho01_explicit / s[..., None, None, None]
    return replace(state, data=data, form="normalized", rho01_explicit=explicit,
                   log_normalizer=np.asarray(state.log_normalizer) + np.log(s))


def posterior(state):
    """Posterior fault-mode probabilities ``Tr(rho11^j)``, shape ``(..., N)``."""
    if state.form == "zakai":
        state = normalize(state)
    return _trace(state.rho11).real


def estimate(state, X):
    """Conditional estimates of the atom observable ``X``.

    Returns ``(per_mode, aggregate)``, dicts keyed by ``"00"``, ``"01"``,
    ``"10"``, ``"11"`` with arrays of shape ``(..., N)`` and ``(...)``.
    ``aggregate["11"]`` is the least-mean-square estimate of ``X``.
    """
    X = np.asarray(X, dtype=complex)
    if X.shape != (state.n, state.n):
        raise DimensionError(
            f"observable has shape {X.shape}, expected {(state.n, state.n)}"
        )
    if state.form == "zakai":
        state = normalize(state)
    per_mode = {ab: _trace(state.block(ab) @ X) for ab in BLOCKS}
    aggregate = {ab: v.sum(axis=-1) for ab, v in per_mode.items()}
    return per_mode, aggregate


# -- independent single-mode reference -----------------------------------


def _reference_K(s01, s10, s11, L, xi):
    return (
        np.trace(s11 @ (L + L.conj().T), axis1=-2, axis2=-1)
        + xi * np.trace(s10, axis1=-2, axis2=-1)
        + xi.conjugate() * np.trace(s01, axis1=-2, axis2=-1)
    ).real


def reference_drift(state, plant, w):
    """Predicted measurement drift of a single-mode state, as used by :func:`reference_step`."""
    s01 = state.rho01[..., 0, :, :]
    s10 = state.rho10[..., 0, :, :]
    s11 = state.rho11[..., 0, :, :]
    return _reference_K(s01, s10, s11, plant.L, complex(w.source(state.t)))


@_quiet
def reference_step(state, plant, w, dY, dt, scheme="positive", hamiltonian=None,
                   resym_interval=1):
    """No-fault single-photon filter step, coded without the fault-tolerant machinery.

    ``scheme="euler"`` integrates all four blocks (``rho01`` included) from
    their own equations. ``scheme="positive"`` rebuilds the joint
    source/atom state on ``C^2 (x) H_S``, applies the Kraus-type update
    there and projects back. ``hamiltonian`` replaces the plant's
    Hamiltonian and may carry leading trajectory axes.

    Returns ``(new_state, K, dW)``.
    """
    if state.N != 1:
        raise DimensionError("reference filter needs a single-mode state")
    if not dt > 0:
        raise ValueError("dt must be positive")
    dY = np.asarray(dY, dtype=float)
    if not np.all(np.isfinite(dY)):
        raise ValueError("observation increment is not finite")
    H = plant.H_modes[0] if hamiltonian is None else np.asarray(hamiltonian)
    s00, s01, s10, s11 = (state.block(ab)[..., 0, :, :] for ab in BLOCKS)
    xi = complex(w.source(state.t))
    K = _reference_K(s01, s10, s11, plant.L, xi)
    dW = dY - K * dt
    if scheme == "euler":
        n00, n01, n10, n11 = _reference_euler(s00, s01, s10, s11, H, plant.L, xi, K, dW, dt)
    elif scheme == "positive":
        n00, n01, n10, n11 = _reference_joint(s00, s01, s10, s11, H, plant.L, w,
                                              state.t, dt, dY)
    else:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    steps = state.steps + 1
    if steps % resym_interval == 0:
        n11 = 0.5 * (n11 + np.conj(np.swapaxes(n11, -1, -2)))
        n00 = 0.5 * (n00 + np.conj(np.swapaxes(n00, -1, -2)))
    tr = np.trace(n11, axis1=-2, axis2=-1).real
    _guard(tr, state.t)
    tr = np.expand_dims(tr, (-1, -2))
    data = np.stack([n00 / tr, n10 / tr, n11 / tr], axis=-3)[..., None, :, :, :]
    new = FilterState(
        t=state.t + dt,
        data=data,
        form="normalized",
        log_normalizer=state.log_normalizer,
        steps=steps,
        rho01_explicit=(n01 / tr)[..., None, :, :],
    )
    return new, K, dW


def _reference_euler(s00, s01, s10, s11, H, L, xi, K, dW, dt):
    Ld = L.conj().T
    LdL = Ld @ L
    xc = xi.conjugate()

    def gen(s):
        return -1j * (H @ s - s @ H) + L @ s @ Ld - 0.5 * (LdL @ s + s @ LdL)

    dWm = np.expand_dims(dW, (-1, -2))
    Km = np.expand_dims(K, (-1, -2))
    n11 = (
        s11
        + (gen(s11) + xc * (L @ s01 - s01 @ L) + xi * (s10 @ Ld - Ld @ s10)) * dt
        + (L @ s11 + s11 @ Ld + xc * s01 + xi * s10 - Km * s11) * dWm
    )
    n10 = (
        s10
        + (gen(s10) + xc * (L @ s00 - s00 @ L)) * dt
        + (L @ s10 + s10 @ Ld + xc * s00 - Km * s10) * dWm
    )
    n01 = (
        s01
        + (gen(s01) + xi * (s00 @ Ld - Ld @ s00)) * dt
        + (s01 @ Ld + L @ s01 + xi * s00 - Km * s01) * dWm
    )
    n00 = s00 + gen(s00) * dt + (L @ s00 + s00 @ Ld - Km * s00) * dWm
    return n00, n01, n10, n11


def _reference_joint(s00, s01, s10, s11, H, L, w, t, dt, dY):
    n = L.shape[0]
    om0 = float(w.omega(t))
    om1 = float(w.omega(t + dt))
    lam = complex(w.coupling(t))
    live = lam != 0
    if not live:
        # no coupling: the update is block diagonal, any positive omega reads it
        om0 = om1 = 1.0
    R = joint_from_blocks(s00, s01, s10, s11, om0)
    dYm = np.expand_dims(dY, (-1, -2))
    eye = np.eye(n)
    MG = eye + (-1j * H - 0.5 * L.conj().T @ L) * dt + L * dYm
    MG = np.broadcast_to(MG, np.broadcast_shapes(MG.shape, R.shape[:-2] + (n, n)))
    M = np.zeros(MG.shape[:-2] + (2 * n, 2 * n), dtype=complex)
    M[..., :n, :n] = MG
    M[..., n:, n:] = MG
    # sigma_- (x) lambda (dY - L^dag dt): emission into the atom's input
    M[..., n:, :n] = lam * (eye * dYm - L.conj().T * dt)
    Rn = M @ R @ np.conj(np.swapaxes(M, -1, -2))
    # the source stays excited over the step with probability omega1/omega0;
    # reading blocks off with the old omega keeps the omega1 -> 0 limit finite
    n00, n01, n10, n11 = blocks_from_joint(Rn, om0)
    if live:
        n11 = n11 - (1.0 - om1 / om0) * Rn[..., :n, :n]
    return n00, n01, n10, n11


def blocks_from_joint(rho, omega):
    """Dual blocks ``(rho00, rho01, rho10, rho11)`` of joint states on ``C^2 (x) H_S``.

    ``rho`` has shape ``(..., 2n, 2n)`` with the source slot first;
    ``omega`` is the remaining photon energy.
    """
    n = rho.shape[-1] // 2
    uu = rho[..., :n, :n]
    ud = rho[..., :n, n:]
    du = rho[..., n:, :n]
    dd = rho[..., n:, n:]
    r = np.sqrt(omega)
    return uu / omega, du / r, ud / r, uu + dd


def joint_from_blocks(rho00, rho01, rho10, rho11, omega):
    """Inverse of :func:`blocks_from_joint`."""
    r = np.sqrt(omega)
    top = np.concatenate([omega * rho00, r * rho10], axis=-1)
    bottom = np.concatenate([r * rho01, rho11 - omega * rho00], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


# -- trajectory driver ------------------------------------------------------


@dataclass
class FilterTrajectory:
    """Filter output sampled at ``times``.

    Sampled arrays are time-major, e.g. ``p_hat`` has shape
    ``(n_rec, ..., N)``. ``K`` and ``dW`` hold every step
    (``(..., n_steps)``) when increments were kept.
    """

    times: np.ndarray
    p_hat: np.ndarray
    estimates: dict
    log_normalizer: np.ndarray
    K: np.ndarray | None = None
    dW: np.ndarray | None = None
    blocks: np.ndarray | None = None
    clamped_steps: int = 0
    max_imag_K: float = 0.0
    final_state: FilterState | None = field(default=None, repr=False)


def filter_record(plant, fm, w, dY, config, observables=None, record_every=1,
                  keep_increments=True, keep_blocks=False, record_indices=None):
    """Run the fault-tolerant filter over one or more records.

    Parameters
    ----------
    dY : array_like, shape (..., n_steps)
        Observation increments; leading axes are independent records.
    config : FilterConfig
    observables : dict of name -> (n, n) array, optional
        The aggregate estimate ``sigma_11(X)`` is recorded for each.
    record_every : int
        Sampling stride for ``p_hat``, estimates and blocks.
    record_indices : sequence of int, optional
        Explicit grid indices to sample instead of a stride; ``0`` is
        always included.
    """
    dY = np.asarray(dY, dtype=float)
    n_steps = dY.shape[-1]
    batch = dY.shape[:-1]
    observables = dict(observables or {})
    state = init_state(plant, fm, batch, form=config.form)
    if record_indices is None:
        rec_idx = list(range(0, n_steps + 1, record_every))
        if rec_idx[-1] != n_steps:
            rec_idx.append(n_steps)
    else:
        rec_idx = sorted({0, *(int(i) for i in record_indices)})
        if rec_idx[-1] > n_steps or rec_idx[0] < 0:
            raise ValueError("record index outside the grid")
    n_rec = len(rec_idx)
    p_hat = np.empty((n_rec,) + batch + (fm.N,))
    est = {name: np.empty((n_rec,) + batch) for name in observables}
    logn = np.empty((n_rec,) + batch)
    blocks = None
    if keep_blocks:
        blocks = np.empty((n_rec,) + batch + (fm.N, 4, plant.n, plant.n), dtype=complex)
    K_all = np.empty(batch + (n_steps,)) if keep_increments else None
    dW_all = np.empty(batch + (n_steps,)) if keep_increments else None
    clamped = 0
    max_imag = 0.0

    def record(slot, st):
        norm = normalize(st) if st.form == "zakai" else st
        p_hat[slot] = _trace(norm.rho11).real
        for name, X in observables.items():
            est[name][slot] = _trace(norm.rho11 @ X).sum(axis=-1).real
        logn[slot] = np.asarray(norm.log_normalizer)
        if keep_blocks:
            blocks[slot] = norm.blocks()

    record(0, state)
    slot = 1
    for i in range(n_steps):
        if w.is_clamped(state.t):
            clamped += 1
        state, K, dW = step(state, plant, fm, w, dY[..., i], config)
        max_imag = max(max_imag, state.k_imag)
        if keep_increments:
            K_all[..., i] = K
            dW_all[..., i] = dW
        if slot < n_rec and rec_idx[slot] == i + 1:
            record(slot, state)
            slot += 1
    return FilterTrajectory(
        times=np.asarray(rec_idx) * config.dt,
        p_hat=p_hat,
        estimates=est,
        log_normalizer=logn,
        K=K_all,
        dW=dW_all,
        blocks=blocks,
        clamped_steps=clamped,
        max_imag_K=max_imag,
        final_state=state,
    )
