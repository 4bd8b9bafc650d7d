"""Synthetic homodyne records with known fault paths.

A record is produced by running the single-mode filter along a sampled
fault path (so the atom Hamiltonian is known at every instant) and
emitting ``dY = K dt + dW`` with ``K`` that filter's predicted drift and
``dW`` fresh Gaussian noise. Quantum-trajectory theory guarantees the
emitted ``dY`` then has the law of a real homodyne photocurrent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .faultproc import FaultPath, grid_size, sample_path, validate_qmatrix
from .filtering import _euler_update, init_state, reference_drift, reference_step

__all__ = [
    "MeasurementRecord",
    "RecordFormatError",
    "simulate_record",
    "simulate_batch",
    "propagate_truth",
    "master_solve",
    "read_record",
]


class RecordFormatError(ValueError):
    """Record file is malformed, truncated or inconsistent with its sidecar."""


@dataclass
class MeasurementRecord:
    """Uniform-grid observation increments plus optional hidden truth.

    ``dY[k]`` is the increment over ``[times[k], times[k+1])``.
    ``hidden_states`` (if kept) has shape ``(n_steps + 1, 4, n, n)`` with
    blocks ordered 00, 01, 10, 11.
    """

    times: np.ndarray
    dY: np.ndarray
    dt: float
    fault_path: FaultPath | None = None
    hidden_states: np.ndarray | None = None
    K_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.dY.shape[-1]

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "dY"])
            for t, y in zip(self.times[:-1], self.dY):
                w.writerow([repr(float(t)), repr(float(y))])
        side = dict(self.meta)
        side.update({"dt": self.dt, "n_steps": int(self.n_steps)})
        if self.fault_path is not None:
            side["hidden_path"] = self.fault_path.sidecar()
        with open(json_path, "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)


def read_record(csv_path, json_path=None):
    """Load a record written by :meth:`MeasurementRecord.write`.

    Raises :class:`RecordFormatError` on malformed, truncated or
    non-uniform input.
    """
    times, dY = [], []
    try:
        with open(csv_path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows, None)
            if header != ["t", "dY"]:
                raise RecordFormatError(f"{csv_path}: expected header t,dY, got {header}")
            for lineno, row in enumerate(rows, start=2):
                if len(row) != 2:
                    raise RecordFormatError(f"{csv_path}:{lineno}: expected 2 columns")
                times.append(float(row[0]))
                dY.append(float(row[1]))
    except ValueError as exc:
        if isinstance(exc, RecordFormatError):
            raise
        raise RecordFormatError(f"{csv_path}: {exc}") from None
    if len(dY) < 1:
        raise RecordFormatError(f"{csv_path}: record is empty")
    times = np.asarray(times)
    dY = np.asarray(dY)
    if not np.all(np.isfinite(dY)):
        raise RecordFormatError(f"{csv_path}: non-finite increments")
    meta = {}
    if json_path is not None:
        with open(json_path) as fh:
            meta = json.load(fh)
        if "n_steps" in meta and meta["n_steps"] != dY.size:
            raise RecordFormatError(
                f"{csv_path}: {dY.size} rows but sidecar declares {meta['n_steps']} (truncated?)"
            )
    if dY.size > 1:
        steps = np.diff(times)
        dt = float(steps.mean())
        if np.max(np.abs(steps - dt)) > 1e-9 * max(dt, 1e-300) + 1e-12:
            raise RecordFormatError(f"{csv_path}: time grid is not uniform")
    else:
        dt = float(meta.get("dt", 0.0))
    dt = float(meta.get("dt", dt))
    if abs(times[0]) > 1e-12:
        raise RecordFormatError(f"{csv_path}: grid must start at t=0")
    full_times = np.arange(dY.size + 1) * dt
    return MeasurementRecord(full_times, dY, dt, meta=meta)


def _truth_model():
    return validate_qmatrix([[0.0]], [1.0])


def propagate_truth(plant, w, modes, dt, noise=None, dY=None, keep_states=False,
                    scheme="positive"):
    """Run the single-mode filter along known fault paths.

    Exactly one of ``noise`` (generate a record) or ``dY`` (replay one)
    must be given, shaped ``(..., n_steps)``; ``modes`` is ``(..., n_steps+1)``.

    Returns ``(dY, K, states)`` where ``states`` is ``None`` unless
    ``keep_states`` and then has shape ``(n_steps+1, ..., 4, n, n)``.
    ``scheme`` selects the discretization of the single-mode filter.
    """
    if (noise is None) == (dY is None):
        raise ValueError("give exactly one of noise or dY")
    drive = np.asarray(noise if dY is None else dY, dtype=float)
    modes = np.asarray(modes)
    batch = drive.shape[:-1]
    n_steps = drive.shape[-1]
    single = plant.single_mode(0)
    state = init_state(single, _truth_model(), batch)
    out_dY = np.empty(batch + (n_steps,))
    out_K = np.empty(batch + (n_steps,))
    states = None
    if keep_states:
        states = np.empty((n_steps + 1,) + batch + (4, plant.n, plant.n), dtype=complex)
        states[0] = state.blocks()[..., 0, :, :, :]
    for i in range(n_steps):
        H = plant.H_modes[modes[..., i]]
        K = reference_drift(state, plant, w)
        if dY is None:
            inc = K * dt + drive[..., i]
        else:
            inc = drive[..., i]
        state, _, _ = reference_step(state, single, w, inc, dt, scheme=scheme,
                                     hamiltonian=H)
        out_dY[..., i] = inc
        out_K[..., i] = K
        if keep_states:
            states[i + 1] = state.blocks()[..., 0, :, :, :]
    return out_dY, out_K, states


def simulate_batch(plant, fm, w, T, dt, rngs, keep_states=False, scheme="positive"):
    """Simulate one record per generator in ``rngs``.

    Each generator first samples its fault path, then the measurement
    noise, so the result for a given generator does not depend on how
    many others share the batch.
    """
    n = grid_size(T, dt)
    if fm.N != plant.N:
        raise ValueError("fault model and plant disagree on the number of modes")
    paths, noise = [], []
    for rng in rngs:
        paths.append(sample_path(fm, T, dt, rng))
        noise.append(rng.standard_normal(n) * np.sqrt(dt))
    modes = np.stack([p.modes for p in paths])
    dY, K, states = propagate_truth(plant, w, modes, dt, noise=np.stack(noise),
                                    keep_states=keep_states, scheme=scheme)
    times = np.arange(n + 1) * dt
    records = []
    for b, path in enumerate(paths):
        records.append(MeasurementRecord(
            times=times,
            dY=dY[b],
            dt=dt,
            fault_path=path,
            hidden_states=None if states is None else states[:, b],
            K_true=K[b],
        ))
    return records


def simulate_record(plant, fm, w, T, dt, rng, keep_states=True, scheme="positive"):
    """Sample a fault path and a homodyne record along it."""
    return simulate_batch(plant, fm, w, T, dt, [rng], keep_states=keep_states,
                          scheme=scheme)[0]


def master_solve(plant, fm, w, T, dt, record_every=1):
    """Unconditional (noise-averaged) block dynamics by classical RK4.

    Returns ``(times, blocks)`` with ``blocks`` of shape
    ``(n_rec, N, 4, n, n)`` in 00, 01, 10, 11 order.
    """
    n = grid_size(T, dt)
    y = init_state(plant, fm).data

    def f(t, y):
        drift, _ = _euler_update(y, plant, fm.Pi, complex(w.source(t)), dt, None)
        return drift

    def pack(y):
        r10 = y[:, 1]
        return np.stack([y[:, 0], np.conj(np.swapaxes(r10, -1, -2)), r10, y[:, 2]], axis=1)

    rec = list(range(0, n + 1, record_every))
    if rec[-1] != n:
        rec.append(n)
    out = np.empty((len(rec), fm.N, 4, plant.n, plant.n), dtype=complex)
    out[0] = pack(y)
    slot = 1
    for i in range(n):
        t = i * dt
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if slot < len(rec) and rec[slot] == i + 1:
            out[slot] = pack(y)
            slot += 1
    return np.asarray(rec) * dt, out
