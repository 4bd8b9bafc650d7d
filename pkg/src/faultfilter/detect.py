"""Fault posteriors, the threshold rule and detection-quality metrics.

Modes are 0-based in arrays and 1-based wherever they are shown to a
person (flag sets, CSV files, JSON keys).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .filtering import innovation_gain, posterior as _posterior, step

__all__ = [
    "DetectionReport",
    "posterior",
    "detect",
    "flag_matrix",
    "build_report",
    "metrics",
    "calibration_table",
    "latencies",
    "confusion",
    "flag_agreement",
    "gain_residuals",
]

N_BINS = 10
LATENCY_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def posterior(state):
    """Posterior mode probabilities ``Tr(rho11^j)`` of a filter state."""
    return _posterior(state)


def _check_threshold(threshold):
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")


def detect(p_hat, threshold):
    """Modes whose posterior reaches ``threshold``, as a set of 1-based indices.

    The set may be empty or hold several modes; ties are never broken here.

    >>> sorted(detect([0.45, 0.55], 0.4))
    [1, 2]
    """
    _check_threshold(threshold)
    p = np.asarray(p_hat, dtype=float)
    return {int(j) + 1 for j in np.flatnonzero(p >= threshold)}


def flag_matrix(p_hat, threshold):
    """Vectorized :func:`detect`: boolean array shaped like ``p_hat``."""
    _check_threshold(threshold)
    return np.asarray(p_hat) >= threshold


@dataclass
class DetectionReport:
    """Posterior history of one trajectory and the flags it raises.

    Attributes
    ----------
    times : ndarray, shape (n_t,)
    p_hat : ndarray, shape (n_t, N)
    threshold : float
    flags : ndarray of bool, shape (n_t, N)
    first_flag : list of float or None
        First flag time per mode.
    true_modes : ndarray of int, shape (n_t,), optional
        Hidden 0-based mode at each sampled time.
    jumps : list of (time, mode), optional
        Exact hidden jump instants, 0-based target modes.
    """

    times: np.ndarray
    p_hat: np.ndarray
    threshold: float
    flags: np.ndarray
    first_flag: list
    true_modes: np.ndarray | None = None
    jumps: list | None = None

    @property
    def N(self):
        return self.p_hat.shape[-1]

    def write_flags(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "flagged_modes"])
            for t, row in zip(self.times, self.flags):
                w.writerow([repr(float(t)), ";".join(str(j + 1) for j in np.flatnonzero(row))])


def build_report(times, p_hat, threshold, true_modes=None, jumps=None):
    """Flags and first-flag times for one trajectory.

    ``true_modes`` (0-based hidden mode at each of ``times``) and
    ``jumps`` attach the hidden truth when it is known.
    """
    times = np.asarray(times, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    flags = flag_matrix(p_hat, threshold)
    first = []
    for j in range(p_hat.shape[-1]):
        hit = np.flatnonzero(flags[:, j])
        first.append(float(times[hit[0]]) if hit.size else None)
    if true_modes is not None:
        true_modes = np.asarray(true_modes, dtype=int)
        jumps = list(jumps or [])
    return DetectionReport(times, p_hat, float(threshold), flags, first, true_modes, jumps)


def _require_truth(reports):
    for r in reports:
        if r.true_modes is None:
            raise ValueError("metrics need reports with hidden truth attached")


def calibration_table(p_hat, truth, groups=None, n_bins=N_BINS):
    """Reliability table of a posterior against realized indicators.

    Parameters
    ----------
    p_hat : array_like
        Posterior probabilities of one mode, any shape.
    truth : array_like of bool
        Whether that mode was the true one, same shape.
    groups : array_like of int, optional
        Cluster label per sample (usually the trajectory index). Samples
        from one trajectory are correlated, so the standard error of each
        bin frequency is the cluster-robust one. Without groups every
        sample is its own cluster.

    Returns
    -------
    list of dict
        One entry per bin with ``lo``, ``hi``, ``center``, ``count``,
        ``mean_p``, ``frequency`` and ``se``. Empty bins report ``None``.
    """
    p = np.asarray(p_hat, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if groups is None:
        g = np.arange(p.size)
    else:
        g = np.asarray(groups).ravel()
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # p = 1 (and rounding just above it) belongs to the last bin
    idx = np.clip(np.floor(p * n_bins).astype(int), 0, n_bins - 1)
    _, g = np.unique(g, return_inverse=True)
    n_groups = int(g.max()) + 1 if g.size else 0
    out = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        row = {"lo": float(edges[b]), "hi": float(edges[b + 1]),
               "center": float(0.5 * (edges[b] + edges[b + 1])), "count": n,
               "mean_p": None, "frequency": None, "se": None}
        if n:
            f = float(y[sel].mean())
            resid = np.bincount(g[sel], weights=y[sel] - f, minlength=n_groups)
            m = int(np.count_nonzero(np.bincount(g[sel], minlength=n_groups)))
            var = float(np.sum(resid ** 2)) / n ** 2
            if m > 1:
                var *= m / (m - 1)
            row.update(mean_p=float(p[sel].mean()), frequency=f, se=float(np.sqrt(var)))
        out.append(row)
    return out


def latencies(reports):
    """Detection delay after every hidden jump.

    For a jump into mode ``m`` at ``t_k`` the delay is the first sampled
    time ``t >= t_k`` with ``p_hat^m >= threshold`` minus ``t_k``, looked
    for only until the next jump. Returns ``(delays, missed)``.
    """
    _require_truth(reports)
    delays, missed = [], 0
    for r in reports:
        ends = [t for t, _ in r.jumps[1:]] + [np.inf]
        for (tk, m), t_end in zip(r.jumps, ends):
            window = (r.times >= tk) & (r.times < t_end) & r.flags[:, m]
            hit = np.flatnonzero(window)
            if hit.size:
                delays.append(float(r.times[hit[0]] - tk))
            else:
                missed += 1
    return np.asarray(delays), missed


def confusion(reports, at_index=-1):
    """Flag counts at one sampled instant.

    Row ``i`` collects runs whose hidden mode is ``i``; column ``j < N``
    counts runs flagging mode ``j`` and column ``N`` runs flagging
    nothing. A run with several flags adds to several columns.
    """
    _require_truth(reports)
    N = reports[0].N
    table = np.zeros((N, N + 1), dtype=int)
    for r in reports:
        i = int(r.true_modes[at_index])
        row = r.flags[at_index]
        if row.any():
            table[i, :N] += row
        else:
            table[i, N] += 1
    return table


def flag_agreement(reports, skip_initial=True):
    """Share of raised flags that name the hidden mode.

    Counts every (instant, flagged mode) pair; ``skip_initial`` drops
    ``t = 0``, where flags only restate the prior.
    """
    _require_truth(reports)
    hits = total = 0
    for r in reports:
        start = 1 if skip_initial else 0
        flags = r.flags[start:]
        truth = r.true_modes[start:]
        total += int(flags.sum())
        hits += int(flags[np.arange(len(truth)), truth].sum())
    return hits / total if total else float("nan"), total


def metrics(reports, at_index=-1):
    """Summary dictionary over trajectories that carry hidden truth.

    Calibration uses every sampled instant after ``t = 0``, clustered by
    trajectory.
    """
    _require_truth(reports)
    N = reports[0].N
    p = np.stack([r.p_hat[1:] for r in reports])
    truth = np.stack([r.true_modes[1:] for r in reports])
    groups = np.broadcast_to(np.arange(len(reports))[:, None], truth.shape)
    calibration = {
        str(j + 1): calibration_table(p[..., j], truth == j, groups) for j in range(N)
    }
    delays, missed = latencies(reports)
    if delays.size:
        q = np.quantile(delays, LATENCY_QUANTILES)
        quantiles = {f"q{int(round(100 * a)):02d}": float(v) for a, v in zip(LATENCY_QUANTILES, q)}
        quantiles["mean"] = float(delays.mean())
    else:
        quantiles = None
    agree, n_flags = flag_agreement(reports)
    return {
        "threshold": reports[0].threshold,
        "n_trajectories": len(reports),
        "calibration": calibration,
        "latency_quantiles": quantiles,
        "latency_counts": {"detected": int(delays.size), "missed": int(missed)},
        "confusion": confusion(reports, at_index).tolist(),
        "confusion_time": float(reports[0].times[at_index]),
        "flag_agreement": None if n_flags == 0 else agree,
        "flag_count": n_flags,
    }


def gain_residuals(plant, fm, w, dY, config):
    """Check the posterior increment against ``Pi p dt + G dW`` step by step.

    ``G^j = c^j - p^j K`` with ``c^j`` the mode-``j`` share of the
    predicted signal and ``K = sum_j c^j``. Returns the residuals
    ``p(t + dt) - p(t) - (Pi p dt + G dW)``, shape ``(..., n_steps, N)``;
    they are ``O(dt)`` per step for a consistent filter.
    """
    from .filtering import init_state

    dY = np.asarray(dY, dtype=float)
    state = init_state(plant, fm, dY.shape[:-1], form=config.form)
    out = np.empty(dY.shape + (fm.N,))
    for i in range(dY.shape[-1]):
        p = _posterior(state)
        c, K = innovation_gain(state, plant, w)
        mass = state.mass()
        c = c.real / mass[..., None]
        K = K.real / mass
        G = c - p * K[..., None]
        state, _, _ = step(state, plant, fm, w, dY[..., i], config)
        dW = dY[..., i] - K * config.dt
        predicted = p @ fm.Pi.T * config.dt + G * dW[..., None]
        out[..., i, :] = _posterior(state) - p - predicted
    return out
