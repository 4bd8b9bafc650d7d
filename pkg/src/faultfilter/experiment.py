"""Experiment configuration, seeded ensembles and file output.

Trajectory ``i`` of a run with master seed ``s`` draws all of its
randomness (fault path first, then measurement noise) from

    numpy.random.default_rng(numpy.random.SeedSequence(s, spawn_key=(i,)))

so a trajectory's output depends only on ``(config, s, i)`` and not on
how trajectories are grouped into chunks or spread over workers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import detect
from .cascade import PlantModel
from .faultproc import FaultModel, FaultPath, grid_size, kolmogorov_solve, validate_qmatrix
from .filtering import FORMS, SCHEMES, DivergenceError, FilterConfig, filter_record
from .linop import is_hermitian, matrix_from_json, matrix_to_json, sigma_minus, sigma_z
from .truthsim import read_record, simulate_batch
from .wavepacket import Wavepacket

__all__ = [
    "ConfigError",
    "RunSettings",
    "ExperimentConfig",
    "EnsembleResult",
    "substream",
    "example31_config",
    "run_ensemble",
    "filter_file",
    "read_filter_csv",
    "summarize",
    "write_json",
    "innovation_summary",
    "kolmogorov_summary",
    "calibration_summary",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class RunSettings:
    """Run-level options.

    ``output_every`` is the row stride of the per-trajectory filter and
    flag files; ``checkpoints`` is the number of equally spaced instants
    (after ``t = 0``) at which ensemble statistics are taken.
    """

    T: float = 10.0
    dt: float = 1e-3
    seed: int = 0
    n_traj: int = 1
    form: str = "normalized"
    scheme: str = "positive"
    renorm_interval: int = 100
    resym_interval: int = 1
    threshold: float = 0.8
    output_every: int = 1
    checkpoints: int = 10
    observables: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return grid_size(self.T, self.dt)

    def filter_config(self):
        return FilterConfig(self.dt, self.form, self.scheme, self.renorm_interval,
                            self.resym_interval)

    def output_rows(self, n_steps=None):
        n = self.n_steps if n_steps is None else n_steps
        rows = list(range(0, n + 1, self.output_every))
        if rows[-1] != n:
            rows.append(n)
        return rows

    def checkpoint_rows(self, n_steps=None):
        n = self.n_steps if n_steps is None else n_steps
        return [k * n // self.checkpoints for k in range(self.checkpoints + 1)]


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantModel
    fault: FaultModel
    wavepacket: Wavepacket
    run: RunSettings

    def to_dict(self):
        r = self.run
        run = {f.name: getattr(r, f.name) for f in fields(r) if f.name != "observables"}
        run["observables"] = {k: matrix_to_json(v) for k, v in r.observables.items()}
        return {
            "plant": {
                "n": self.plant.n,
                "H_modes": [matrix_to_json(H) for H in self.plant.H_modes],
                "L": matrix_to_json(self.plant.L),
                "pi0": matrix_to_json(self.plant.pi0),
            },
            "fault": self.fault.to_dict(),
            "wavepacket": self.wavepacket.to_dict(),
            "run": run,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        """SHA-256 of the canonical JSON form (seed included)."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    @classmethod
    def from_dict(cls, d):
        try:
            return _parse_config(d)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, IndexError) as exc:
            raise ConfigError(f"{type(exc).__name__}: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def with_run(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        try:
            run = replace(self.run, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return ExperimentConfig(self.plant, self.fault, self.wavepacket, _check_run(run))


_TOP_KEYS = {"plant", "fault", "wavepacket", "run"}
_PLANT_KEYS = {"n", "H_modes", "L", "pi0", "S"}
_FAULT_KEYS = {"Pi", "p0"}


def _unknown(d, allowed, where):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(extra))}")


def _parse_config(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _unknown(d, _TOP_KEYS, "top-level")
    for key in _TOP_KEYS:
        if key not in d:
            raise ConfigError(f"missing section {key!r}")
    p = d["plant"]
    _unknown(p, _PLANT_KEYS, "plant")
    H = [matrix_from_json(h) for h in p["H_modes"]]
    L = matrix_from_json(p["L"])
    pi0 = matrix_from_json(p["pi0"])
    if "n" in p and int(p["n"]) != L.shape[0]:
        raise ConfigError(f"plant.n = {p['n']} but L is {L.shape[0]}x{L.shape[0]}")
    if "S" in p:
        S = matrix_from_json(p["S"])
        if S.shape != (1, 1) or abs(S[0, 0] - 1) > 1e-12:
            raise ConfigError("only identity scattering (S = [[1]]) is supported")
    plant = PlantModel(np.array(H), L, pi0)
    f = d["fault"]
    _unknown(f, _FAULT_KEYS, "fault")
    fault = validate_qmatrix(f["Pi"], f.get("p0"))
    if fault.N != plant.N:
        raise ConfigError(
            f"fault model has {fault.N} modes but plant lists {plant.N} Hamiltonians"
        )
    w = Wavepacket.from_dict(d["wavepacket"])
    r = dict(d["run"])
    allowed = {f.name for f in fields(RunSettings)}
    _unknown(r, allowed, "run")
    obs = {}
    for name, m in r.pop("observables", {}).items():
        X = matrix_from_json(m)
        if X.shape != (plant.n, plant.n):
            raise ConfigError(f"observable {name!r} has shape {X.shape}")
        if not is_hermitian(X):
            raise ConfigError(f"observable {name!r} is not Hermitian")
        obs[str(name)] = X
    types = {"T": float, "dt": float, "seed": int, "n_traj": int, "form": str,
             "scheme": str, "renorm_interval": int, "resym_interval": int,
             "threshold": float, "output_every": int, "checkpoints": int}
    run = RunSettings(observables=obs, **{k: types[k](v) for k, v in r.items()})
    return ExperimentConfig(plant, fault, w, _check_run(run))


def _check_run(run):
    if run.form not in FORMS:
        raise ConfigError(f"run.form must be one of {FORMS}")
    if run.scheme not in SCHEMES:
        raise ConfigError(f"run.scheme must be one of {SCHEMES}")
    try:
        n = run.n_steps
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if run.seed < 0:
        raise ConfigError("run.seed must be non-negative")
    if run.n_traj < 1:
        raise ConfigError("run.n_traj must be at least 1")
    if not 0 < run.threshold <= 1:
        raise ConfigError("run.threshold must lie in (0, 1]")
    if run.renorm_interval < 1 or run.resym_interval < 1 or run.output_every < 1:
        raise ConfigError("run intervals must be >= 1")
    if not 1 <= run.checkpoints <= n:
        raise ConfigError("run.checkpoints must lie between 1 and the step count")
    reserved = {"t", "dY", "K_t", "log_normalizer"}
    for name in run.observables:
        if not name.isidentifier() or name in reserved or name.startswith("p_hat_"):
            raise ConfigError(f"observable name {name!r} is not allowed")
    return run


def example31_config(rate=0.2, gamma=1.0, T=10.0, dt=1e-3, n_traj=1, seed=0,
                     coupling=True, **run):
    """Two-mode desk scenario: a fault switches the atom from ``H = 0`` to ``2 sigma_z``.

    The atom starts in its ground state and couples through ``sigma_-``
    (or not at all when ``coupling`` is false).
    """
    n = 2
    L = sigma_minus() if coupling else np.zeros((n, n))
    plant = PlantModel(np.stack([np.zeros((n, n)), 2 * sigma_z()]), L, np.diag([0.0, 1.0]))
    fault = validate_qmatrix([[-rate, 0.0], [rate, 0.0]], [1.0, 0.0])
    settings = RunSettings(T=T, dt=dt, n_traj=n_traj, seed=seed, **run)
    return ExperimentConfig(plant, fault, Wavepacket.exponential(gamma), _check_run(settings))


def substream(seed, index):
    """Generator owned by trajectory ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


# -- ensemble ----------------------------------------------------------------


_STATS = ("n", "s1", "s2", "s4", "lag", "head", "tail", "pairs")


@dataclass
class EnsembleResult:
    """Ensemble output gathered in trajectory order.

    ``p_hat`` and ``true_modes`` are sampled at ``checkpoint_times``
    (``t = 0`` first). ``innovation`` holds per-trajectory sums of the
    innovation increments (see ``_STATS``). ``reports`` are sampled at the
    configured output rows.
    """

    config: ExperimentConfig
    checkpoint_times: np.ndarray
    p_hat: np.ndarray
    true_modes: np.ndarray
    innovation: np.ndarray
    clamped_steps: int
    max_imag_K: float
    blocks: np.ndarray | None = None
    reports: list | None = None


def _trajectory_stats(dW):
    x = dW
    return np.stack([
        np.full(x.shape[0], x.shape[1], dtype=float),
        x.sum(axis=1),
        (x ** 2).sum(axis=1),
        (x ** 4).sum(axis=1),
        (x[:, :-1] * x[:, 1:]).sum(axis=1),
        x[:, :-1].sum(axis=1),
        x[:, 1:].sum(axis=1),
        np.full(x.shape[0], x.shape[1] - 1, dtype=float),
    ], axis=1)


def _fmt(x):
    return repr(float(x))


def _write_filter_csv(path, times, dY_rows, K_rows, p_hat, estimates, logn):
    names = list(estimates)
    header = ["t", "dY", "K_t"] + [f"p_hat_{j + 1}" for j in range(p_hat.shape[1])] + names
    if logn is not None:
        header.append("log_normalizer")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(times)):
            last = k == len(times) - 1
            row = [_fmt(times[k]), "" if last else _fmt(dY_rows[k]),
                   "" if last else _fmt(K_rows[k])]
            row += [_fmt(v) for v in p_hat[k]]
            row += [_fmt(estimates[nm][k]) for nm in names]
            if logn is not None:
                row.append(_fmt(logn[k]))
            w.writerow(row)


def read_filter_csv(path):
    """Load a filter trajectory file; returns ``(times, p_hat)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["t", "dY", "K_t"]:
        raise ConfigError(f"{path}: not a filter trajectory file")
    cols = [i for i, h in enumerate(rows[0]) if h.startswith("p_hat_")]
    if not cols:
        raise ConfigError(f"{path}: no posterior columns")
    try:
        data = np.array([[float(r[0])] + [float(r[i]) for i in cols] for r in rows[1:]])
    except (ValueError, IndexError):
        raise ConfigError(f"{path}: malformed row") from None
    if data.size == 0:
        raise ConfigError(f"{path}: no rows")
    return data[:, 0], data[:, 1:]


class _Chunk:
    """Everything one chunk of trajectories contributes to a run."""

    def __init__(self, config, indices, out_dir, keep_blocks, keep_reports):
        self.config = config
        self.indices = list(indices)
        self.out_dir = out_dir
        self.keep_blocks = keep_blocks
        self.keep_reports = keep_reports

    def __call__(self):
        cfg, run = self.config, self.config.run
        rngs = [substream(run.seed, i) for i in self.indices]
        try:
            records = simulate_batch(cfg.plant, cfg.fault, cfg.wavepacket, run.T, run.dt,
                                     rngs, scheme=run.scheme)
            dY = np.stack([r.dY for r in records])
            return self._filter(records, dY)
        except DivergenceError as exc:
            where = self.indices[exc.index] if exc.index is not None else self.indices[0]
            raise DivergenceError(f"trajectory {where}: {exc}", index=where) from None

    def _filter(self, records, dY):
        cfg, run = self.config, self.config.run
        n = dY.shape[1]
        out_rows = run.output_rows(n)
        ck_rows = run.checkpoint_rows(n)
        traj = filter_record(cfg.plant, cfg.fault, cfg.wavepacket, dY, run.filter_config(),
                             observables=run.observables, keep_increments=True,
                             keep_blocks=self.keep_blocks,
                             record_indices=sorted(set(out_rows) | set(ck_rows)))
        rec = list(np.rint(traj.times / run.dt).astype(int))
        pos = {r: k for k, r in enumerate(rec)}
        o = [pos[r] for r in out_rows]
        c = [pos[r] for r in ck_rows]
        result = {
            "indices": self.indices,
            "p_hat": np.moveaxis(traj.p_hat[c], 0, 1),
            "true_modes": np.stack([r.fault_path.modes[ck_rows] for r in records]),
            "innovation": _trajectory_stats(traj.dW),
            "clamped_steps": traj.clamped_steps,
            "max_imag_K": traj.max_imag_K,
            "blocks": None if traj.blocks is None else np.moveaxis(traj.blocks[c], 0, 1),
            "reports": [],
        }
        times = np.asarray(out_rows) * run.dt
        cum = np.concatenate([np.zeros((dY.shape[0], 1)), np.cumsum(dY, axis=1)], axis=1)
        for b, (i, record) in enumerate(zip(self.indices, records)):
            p = traj.p_hat[o, b]
            path = record.fault_path
            report = detect.build_report(times, p, run.threshold,
                                         path.modes[out_rows], path.jumps)
            if self.keep_reports:
                result["reports"].append(report)
            if self.out_dir is not None:
                self._write(i, record, report, traj, b, o, out_rows, cum[b])
        return result

    def _write(self, i, record, report, traj, b, o, out_rows, cum):
        cfg, run = self.config, self.config.run
        d = Path(self.out_dir)
        tag = f"{i:05d}"
        record.meta = {"seed": run.seed, "trajectory": i, "config_sha256": cfg.digest()}
        record.write(d / f"record_{tag}.csv", d / f"record_{tag}.json")
        record.fault_path.write(d / f"path_{tag}.csv")
        dY_rows = cum[out_rows[1:]] - cum[out_rows[:-1]]
        K_rows = traj.K[b, out_rows[:-1]]
        logn = traj.log_normalizer[o, b] if run.form == "zakai" else None
        est = {nm: v[o, b] for nm, v in traj.estimates.items()}
        _write_filter_csv(d / f"filter_{tag}.csv", report.times, dY_rows, K_rows,
                          report.p_hat, est, logn)
        report.write_flags(d / f"flags_{tag}.csv")


def _run_chunk(chunk):
    return chunk()


def run_ensemble(config, out_dir=None, workers=1, chunk_size=100, keep_blocks=False,
                 keep_reports=True):
    """Simulate, filter and score ``config.run.n_traj`` trajectories.

    With ``out_dir`` every trajectory writes ``record_#####.csv/json``,
    ``path_#####.csv``, ``filter_#####.csv`` and ``flags_#####.csv``.
    Results do not depend on ``workers``.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    run = config.run
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    idx = list(range(run.n_traj))
    chunks = [_Chunk(config, idx[a:a + chunk_size], out_dir, keep_blocks, keep_reports)
              for a in range(0, len(idx), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [c() for c in chunks]
    n = run.n_steps
    reports = [r for p in parts for r in p["reports"]] if keep_reports else None
    blocks = None
    if keep_blocks:
        blocks = np.concatenate([p["blocks"] for p in parts])
    return EnsembleResult(
        config=config,
        checkpoint_times=np.asarray(run.checkpoint_rows(n)) * run.dt,
        p_hat=np.concatenate([p["p_hat"] for p in parts]),
        true_modes=np.concatenate([p["true_modes"] for p in parts]),
        innovation=np.concatenate([p["innovation"] for p in parts]),
        clamped_steps=max(p["clamped_steps"] for p in parts),
        max_imag_K=max(p["max_imag_K"] for p in parts),
        blocks=blocks,
        reports=reports,
    )


# -- summaries ---------------------------------------------------------------


def innovation_summary(stats, dt):
    """Pooled moments of innovation increments from per-trajectory sums."""
    tot = {k: math.fsum(stats[:, i]) for i, k in enumerate(_STATS)}
    n = tot["n"]
    m = tot["s1"] / n
    var = tot["s2"] / n - m * m
    m4 = tot["s4"] / n
    num = tot["lag"] - m * tot["head"] - m * tot["tail"] + m * m * tot["pairs"]
    den = tot["s2"] - n * m * m
    return {
        "count": int(n),
        "mean": m,
        "mean_se": math.sqrt(max(var, 0.0) / n),
        "var": var,
        "var_se": math.sqrt(max(m4 - var * var, 0.0) / n),
        "dt": dt,
        "lag1": num / den,
        "lag1_bound": 3.0 / math.sqrt(tot["pairs"]),
    }


def kolmogorov_summary(result):
    """Ensemble-mean posterior against the forward Kolmogorov solution."""
    cfg, run = result.config, result.config.run
    p_ref = kolmogorov_solve(cfg.fault, run.T, run.dt)[run.checkpoint_rows()]
    M = result.p_hat.shape[0]
    mean = result.p_hat.mean(axis=0)
    out = {"times": result.checkpoint_times.tolist(), "mean": mean.tolist(),
           "expected": p_ref.tolist(), "n_trajectories": M}
    if M > 1:
        se = result.p_hat.std(axis=0, ddof=1) / math.sqrt(M)
        dev = np.abs(mean - p_ref)
        # t = 0 is deterministic: zero spread and zero deviation
        z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 1e-12, np.inf, 0.0))
        out.update(se=se.tolist(), max_abs_z=float(z.max()),
                   within_3se=bool(np.all(z <= 3.0)))
    else:
        out.update(se=None, max_abs_z=None, within_3se=None)
    return out


def calibration_summary(result):
    """Decile reliability tables from the checkpoint samples after ``t = 0``."""
    p = result.p_hat[:, 1:]
    truth = result.true_modes[:, 1:]
    groups = np.broadcast_to(np.arange(p.shape[0])[:, None], truth.shape)
    out = {}
    for j in range(p.shape[-1]):
        table = detect.calibration_table(p[..., j], truth == j, groups)
        z_center, z_mean = [], []
        for row in table:
            if row["count"] and row["se"]:
                z_center.append(abs(row["frequency"] - row["center"]) / row["se"])
                z_mean.append(abs(row["frequency"] - row["mean_p"]) / row["se"])
        out[str(j + 1)] = {
            "bins": table,
            "max_abs_z_center": max(z_center, default=None),
            "max_abs_z_mean": max(z_mean, default=None),
        }
    return out


def summarize(result):
    """Ensemble summary dictionary written to ``summary.json``."""
    cfg, run = result.config, result.config.run
    out = {
        "config_sha256": cfg.digest(),
        "seed": run.seed,
        "n_traj": run.n_traj,
        "T": run.T,
        "dt": run.dt,
        "form": run.form,
        "scheme": run.scheme,
        "threshold": run.threshold,
        "diagnostics": {
            "clamped_steps": result.clamped_steps,
            "max_abs_imag_K": result.max_imag_K,
        },
        "kolmogorov": kolmogorov_summary(result),
        "calibration": calibration_summary(result),
        "innovations": innovation_summary(result.innovation, run.dt),
    }
    if result.reports:
        m = detect.metrics(result.reports)
        out["detection"] = {k: m[k] for k in ("latency_quantiles", "latency_counts",
                                              "confusion", "confusion_time",
                                              "flag_agreement", "flag_count")}
    return out


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# -- offline filtering -------------------------------------------------------


def filter_file(config, record_csv, out_dir, sidecar=None):
    """Filter a stored record with ``config`` and write its outputs.

    Writes ``filter.csv`` and ``flags.csv`` to ``out_dir`` (plus
    ``metrics.json`` when the sidecar carries a hidden fault path) and
    returns the :class:`~faultfilter.detect.DetectionReport`.
    """
    run = config.run
    if sidecar is None:
        guess = Path(record_csv).with_suffix(".json")
        sidecar = guess if guess.exists() else None
    record = read_record(record_csv, sidecar)
    if abs(record.dt - run.dt) > 1e-12 * run.dt:
        raise ConfigError(f"record step {record.dt!r} does not match config dt {run.dt!r}")
    n = record.n_steps
    out_rows = run.output_rows(n)
    traj = filter_record(config.plant, config.fault, config.wavepacket, record.dY,
                         run.filter_config(), observables=run.observables,
                         record_indices=out_rows)
    times = np.asarray(out_rows) * run.dt
    true_modes = jumps = None
    if "hidden_path" in record.meta:
        path = FaultPath.from_sidecar(record.meta["hidden_path"], record.times)
        if path.modes.max() >= config.fault.N:
            raise ConfigError("hidden path uses more modes than the config defines")
        true_modes, jumps = path.modes[out_rows], path.jumps
    report = detect.build_report(times, traj.p_hat, run.threshold, true_modes, jumps)
    os.makedirs(out_dir, exist_ok=True)
    cum = np.concatenate([[0.0], np.cumsum(record.dY)])
    dY_rows = cum[out_rows[1:]] - cum[out_rows[:-1]]
    logn = traj.log_normalizer if run.form == "zakai" else None
    _write_filter_csv(Path(out_dir) / "filter.csv", times, dY_rows, traj.K[out_rows[:-1]],
                      traj.p_hat, traj.estimates, logn)
    report.write_flags(Path(out_dir) / "flags.csv")
    if true_modes is not None:
        write_json(Path(out_dir) / "metrics.json", detect.metrics([report]))
    return report
