"""Built-in invariant suites.

Each suite returns a :class:`SuiteResult`. ``run_validate`` runs the
quick set used by ``faultfilter validate``; the acceptance tests call the
same functions with full-size parameters.
"""

from __future__ import annotations

import filecmp
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import filtering
from .cascade import PlantModel
from .experiment import (
    calibration_summary,
    example31_config,
    innovation_summary,
    kolmogorov_summary,
    run_ensemble,
)
from .detect import flag_agreement
from .faultproc import validate_qmatrix
from .filtering import FilterConfig, filter_record, init_state, reference_step, step_normalized
from .linop import lindblad_heisenberg, lindblad_schrodinger, sigma_minus, sigma_plus, sigma_x, sigma_z
from .truthsim import simulate_batch
from .wavepacket import Wavepacket

__all__ = [
    "SuiteResult",
    "example_ensemble",
    "builtin_wavepackets",
    "duality_suite",
    "lindblad_table_suite",
    "reduction_suite",
    "normalization_suite",
    "zakai_order_suite",
    "kolmogorov_suite",
    "extraction_suite",
    "innovation_suite",
    "calibration_suite",
    "flag_suite",
    "determinism_suite",
    "run_validate",
    "format_table",
]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_hermitian(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (a + a.conj().T)


def _random_density(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


@_timed
def duality_suite(n_cases=200, seed=11, tol=1e-10):
    """``Tr(rho L(X)) = Tr(L*(rho) X)`` on random operators of dimension 2 to 4."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(2, 5))
        H = _random_hermitian(rng, n)
        L = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        rho = _random_density(rng, n)
        X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        lhs = np.trace(rho @ lindblad_heisenberg(H, L, X))
        rhs = np.trace(lindblad_schrodinger(H, L, rho) @ X)
        worst = max(worst, abs(lhs - rhs))
    return SuiteResult("duality", worst <= tol,
                       f"max deviation {worst:.2e} over {n_cases} cases (tol {tol:g})",
                       values={"max_dev": worst})


def builtin_wavepackets():
    return {
        "exponential": Wavepacket.exponential(1.0),
        "gaussian": Wavepacket.gaussian(3.0, 1.0),
        "square": Wavepacket.square(0.0, 1.0),
    }


@_timed
def lindblad_table_suite(n_times=50, tol=1e-12, min_omega=1e-3):
    """Ancilla generator on ``{I, s-, s+, s+ s-}`` against its closed-form table."""
    sm, sp = sigma_minus(), sigma_plus()
    zero = np.zeros((2, 2))
    worst = 0.0
    for w in builtin_wavepackets().values():
        # sample where the tail energy is not yet negligible
        ts = np.linspace(0.0, 12.0, 4001)
        ok = ts[np.array([w.omega(t) for t in ts]) >= min_omega]
        for t in np.linspace(ok[0], ok[-1], n_times):
            lam = w.coupling(t)
            r = abs(w.xi(t)) ** 2 / w.omega(t)
            L = lam * sm
            expected = [zero, -0.5 * r * sm, -0.5 * r * sp, -r * (sp @ sm)]
            for X, E in zip([np.eye(2), sm, sp, sp @ sm], expected):
                worst = max(worst, float(np.abs(lindblad_heisenberg(zero, L, X) - E).max()))
    return SuiteResult("lindblad-table", worst <= tol,
                       f"max entry deviation {worst:.2e} at {n_times} times x 3 shapes",
                       values={"max_dev": worst})


def _reduction_plant():
    return PlantModel([2 * sigma_z() + 0.5 * sigma_x()], sigma_minus(), np.diag([0.0, 1.0]))


@_timed
def reduction_suite(n_records=20, n_steps=10_000, dt=1e-3, seed=5, tol=1e-9,
                    schemes=("positive", "euler")):
    """Fault-tolerant filter with one mode against the independent reference filter."""
    plant = _reduction_plant()
    fm = validate_qmatrix([[0.0]], [1.0])
    w = Wavepacket.exponential(1.0)
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i in range(n_records)]
    records = simulate_batch(plant, fm, w, n_steps * dt, dt, rngs)
    dY = np.stack([r.dY for r in records])
    worst = {}
    for scheme in schemes:
        a = b = init_state(plant, fm, (n_records,))
        dev = 0.0
        for i in range(n_steps):
            a, Ka, _ = step_normalized(a, plant, fm, w, dY[:, i], dt, scheme)
            b, Kb, _ = reference_step(b, plant, w, dY[:, i], dt, scheme)
            dev = max(dev, float(np.abs(a.blocks() - b.blocks()).max()),
                      float(np.abs(Ka - Kb).max()))
            if not np.isfinite(dev):
                break
        worst[scheme] = dev
    passed = all(v <= tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    return SuiteResult("reduction", passed,
                       f"max block deviation {detail} over {n_records}x{n_steps} steps (tol {tol:g})",
                       values=worst)


@_timed
def normalization_suite(n_traj=100, T=10.0, dt=1e-3, seed=21, form="normalized"):
    """Posterior mass and range along every step of seeded trajectories."""
    cfg = example31_config(T=T, dt=dt, n_traj=n_traj, seed=seed, form=form)
    run = cfg.run
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i in range(n_traj)]
    records = simulate_batch(cfg.plant, cfg.fault, cfg.wavepacket, T, dt, rngs)
    dY = np.stack([r.dY for r in records])
    traj = filter_record(cfg.plant, cfg.fault, cfg.wavepacket, dY, run.filter_config(),
                         keep_increments=False)
    p = traj.p_hat
    mass_err = float(np.abs(p.sum(axis=-1) - 1).max())
    lo, hi = float(p.min()), float(p.max())
    passed = mass_err <= 1e-6 and lo >= -1e-8 and hi <= 1 + 1e-8
    return SuiteResult("normalization", passed,
                       f"max |sum p - 1| = {mass_err:.2e}, p in [{lo:.3g}, {hi:.12g}]",
                       values={"mass_err": mass_err, "min": lo, "max": hi})


def _pairwise(dY):
    return dY[..., 0::2] + dY[..., 1::2]


@_timed
def zakai_order_suite(n_traj=32, T=10.0, dt=1e-4, seed=7, scheme="euler",
                      sample_every=0.1, tol=1e-2, band=(1.5, 2.5)):
    """RMS posterior gap between the zakai and normalized forms at ``dt`` and ``dt/2``.

    Records are simulated at ``dt/2``; the coarse record sums pairs of
    fine increments so both grids see the same Brownian path.
    """
    cfg = example31_config(T=T, dt=dt / 2, n_traj=n_traj, seed=seed)
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i in range(n_traj)]
    records = simulate_batch(cfg.plant, cfg.fault, cfg.wavepacket, T, dt / 2, rngs,
                             scheme=scheme)
    fine = np.stack([r.dY for r in records])
    rms = {}
    for h, dY in ((dt, _pairwise(fine)), (dt / 2, fine)):
        stride = int(round(sample_every / h))
        p = {}
        for form in ("normalized", "zakai"):
            tr = filter_record(cfg.plant, cfg.fault, cfg.wavepacket, dY,
                               FilterConfig(h, form=form, scheme=scheme),
                               record_every=stride, keep_increments=False)
            p[form] = tr.p_hat
        rms[h] = float(np.sqrt(np.mean((p["normalized"] - p["zakai"]) ** 2)))
    coarse, fine_rms = rms[dt], rms[dt / 2]
    ratio = coarse / fine_rms if fine_rms > 0 else math.inf
    passed = coarse <= tol and band[0] <= ratio <= band[1]
    return SuiteResult(
        "zakai-order", passed,
        f"{scheme}: RMS gap {coarse:.3e} at dt={dt:g}, {fine_rms:.3e} at dt={dt / 2:g}, "
        f"ratio {ratio:.3f} (need <= {tol:g} and ratio in [{band[0]}, {band[1]}])",
        values={"rms_coarse": coarse, "rms_fine": fine_rms, "ratio": ratio},
    )


def example_ensemble(n_traj=2000, seed=7, T=10.0, dt=1e-3, output_every=10, **kw):
    """Seeded ensemble on the two-mode desk scenario."""
    cfg = example31_config(T=T, dt=dt, n_traj=n_traj, seed=seed,
                           output_every=output_every, **kw)
    return run_ensemble(cfg, chunk_size=250)


@_timed
def kolmogorov_suite(result):
    """Ensemble-mean posterior against the forward Kolmogorov solution."""
    k = kolmogorov_summary(result)
    return SuiteResult("kolmogorov", bool(k["within_3se"]),
                       f"max |mean - p|/se = {k['max_abs_z']:.2f} at "
                       f"{len(k['times']) - 1} checkpoints, M = {k['n_trajectories']}",
                       values=k)


@_timed
def innovation_suite(result):
    """Pooled innovation increments: zero mean, variance ``dt``, no lag-1 correlation."""
    s = innovation_summary(result.innovation, result.config.run.dt)
    z_mean = abs(s["mean"]) / s["mean_se"]
    z_var = abs(s["var"] - s["dt"]) / s["var_se"]
    passed = z_mean <= 3 and z_var <= 3 and abs(s["lag1"]) <= s["lag1_bound"]
    return SuiteResult(
        "innovations", passed,
        f"n = {s['count']}, mean z = {z_mean:.2f}, var z = {z_var:.2f}, "
        f"|lag1| = {abs(s['lag1']):.2e} (bound {s['lag1_bound']:.2e})",
        values=s,
    )


@_timed
def calibration_suite(result, mode=2, reference="center"):
    """Decile reliability of ``p_hat^mode``: bin frequency within 3 s.e. of the bin center.

    ``reference="mean"`` compares against the mean posterior inside each
    bin instead.
    """
    c = calibration_summary(result)[str(mode)]
    key = "max_abs_z_center" if reference == "center" else "max_abs_z_mean"
    z = c[key]
    worst = None
    for row in c["bins"]:
        if row["count"] and row["se"]:
            ref = row["center"] if reference == "center" else row["mean_p"]
            zz = abs(row["frequency"] - ref) / row["se"]
            if worst is None or zz > worst[0]:
                worst = (zz, row)
    detail = f"max z vs bin {reference} = {z:.2f}"
    if worst is not None:
        row = worst[1]
        detail += (f" (bin [{row['lo']:.1f}, {row['hi']:.1f}): freq {row['frequency']:.3f}, "
                   f"mean p {row['mean_p']:.3f}, se {row['se']:.3f}, n {row['count']})")
    return SuiteResult(f"calibration-{reference}", z is not None and z <= 3, detail, values=c)


@_timed
def flag_suite(result, threshold=0.8, minimum=0.7):
    """Share of flagged instants whose flagged mode is the hidden one."""
    reports = result.reports
    if threshold != result.config.run.threshold:
        from .detect import build_report
        reports = [build_report(r.times, r.p_hat, threshold, r.true_modes, r.jumps)
                   for r in reports]
    share, count = flag_agreement(reports)
    passed = count > 0 and share >= minimum
    return SuiteResult("flag-agreement", passed,
                       f"{share:.3%} of {count} flagged instants name the true mode "
                       f"(threshold {threshold}, need >= {minimum:.0%})",
                       values={"share": share, "count": count})


@_timed
def extraction_suite(n_traj=1000, T=10.0, dt=1e-3, seed=41):
    """With the atom decoupled, ``E[Tr rho00(t)] = 1`` before the clamp."""
    cfg = example31_config(T=T, dt=dt, n_traj=n_traj, seed=seed, coupling=False,
                           output_every=1000)
    res = run_ensemble(cfg, chunk_size=250, keep_blocks=True, keep_reports=False)
    w = cfg.wavepacket
    times = res.checkpoint_times
    live = np.array([not w.is_clamped(t) for t in times])
    tr00 = np.einsum("mkjii->mk", res.blocks[:, :, :, 0]).real
    mean = tr00.mean(axis=0)
    se = tr00.std(axis=0, ddof=1) / math.sqrt(n_traj)
    # t = 0 is exact; elsewhere compare in units of the standard error
    dev = np.abs(mean - 1)
    z = np.where(se > 0, dev / np.where(se > 0, se, 1), np.where(dev > 1e-12, np.inf, 0))
    z = z[live]
    passed = bool(np.all(z <= 3))
    return SuiteResult("photon-extraction", passed,
                       f"max |mean Tr rho00 - 1|/se = {z.max():.2f} at {int(live.sum())} "
                       f"unclamped checkpoints, M = {n_traj}",
                       values={"times": times.tolist(), "mean": mean.tolist(),
                               "se": se.tolist()})


@_timed
def determinism_suite(runner, workers=(1, 2)):
    """Run the CLI twice per worker count and compare every output byte.

    ``runner(out_dir, workers)`` must produce the output files.
    """
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for wk in workers:
            for rep in range(2):
                d = Path(tmp) / f"w{wk}_r{rep}"
                runner(d, wk)
                dirs.append(d)
        names = sorted(p.name for p in dirs[0].iterdir())
        bad = []
        for d in dirs[1:]:
            other = sorted(p.name for p in d.iterdir())
            if other != names:
                bad.append(f"{d.name}: file set differs")
                continue
            _, mismatch, errors = filecmp.cmpfiles(dirs[0], d, names, shallow=False)
            bad += [f"{d.name}/{m}" for m in mismatch + errors]
    passed = not bad and len(names) > 0
    return SuiteResult("determinism", passed,
                       f"{len(names)} files x {len(dirs)} runs, "
                       + ("all byte-identical" if passed else f"differences: {bad[:5]}"))


def run_validate(quick=True):
    """Run the built-in suites; returns the list of results.

    The statistical suites use fixed seeds, so pass or fail is
    reproducible. ``quick`` shrinks their trajectory counts.
    """
    M = 200 if quick else 2000
    results = [
        duality_suite(),
        lindblad_table_suite(),
        reduction_suite(n_steps=2_000 if quick else 10_000),
        normalization_suite(n_traj=20 if quick else 100),
    ]
    ens = example_ensemble(n_traj=M, seed=7)
    results += [kolmogorov_suite(ens), calibration_suite(ens)]
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  result  time     detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  "
                     f"{r.seconds:6.1f}s  {r.detail}")
    return "\n".join(lines)
