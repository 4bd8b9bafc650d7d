import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from faultfilter.experiment import (
    ConfigError,
    ExperimentConfig,
    example31_config,
    filter_file,
    innovation_summary,
    read_filter_csv,
    run_ensemble,
    substream,
    summarize,
    write_json,
)
from faultfilter.linop import sigma_x, sigma_z

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "example31.json"


def small(**run):
    run.setdefault("T", 1.0)
    run.setdefault("n_traj", 3)
    run.setdefault("output_every", 50)
    return example31_config(observables={"sz": sigma_z()}, seed=5, **run)


def test_shipped_config_loads():
    cfg = ExperimentConfig.load(CONFIG)
    assert cfg.plant.N == 2 and cfg.run.n_traj == 4
    assert cfg == example31_config(n_traj=4, seed=1, output_every=10,
                                   observables={"sigma_z": sigma_z()})


def test_round_trip(tmp_path):
    cfg = example31_config(rate=0.7, seed=3, form="zakai", observables={"sx": sigma_x()})
    cfg.dump(tmp_path / "c.json")
    again = ExperimentConfig.load(tmp_path / "c.json")
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert again.to_json() == (tmp_path / "c.json").read_text()


def test_digest_tracks_seed():
    assert small().digest() != small().with_run(seed=6).digest()


def edit(mutate):
    d = json.loads(CONFIG.read_text())
    mutate(d)
    return d


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d.pop("fault"), "missing"),
    (lambda d: d.update(extra=1), "unknown"),
    (lambda d: d["run"].update(speed=1), "unknown"),
    (lambda d: d["run"].update(dt=0.3), "integer"),
    (lambda d: d["run"].update(threshold=0.0), "threshold"),
    (lambda d: d["run"].update(form="linear"), "form"),
    (lambda d: d["run"].update(n_traj=0), "n_traj"),
    (lambda d: d["run"].update(seed=-1), "seed"),
    (lambda d: d["fault"].update(Pi=[[-1, 0], [0.5, 0]]), "column"),
    (lambda d: d["fault"].update(Pi=[[0.0]], p0=[1.0]), "modes"),
    (lambda d: d["plant"].update(n=3), "plant.n"),
    (lambda d: d["plant"].update(S=[[[0.5, 0]]]), "scattering"),
    (lambda d: d["wavepacket"].update(shape="sawtooth"), "sawtooth"),
    (lambda d: d["run"]["observables"].update(p_hat_1=[[[1, 0], [0, 0]], [[0, 0], [1, 0]]]),
     "not allowed"),
    (lambda d: d["run"]["observables"].update(bad=[[[0, 0], [1, 0]], [[0, 0], [0, 0]]]),
     "Hermitian"),
])
def test_config_errors(mutate, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(edit(mutate))


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_substream_independent_of_order():
    a = substream(9, 3).standard_normal(4)
    substream(9, 0).standard_normal(100)
    assert np.array_equal(a, substream(9, 3).standard_normal(4))
    assert not np.array_equal(a, substream(9, 2).standard_normal(4))


def test_output_files(tmp_path):
    cfg = small()
    run_ensemble(cfg, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    for i in range(3):
        for stem in ("record", "path", "filter", "flags"):
            assert f"{stem}_{i:05d}.csv" in names
        assert f"record_{i:05d}.json" in names
    with open(tmp_path / "filter_00000.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "dY", "K_t", "p_hat_1", "p_hat_2", "sz"]
    assert len(rows) == 1 + 21
    assert rows[-1][1] == "" and rows[-1][2] == ""
    side = json.loads((tmp_path / "record_00001.json").read_text())
    assert side["trajectory"] == 1 and side["seed"] == 5
    assert side["config_sha256"] == cfg.digest()
    # interval sums of dY line up with the record file
    with open(tmp_path / "record_00000.csv") as fh:
        dY = np.array([float(r[1]) for r in list(csv.reader(fh))[1:]])
    assert float(rows[1][1]) == pytest.approx(dY[:50].sum(), abs=1e-14)
    assert (tmp_path / "flags_00000.csv").read_text().startswith("t,flagged_modes\n")


def test_zakai_files_carry_log_normalizer(tmp_path):
    run_ensemble(small(form="zakai", n_traj=1), tmp_path)
    header = (tmp_path / "filter_00000.csv").read_text().splitlines()[0]
    assert header.endswith(",log_normalizer")


def test_outputs_independent_of_chunks_and_workers(tmp_path):
    cfg = small(n_traj=5)
    a = run_ensemble(cfg, tmp_path / "a", workers=1, chunk_size=5)
    b = run_ensemble(cfg, tmp_path / "b", workers=2, chunk_size=2)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names,
                                               shallow=False)
    assert mismatch == [] and errors == [] and len(match) == len(names)
    assert np.array_equal(a.p_hat, b.p_hat)
    assert np.array_equal(a.innovation, b.innovation)


def test_offline_filter_reproduces_inline_run(tmp_path):
    cfg = small(n_traj=2)
    run_ensemble(cfg, tmp_path)
    report = filter_file(cfg, tmp_path / "record_00001.csv", tmp_path / "replay")
    assert filecmp.cmp(tmp_path / "filter_00001.csv", tmp_path / "replay" / "filter.csv",
                       shallow=False)
    assert filecmp.cmp(tmp_path / "flags_00001.csv", tmp_path / "replay" / "flags.csv",
                       shallow=False)
    assert report.true_modes is not None
    m = json.loads((tmp_path / "replay" / "metrics.json").read_text())
    assert set(m) >= {"calibration", "latency_quantiles", "confusion"}
    t, p = read_filter_csv(tmp_path / "replay" / "filter.csv")
    assert p.shape == (21, 2) and t[-1] == pytest.approx(1.0)


def test_offline_filter_grid_mismatch(tmp_path):
    cfg = small(n_traj=1)
    run_ensemble(cfg, tmp_path)
    with pytest.raises(ConfigError, match="dt"):
        filter_file(cfg.with_run(dt=5e-4), tmp_path / "record_00000.csv", tmp_path / "x")


def test_summary_blocks():
    res = run_ensemble(small(n_traj=6), chunk_size=4)
    s = summarize(res)
    assert set(s) >= {"kolmogorov", "calibration", "innovations", "detection"}
    assert s["kolmogorov"]["mean"][0] == [1.0, 0.0]
    assert s["innovations"]["count"] == 6 * 1000
    assert res.p_hat.shape == (6, 11, 2)
    assert res.max_imag_K <= 1e-10


def test_innovation_summary_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(0.1, 2.0, (4, 500))
    from faultfilter.experiment import _trajectory_stats
    s = innovation_summary(_trajectory_stats(x), 1e-3)
    flat = x.ravel()
    assert s["mean"] == pytest.approx(flat.mean(), rel=1e-12)
    assert s["var"] == pytest.approx(flat.var(), rel=1e-12)
    # lag-1 autocorrelation is taken within trajectories only
    m = flat.mean()
    num = sum(((r[:-1] - m) * (r[1:] - m)).sum() for r in x)
    assert s["lag1"] == pytest.approx(num / ((flat - m) ** 2).sum(), rel=1e-9)


def test_write_json_rejects_nan(tmp_path):
    write_json(tmp_path / "ok.json", {"b": 1, "a": [0.5]})
    assert (tmp_path / "ok.json").read_text().startswith('{\n  "a"')
    with pytest.raises(ValueError):
        write_json(tmp_path / "nan.json", {"x": float("nan")})
