import math

import numpy as np
import pytest
from scipy import integrate

from faultfilter.wavepacket import Wavepacket

SHAPES = {
    "exponential": Wavepacket.exponential(1.0),
    "exponential_fast": Wavepacket.exponential(2.5),
    "gaussian": Wavepacket.gaussian(3.0, 1.0),
    "gaussian_cut": Wavepacket.gaussian(0.5, 1.0),
    "square": Wavepacket.square(0.0, 1.0),
    "square_late": Wavepacket.square(1.0, 3.0),
}


def test_exponential_peak():
    assert Wavepacket.exponential(1.0).xi(0.0) == pytest.approx(1.0)
    assert Wavepacket.exponential(4.0).xi(0.0) == pytest.approx(2.0)


def test_exponential_omega_at_one():
    assert Wavepacket.exponential(1.0).omega(1.0) == pytest.approx(0.3678794, abs=1e-7)


def test_square_values():
    w = Wavepacket.square(0.0, 1.0)
    assert w.xi(0.5) == pytest.approx(1.0)
    assert w.omega(0.25) == pytest.approx(0.75)
    assert w.coupling(0.75) == pytest.approx(2.0)


def test_gaussian_symmetric_about_center():
    w = Wavepacket.gaussian(4.0, 0.7)
    for d in (0.1, 0.5, 1.3):
        assert abs(w.xi(4.0 - d)) == pytest.approx(abs(w.xi(4.0 + d)), rel=1e-12)


@pytest.mark.parametrize("name", SHAPES)
def test_omega_starts_at_one(name):
    assert SHAPES[name].omega(0.0) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("name", SHAPES)
def test_omega_matches_quadrature(name):
    w = SHAPES[name]
    for t in (0.0, 0.3, 1.0, 2.2, 4.0):
        tail = integrate.quad(lambda s: abs(w.xi(s)) ** 2, t, 60, points=[1.0, 3.0], limit=200)[0]
        assert w.omega(t) == pytest.approx(tail, abs=1e-8)


@pytest.mark.parametrize("name", SHAPES)
def test_omega_nonincreasing(name):
    ts = np.linspace(0, 10, 2001)
    om = SHAPES[name].omega(ts)
    assert np.all(np.diff(om) <= 1e-15)


@pytest.mark.parametrize("name", ["exponential", "exponential_fast", "gaussian", "gaussian_cut"])
def test_omega_derivative(name):
    w = SHAPES[name]
    h = 1e-5
    for t in (0.2, 1.0, 2.5):
        fd = (w.omega(t + h) - w.omega(t - h)) / (2 * h)
        assert fd == pytest.approx(-abs(w.xi(t)) ** 2, rel=1e-5)


@pytest.mark.parametrize("name", SHAPES)
def test_coupling_identity(name):
    w = SHAPES[name]
    for t in np.linspace(0, 2.9, 30):
        if w.is_clamped(t):
            continue
        lam2 = abs(w.coupling(t)) ** 2
        assert lam2 == pytest.approx(abs(w.xi(t)) ** 2 / w.omega(t), rel=1e-9)


def test_exponential_coupling_constant():
    w = Wavepacket.exponential(1.7)
    assert np.allclose(w.coupling(np.linspace(0, 8, 17)), math.sqrt(1.7), rtol=1e-12)


def test_clamp_zeroes_coupling_and_source():
    w = Wavepacket.exponential(1.0)
    t = 20.0  # omega = 2e-9 < 1e-8
    assert w.is_clamped(t)
    assert w.coupling(t) == 0
    assert w.source(t) == 0
    sq = Wavepacket.square(0.0, 1.0)
    assert sq.coupling(1.5) == 0


@pytest.mark.parametrize("name", ["exponential", "gaussian", "square_late"])
def test_survival_identity(name):
    w = SHAPES[name]
    for t in (0.5, 1.5, 2.5):
        if w.is_clamped(t):
            continue
        pts = [p for p in (1.0, 3.0) if p < t]
        rate = integrate.quad(lambda s: abs(w.coupling(s)) ** 2, 0, t, points=pts or None,
                              limit=400, epsabs=1e-12)[0]
        assert math.exp(-rate) == pytest.approx(w.omega(t), rel=1e-6)


def test_phase_multiplies_envelope():
    ph = np.exp(0.4j)
    w = Wavepacket.exponential(1.0, phase=ph)
    assert w.xi(0.3) == pytest.approx(ph * Wavepacket.exponential(1.0).xi(0.3))
    assert w.omega(0.3) == pytest.approx(Wavepacket.exponential(1.0).omega(0.3))
    with pytest.raises(ValueError):
        Wavepacket.exponential(1.0, phase=2.0)


def test_tabulated_renormalized():
    w = Wavepacket.tabulated([1.0, 2.0, 2.0, 1.0], 0.5)
    assert w.total_energy() == pytest.approx(1.0)
    assert w.omega(0.0) == pytest.approx(1.0)
    assert w.omega(1.0) == pytest.approx(0.5)
    assert w.omega(2.0) == pytest.approx(0.0)
    assert w.omega(0.25) == pytest.approx(0.95)
    # xi is piecewise constant
    assert w.xi(0.1) == w.xi(0.4)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        Wavepacket.exponential(1.0).xi(-0.1)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        Wavepacket.exponential(0.0)
    with pytest.raises(ValueError):
        Wavepacket.square(2.0, 1.0)
    with pytest.raises(ValueError):
        Wavepacket.gaussian(1.0, -1.0)
    with pytest.raises(ValueError):
        Wavepacket("triangle")


@pytest.mark.parametrize("w", [
    Wavepacket.exponential(1.3),
    Wavepacket.gaussian(2.0, 0.5, omega_floor=1e-6),
    Wavepacket.square(0.5, 2.0, phase=1j),
    Wavepacket.tabulated([0.5, 1.0, 0.25j], 0.2),
])
def test_dict_round_trip(w):
    again = Wavepacket.from_dict(w.to_dict())
    assert again.to_dict() == w.to_dict()
    assert again.omega(0.3) == w.omega(0.3)


def test_from_dict_errors():
    with pytest.raises(ValueError):
        Wavepacket.from_dict({"shape": "exponential"})
    with pytest.raises(ValueError):
        Wavepacket.from_dict({"shape": "sawtooth"})
