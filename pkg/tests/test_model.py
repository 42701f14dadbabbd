import math

import pytest
from hypothesis import given, strategies as st

from starqkd.model import (
    IntensitySettings,
    LinkParams,
    ZeroGainError,
    background_yield,
    channel_transmittance,
    expected_gain,
    expected_qber,
    fiber_transmittance,
    deployed_links,
    preset,
)

# frozen with mpmath at 30 digits
ETA_25KM = 0.0320694313425334814
ETA_15KM = 0.0508266234208803821


def test_published_defaults():
    link = LinkParams.published_default()
    assert link.attenuation_db_per_km == 0.2
    assert link.extra_loss_db == 1.7
    assert link.detector_efficiency == 0.15
    assert link.pulse_rate_hz == 4e6
    assert link.gate_ns == 2.5


def test_presets_lengths():
    assert [(l.name, l.length_km) for l in deployed_links()] == [
        ("benjamin", 15.0), ("copernico", 21.0), ("keplero", 25.0)]
    with pytest.raises(KeyError):
        preset("galileo")


@pytest.mark.parametrize("kwargs", [
    dict(detector_efficiency=1.2), dict(detector_efficiency=-0.1),
    dict(misalignment_error=0.6), dict(dark_count_prob=1.0),
    dict(length_km=-1), dict(pulse_rate_hz=0), dict(gate_ns=0),
])
def test_link_validation(kwargs):
    with pytest.raises(ValueError):
        LinkParams(**kwargs)


def test_intensity_validation():
    with pytest.raises(ValueError):
        IntensitySettings(mu=0.1, nu=0.1)
    with pytest.raises(ValueError):
        IntensitySettings(mu=0.5, nu=0.1, proportions=(0, 0, 0))
    s = IntensitySettings()
    assert s.probabilities == pytest.approx((14 / 16, 1 / 16, 1 / 16))


def test_lossless_identity():
    link = LinkParams(length_km=0, extra_loss_db=0, detector_efficiency=1.0)
    assert channel_transmittance(link) == 1.0


@pytest.mark.parametrize("name,expected", [("keplero", ETA_25KM), ("benjamin", ETA_15KM)])
def test_transmittance_deployed_links(name, expected):
    assert channel_transmittance(preset(name)) == pytest.approx(expected, rel=1e-12)


def test_loss_factorization():
    link = preset("copernico")
    assert fiber_transmittance(link) * link.detector_efficiency == pytest.approx(channel_transmittance(link))


def test_expected_gain_examples():
    assert expected_gain(0.3, 0.0, 0.0) == 0.0
    assert expected_gain(0.0321, 0.48, 1e-5) == pytest.approx(0.0152999040866083, rel=1e-12)
    assert expected_gain(0.1, 0.1, 0.0) == pytest.approx(0.00995016625083195, rel=1e-12)


def test_expected_qber_examples():
    assert expected_qber(0.05, 0.5, 0.0, 0.0) == 0.0
    assert expected_qber(0.05, 0.5, 0.0, 0.03) == pytest.approx(0.03)
    assert expected_qber(0.0321, 0.48, 1e-5, 0.031, 0.5) == pytest.approx(0.0313065378693521, rel=1e-12)
    with pytest.raises(ZeroGainError):
        expected_qber(0.0, 0.5, 0.0, 0.03)


def test_gain_clamped_and_limits():
    assert expected_gain(1.0, 1e3, 0.2) == 1.0
    assert expected_gain(0.05, 1e-12, 1e-4) == pytest.approx(1e-4, abs=1e-12)


def test_background_yield_two_detectors():
    assert background_yield(0.0) == 0.0
    assert background_yield(1e-5) == pytest.approx(2e-5, rel=1e-4)


probs = st.floats(0.0, 1.0)


@given(st.floats(0, 200), st.floats(0.01, 50), st.floats(0, 20))
def test_transmittance_strictly_decreasing(length, dl, dloss):
    a = LinkParams(length_km=length, extra_loss_db=dloss)
    b = a.with_(length_km=length + dl)
    c = a.with_(extra_loss_db=dloss + dl)
    assert channel_transmittance(b) < channel_transmittance(a)
    assert channel_transmittance(c) < channel_transmittance(a)
    assert 0 <= channel_transmittance(a) <= 1


@given(st.floats(1e-3, 1.0), st.floats(1e-3, 2.0), st.floats(0, 1e-3))
def test_gain_monotone(eta, mu, y0):
    assert expected_gain(eta, mu * 1.1, y0) > expected_gain(eta, mu, y0)
    assert expected_gain(min(1.0, eta * 1.1), mu, y0) >= expected_gain(eta, mu, y0)


@given(st.floats(1e-4, 1.0), st.floats(1e-3, 5.0), st.floats(0, 0.1), st.floats(0, 0.5))
def test_qber_bounded(eta, mu, y0, e_det):
    e = expected_qber(eta, mu, y0, e_det, 0.5)
    assert 0 <= e <= 0.5 + 1e-12
