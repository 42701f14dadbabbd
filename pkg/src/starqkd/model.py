"""Physical link parameters and closed-form gain/QBER formulas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

# Shared (dark_count_prob, misalignment_error) obtained from the minimax fit of
# the three link presets against their published QBER / rate pairs.  Regenerate
# with ``scripts/calibrate.py``.
CALIBRATED_DARK_COUNT_PROB = 2.79e-4
CALIBRATED_MISALIGNMENT = 0.01564

VACUUM_ERROR_RATE = 0.5


class ZeroGainError(ValueError):
    """QBER requested for a channel with zero gain."""


@dataclass(frozen=True)
class LinkParams:
    name: str = "link"
    length_km: float = 0.0
    attenuation_db_per_km: float = 0.2
    extra_loss_db: float = 1.7
    detector_efficiency: float = 0.15
    dark_count_prob: float = CALIBRATED_DARK_COUNT_PROB
    misalignment_error: float = CALIBRATED_MISALIGNMENT
    pulse_rate_hz: float = 4e6
    gate_ns: float = 2.5

    def __post_init__(self):
        if self.length_km < 0 or self.attenuation_db_per_km < 0 or self.extra_loss_db < 0:
            raise ValueError("lengths and losses must be nonnegative")
        if not 0.0 <= self.detector_efficiency <= 1.0:
            raise ValueError(f"detector_efficiency out of [0,1]: {self.detector_efficiency}")
        if not 0.0 <= self.dark_count_prob < 1.0:
            raise ValueError(f"dark_count_prob out of [0,1): {self.dark_count_prob}")
        if not 0.0 <= self.misalignment_error <= 0.5:
            raise ValueError(f"misalignment_error out of [0,0.5]: {self.misalignment_error}")
        if self.pulse_rate_hz <= 0 or self.gate_ns <= 0:
            raise ValueError("pulse_rate_hz and gate_ns must be positive")

    @classmethod
    def published_default(cls, name: str = "link", length_km: float = 0.0, **overrides) -> "LinkParams":
        return cls(name=name, length_km=length_km, **overrides)

    @property
    def total_loss_db(self) -> float:
        return self.attenuation_db_per_km * self.length_km + self.extra_loss_db

    @property
    def y0(self) -> float:
        return background_yield(self.dark_count_prob)

    def with_(self, **changes) -> "LinkParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class IntensitySettings:
    mu: float = 0.5
    nu: float = 0.1
    proportions: tuple[float, float, float] = (14.0, 1.0, 1.0)

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if not self.mu > self.nu:
            raise ValueError(f"need mu > nu, got mu={self.mu}, nu={self.nu}")
        p = tuple(float(x) for x in self.proportions)
        if len(p) != 3 or any(x < 0 for x in p) or sum(p) <= 0:
            raise ValueError(f"bad proportions {self.proportions}")
        object.__setattr__(self, "proportions", p)

    @property
    def probabilities(self) -> tuple[float, float, float]:
        s = sum(self.proportions)
        return tuple(x / s for x in self.proportions)

    @property
    def signal_share(self) -> float:
        return self.probabilities[0]

    def mean(self, intensity_class) -> float:
        return (self.mu, self.nu, 0.0)[int(intensity_class)]


PRESET_LENGTHS_KM = {"benjamin": 15.0, "copernico": 21.0, "keplero": 25.0}

# Published per-link QBER and secure key rate (bits/s).
PUBLISHED_TARGETS = {
    "benjamin": (0.027, 11_500.0),
    "copernico": (0.024, 8_000.0),
    "keplero": (0.032, 5_800.0),
}


def preset(name: str, **overrides) -> LinkParams:
    key = name.lower()
    if key not in PRESET_LENGTHS_KM:
        raise KeyError(f"unknown link preset {name!r}; choose from {sorted(PRESET_LENGTHS_KM)}")
    overrides.setdefault("length_km", PRESET_LENGTHS_KM[key])
    return LinkParams.published_default(name=key, **overrides)


def deployed_links(**overrides) -> list[LinkParams]:
    return [preset(n, **overrides) for n in PRESET_LENGTHS_KM]


def background_yield(dark_count_prob: float) -> float:
    """Probability that at least one of the two gated detectors dark-clicks."""
    return 1.0 - (1.0 - dark_count_prob) ** 2


def fiber_transmittance(link: LinkParams) -> float:
    """Per-photon survival through fiber and fixed losses (detector excluded)."""
    return 10.0 ** (-link.total_loss_db / 10.0)


def channel_transmittance(link: LinkParams) -> float:
    """Overall transmission efficiency eta, detector efficiency included."""
    return link.detector_efficiency * fiber_transmittance(link)


def expected_gain(eta: float, intensity: float, y0: float) -> float:
    return min(1.0, y0 + 1.0 - math.exp(-eta * intensity))


def expected_qber(eta: float, intensity: float, y0: float, e_det: float,
                  e0: float = VACUUM_ERROR_RATE) -> float:
    q = expected_gain(eta, intensity, y0)
    if q <= 0.0:
        raise ZeroGainError("QBER undefined at zero gain")
    return (e0 * y0 + e_det * (1.0 - math.exp(-eta * intensity))) / q


def true_single_photon_gain(eta: float, mu: float, y0: float) -> float:
    """Q1 under the additive yield model Y_n = Y0 + 1 - (1 - eta)^n."""
    return (y0 + eta) * mu * math.exp(-mu)


def true_single_photon_error(eta: float, y0: float, e_det: float,
                             e0: float = VACUUM_ERROR_RATE) -> float:
    y1 = y0 + eta
    if y1 <= 0:
        raise ZeroGainError("single-photon yield is zero")
    return (e0 * y0 + e_det * eta) / y1
