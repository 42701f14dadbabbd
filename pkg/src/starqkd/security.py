"""Decoy-state bounds, secure key rate, intensity optimisation and calibration.

The key rate is

    R = q * ( Q1L * (1 - H2(e1U)) - Q_mu * f(E_mu) * H2(E_mu) )

per signal pulse, with the single-photon gain lower bound ``Q1L`` from the
weak+vacuum decoy estimate and ``e1U`` from one of two upper-bound forms:

* ``Variant.STANDARD``:   (E_nu Q_nu e^nu - e0 Y0) / (Y1L nu),  Y1L = Q1L e^mu / mu
* ``Variant.AS_PRINTED``: (E_nu Q_nu - e0 Y0 e^-nu) / Q1L

The as-printed form divides decoy-class statistics by the signal-class
bound and is generally *not* an upper bound on e1; it is computed for
comparison only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import optimize

from .model import (
    PUBLISHED_TARGETS,
    VACUUM_ERROR_RATE,
    IntensitySettings,
    LinkParams,
    background_yield,
    channel_transmittance,
    expected_gain,
    expected_qber,
    preset,
)

DEFAULT_EC_EFFICIENCY = 1.22
DEFAULT_Q = 0.5
OPERATING_NU = 0.1

DEFAULT_MU_GRID = np.round(np.arange(0.05, 1.0 + 1e-9, 0.01), 2)
DEFAULT_NU_GRID = np.round(np.arange(0.01, 0.3 + 1e-9, 0.01), 2)


class Variant(str, enum.Enum):
    STANDARD = "standard"
    AS_PRINTED = "as-printed"


class DegenerateDecoyError(ValueError):
    pass


class ZeroBoundError(ValueError):
    pass


class NoFeasiblePointError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


def binary_entropy(x):
    """H2(x) in bits; accepts scalars or arrays, H2(0) = H2(1) = 0."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError(f"binary_entropy domain is [0,1], got {x!r}")
    inner = (arr > 0) & (arr < 1)
    safe = np.where(inner, arr, 0.5)
    h = np.where(inner, -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe), 0.0)
    return float(h) if h.ndim == 0 else h


def q1_lower_bound_raw(Q_mu: float, Q_nu: float, mu: float, nu: float, Y0: float) -> float:
    if nu <= 0 or nu >= mu:
        raise DegenerateDecoyError(f"need 0 < nu < mu, got mu={mu}, nu={nu}")
    pref = mu * mu * math.exp(-mu) / (mu * nu - nu * nu)
    bracket = (Q_nu * math.exp(nu) - Q_mu * math.exp(mu) * nu * nu / (mu * mu)
               - (mu * mu - nu * nu) / (mu * mu) * Y0)
    return pref * bracket


def q1_lower_bound(Q_mu: float, Q_nu: float, mu: float, nu: float, Y0: float) -> float:
    """Lower bound on the single-photon gain of the signal class, clamped to [0, 1]."""
    return min(1.0, max(0.0, q1_lower_bound_raw(Q_mu, Q_nu, mu, nu, Y0)))


def e1_upper_bound_raw(E_nu: float, Q_nu: float, Y0: float, nu: float, q1_lower: float,
                       epsilon0: float = VACUUM_ERROR_RATE, mu: Optional[float] = None,
                       variant: Variant = Variant.STANDARD) -> float:
    if q1_lower <= 0:
        raise ZeroBoundError("single-photon gain bound is zero; e1 bound undefined")
    if Variant(variant) is Variant.AS_PRINTED:
        return (E_nu * Q_nu - epsilon0 * Y0 * math.exp(-nu)) / q1_lower
    if mu is None:
        raise ValueError("standard variant needs mu to rebase the bound")
    y1_lower = q1_lower * math.exp(mu) / mu
    return (E_nu * Q_nu * math.exp(nu) - epsilon0 * Y0) / (y1_lower * nu)


def e1_upper_bound(E_nu, Q_nu, Y0, nu, q1_lower, epsilon0=VACUUM_ERROR_RATE, mu=None,
                   variant: Variant = Variant.STANDARD) -> float:
    return min(1.0, max(0.0, e1_upper_bound_raw(E_nu, Q_nu, Y0, nu, q1_lower, epsilon0,
                                                mu, variant)))


def key_rate(Q_mu: float, E_mu: float, q1_lower: float, e1_upper: float,
             q: float = DEFAULT_Q, f: float = DEFAULT_EC_EFFICIENCY,
             as_printed_sign: bool = False) -> float:
    """Secure bits per signal pulse; negative values mean no key.

    ``as_printed_sign`` adds the error-correction term instead of subtracting
    it, which makes the rate grow with QBER; kept for documentation only.
    """
    ec = Q_mu * f * binary_entropy(min(max(E_mu, 0.0), 1.0))
    pa = q1_lower * (1.0 - binary_entropy(min(max(e1_upper, 0.0), 0.5)))
    return q * (pa + ec if as_printed_sign else pa - ec)


def rate_bps(rate_per_pulse: float, link: LinkParams, settings: IntensitySettings) -> float:
    return rate_per_pulse * link.pulse_rate_hz * settings.signal_share


@dataclass(frozen=True)
class SecurityEstimate:
    q1_lower: float
    e1_upper: float
    rate_per_pulse: float
    rate_bps: float
    variant: Variant
    q1_lower_raw: float
    e1_upper_raw: float
    e1_upper_standard: float
    e1_upper_as_printed: float
    inputs: Mapping[str, float] = field(default_factory=dict)

    @property
    def informative(self) -> bool:
        return self.q1_lower > 0 and self.e1_upper < 0.5


def estimate(Q_mu: float, E_mu: float, Q_nu: float, E_nu: float, Y0: float,
             settings: IntensitySettings, link: Optional[LinkParams] = None,
             variant: Variant = Variant.STANDARD, q: float = DEFAULT_Q,
             f: float = DEFAULT_EC_EFFICIENCY,
             epsilon0: float = VACUUM_ERROR_RATE) -> SecurityEstimate:
    """Run the full bound + rate pipeline on measured (or modelled) statistics."""
    mu, nu = settings.mu, settings.nu
    variant = Variant(variant)
    q1_raw = q1_lower_bound_raw(Q_mu, Q_nu, mu, nu, Y0)
    q1l = min(1.0, max(0.0, q1_raw))
    if q1l > 0:
        std_raw = e1_upper_bound_raw(E_nu, Q_nu, Y0, nu, q1l, epsilon0, mu, Variant.STANDARD)
        ap_raw = e1_upper_bound_raw(E_nu, Q_nu, Y0, nu, q1l, epsilon0, mu, Variant.AS_PRINTED)
    else:
        std_raw = ap_raw = math.inf
    raw = std_raw if variant is Variant.STANDARD else ap_raw
    e1u = min(1.0, max(0.0, raw))
    r = key_rate(Q_mu, E_mu, q1l, e1u, q, f)
    bps = rate_bps(r, link, settings) if link is not None else float("nan")
    return SecurityEstimate(
        q1_lower=q1l, e1_upper=e1u, rate_per_pulse=r, rate_bps=bps, variant=variant,
        q1_lower_raw=q1_raw, e1_upper_raw=raw,
        e1_upper_standard=min(1.0, max(0.0, std_raw)),
        e1_upper_as_printed=min(1.0, max(0.0, ap_raw)),
        inputs=dict(Q_mu=Q_mu, E_mu=E_mu, Q_nu=Q_nu, E_nu=E_nu, Y0=Y0, mu=mu, nu=nu),
    )


def model_statistics(link: LinkParams, settings: IntensitySettings,
                     epsilon0: float = VACUUM_ERROR_RATE) -> dict[str, float]:
    """Infinite-statistics Q/E values for signal and decoy classes."""
    eta = channel_transmittance(link)
    y0 = background_yield(link.dark_count_prob)
    e_det = link.misalignment_error
    return dict(
        eta=eta, Y0=y0,
        Q_mu=expected_gain(eta, settings.mu, y0),
        E_mu=expected_qber(eta, settings.mu, y0, e_det, epsilon0),
        Q_nu=expected_gain(eta, settings.nu, y0),
        E_nu=expected_qber(eta, settings.nu, y0, e_det, epsilon0),
    )


def analytic_estimate(link: LinkParams, settings: IntensitySettings,
                      variant: Variant = Variant.STANDARD, q: float = DEFAULT_Q,
                      f: float = DEFAULT_EC_EFFICIENCY,
                      epsilon0: float = VACUUM_ERROR_RATE) -> SecurityEstimate:
    s = model_statistics(link, settings, epsilon0)
    return estimate(s["Q_mu"], s["E_mu"], s["Q_nu"], s["E_nu"], s["Y0"], settings, link,
                    variant, q, f, epsilon0)


def _rate_grid(link: LinkParams, mu: np.ndarray, nu: np.ndarray, variant: Variant,
               q: float, f: float, epsilon0: float) -> np.ndarray:
    """Vectorised model rate over broadcast (mu, nu) arrays; NaN where mu <= nu."""
    eta = channel_transmittance(link)
    y0 = background_yield(link.dark_count_prob)
    e_det = link.misalignment_error
    with np.errstate(divide="ignore", invalid="ignore"):
        q_mu = np.minimum(1.0, y0 + 1 - np.exp(-eta * mu))
        q_nu = np.minimum(1.0, y0 + 1 - np.exp(-eta * nu))
        eq_mu = epsilon0 * y0 + e_det * (1 - np.exp(-eta * mu))
        eq_nu = epsilon0 * y0 + e_det * (1 - np.exp(-eta * nu))
        e_mu = eq_mu / q_mu
        q1 = (mu**2 * np.exp(-mu) / (mu * nu - nu**2)
              * (q_nu * np.exp(nu) - q_mu * np.exp(mu) * nu**2 / mu**2 - (mu**2 - nu**2) / mu**2 * y0))
        q1 = np.clip(q1, 0.0, 1.0)
        if Variant(variant) is Variant.STANDARD:
            e1 = (eq_nu * np.exp(nu) - epsilon0 * y0) / (q1 * np.exp(mu) / mu * nu)
        else:
            e1 = (eq_nu - epsilon0 * y0 * np.exp(-nu)) / q1
        e1 = np.where(q1 > 0, np.clip(e1, 0.0, 0.5), 0.5)
        r = q * (q1 * (1 - binary_entropy(e1)) - q_mu * f * binary_entropy(np.clip(e_mu, 0, 1)))
    return np.where((mu > nu) & (nu > 0), r, np.nan)


@dataclass(frozen=True)
class Optimum:
    mu: float
    nu: float
    rate: float


def optimize_intensities(link: LinkParams, nu_grid: Optional[Sequence[float]] = None,
                         mu_grid: Optional[Sequence[float]] = None,
                         variant: Variant = Variant.STANDARD, q: float = DEFAULT_Q,
                         f: float = DEFAULT_EC_EFFICIENCY,
                         epsilon0: float = VACUUM_ERROR_RATE) -> Optimum:
    """Exhaustive grid search of the model rate; ties go to the smaller mu."""
    mus = np.sort(np.asarray(DEFAULT_MU_GRID if mu_grid is None else mu_grid, dtype=float))
    nus = np.sort(np.asarray(DEFAULT_NU_GRID if nu_grid is None else nu_grid, dtype=float))
    if mus.size == 0 or nus.size == 0:
        raise NoFeasiblePointError("empty intensity grid")
    M, N = np.meshgrid(mus, nus, indexing="ij")
    r = _rate_grid(link, M, N, variant, q, f, epsilon0)
    if np.all(np.isnan(r)):
        raise NoFeasiblePointError("no grid point with mu > nu > 0")
    k = int(np.nanargmax(r))
    i, j = np.unravel_index(k, r.shape)
    return Optimum(float(mus[i]), float(nus[j]), float(r[i, j]))


def operating_settings(link: LinkParams, nu: float = OPERATING_NU,
                       proportions=(14.0, 1.0, 1.0), **kwargs) -> IntensitySettings:
    """Signal intensity optimised for ``link`` at a fixed practical decoy ``nu``.

    The unconstrained optimum drives nu to the grid floor, where finite-size
    decoy statistics are too sparse for a useful Monte Carlo estimate.
    """
    opt = optimize_intensities(link, nu_grid=[nu], **kwargs)
    return IntensitySettings(opt.mu, nu, proportions)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    dark_count_prob: float
    misalignment_error: float
    residuals: dict[str, dict[str, float]]
    method: str
    converged: bool
    underdetermined: bool
    objective: float

    @property
    def max_qber_residual(self) -> float:
        return max(abs(r["qber_residual"]) for r in self.residuals.values())


def _link_prediction(link: LinkParams, nu: float):
    st = operating_settings(link, nu)
    s = model_statistics(link, st)
    est = estimate(s["Q_mu"], s["E_mu"], s["Q_nu"], s["E_nu"], s["Y0"], st, link)
    return s["E_mu"], est.rate_bps, st


def calibrate_to_paper(targets: Optional[Mapping[str, tuple[float, float]]] = None,
                       links: Optional[Mapping[str, LinkParams]] = None,
                       method: str = "minimax", nu: float = OPERATING_NU,
                       qber_scale: float = 0.003, rate_factor: float = 2.0,
                       start: tuple[float, float] = (1e-4, 0.025)) -> CalibrationResult:
    """Fit the shared (dark_count_prob, misalignment_error) to per-link targets.

    ``targets`` maps link name to ``(qber, rate_bps)``.  Residuals are
    normalised: QBER in units of ``qber_scale`` (absolute), rate as
    ``log(model/target) / log(rate_factor)``.  ``method="least_squares"``
    minimises their sum of squares, ``method="minimax"`` the largest one.
    """
    targets = dict(PUBLISHED_TARGETS if targets is None else targets)
    if links is None:
        links = {name: preset(name) for name in targets}
    if method not in ("minimax", "least_squares"):
        raise ValueError(f"unknown calibration method {method!r}")

    def residual_vector(p):
        d = 10.0 ** p[0]
        e_det = float(p[1])
        if not (0.0 <= e_det <= 0.5) or not (0.0 < d < 0.5):
            return np.full(2 * len(targets), 1e3)
        out = []
        for name, (qber_t, rate_t) in targets.items():
            link = links[name].with_(dark_count_prob=d, misalignment_error=e_det)
            qber_m, rate_m, _ = _link_prediction(link, nu)
            out.append((qber_m - qber_t) / qber_scale)
            out.append(math.log(rate_m / rate_t) / math.log(rate_factor) if rate_m > 0 else 1e3)
        return np.asarray(out)

    x0 = np.array([math.log10(start[0]), start[1]])
    ls = optimize.least_squares(residual_vector, x0, diff_step=1e-3,
                                bounds=([-9.0, 0.0], [-0.5, 0.5]))
    x, converged = ls.x, bool(ls.success)
    if method == "minimax":
        # The operating-point mu is chosen on a grid, so the max-residual
        # surface is piecewise; seed the simplex from a coarse scan.
        def worst(p):
            return float(np.max(np.abs(residual_vector(p))))

        scan = [(worst((ld, ed)), (ld, ed))
                for ld in np.linspace(-7.0, -2.0, 26) for ed in np.linspace(0.0, 0.1, 26)]
        seeds = [ls.x] + [np.array(p) for _, p in sorted(scan)[:3]]
        best = None
        for x_start in seeds:
            res = optimize.minimize(worst, x_start, method="Nelder-Mead",
                                    options=dict(xatol=1e-7, fatol=1e-10, maxiter=4000,
                                                 initial_simplex=[x_start, x_start + [0.05, 0],
                                                                  x_start + [0, 0.002]]))
            if best is None or res.fun < best.fun:
                best = res
        x, converged = best.x, bool(best.success)
    r = residual_vector(x)
    objective = float(np.max(np.abs(r))) if method == "minimax" else float(np.sum(r**2))
    d, e_det = 10.0 ** float(x[0]), float(x[1])
    report = {}
    for name, (qber_t, rate_t) in targets.items():
        link = links[name].with_(dark_count_prob=d, misalignment_error=e_det)
        qber_m, rate_m, st = _link_prediction(link, nu)
        report[name] = dict(qber_target=qber_t, qber_model=qber_m, qber_residual=qber_m - qber_t,
                            rate_target=rate_t, rate_model=rate_m,
                            rate_ratio=rate_m / rate_t, mu=st.mu, nu=st.nu)
    return CalibrationResult(d, e_det, report, method, converged, len(targets) < 2, objective)


# ---------------------------------------------------------------------------
# scaling with transmittance


def scaling_exponent(etas: Iterable[float], rates: Iterable[float]) -> float:
    """Slope of log R against log eta over points with positive rate."""
    e = np.asarray(list(etas), dtype=float)
    r = np.asarray(list(rates), dtype=float)
    ok = (r > 0) & (e > 0)
    if ok.sum() < 4:
        raise InsufficientPointsError(f"need >= 4 points with R > 0, got {int(ok.sum())}")
    return float(np.polyfit(np.log(e[ok]), np.log(r[ok]), 1)[0])


def non_decoy_rate(link: LinkParams, mu, q: float = DEFAULT_Q,
                   f: float = DEFAULT_EC_EFFICIENCY, epsilon0: float = VACUUM_ERROR_RATE):
    """Worst-case rate without decoys: every multi-photon emission is compromised.

    Vectorised over ``mu``; returns NaN where multi-photon emissions could
    account for the entire gain.
    """
    mu = np.asarray(mu, dtype=float)
    eta = channel_transmittance(link)
    y0 = background_yield(link.dark_count_prob)
    q_mu = np.minimum(1.0, y0 + 1 - np.exp(-eta * mu))
    e_mu = (epsilon0 * y0 + link.misalignment_error * (1 - np.exp(-eta * mu))) / q_mu
    p_multi = 1 - np.exp(-mu) * (1 + mu)
    safe = q_mu - p_multi
    with np.errstate(divide="ignore", invalid="ignore"):
        e_single = np.where(safe > 0, e_mu * q_mu / safe, np.nan)
        ok = (safe > 0) & (e_single <= 0.5)
        e_single = np.where(ok, e_single, 0.5)
        r = q * (safe * (1 - binary_entropy(e_single)) - q_mu * f * binary_entropy(np.clip(e_mu, 0, 1)))
    r = np.where(ok, r, np.nan)
    return float(r) if r.ndim == 0 else r


def optimize_non_decoy(link: LinkParams, mu_grid: Optional[Sequence[float]] = None, **kw) -> Optimum:
    mus = np.geomspace(1e-4, 1.0, 2000) if mu_grid is None else np.asarray(mu_grid, dtype=float)
    r = non_decoy_rate(link, mus, **kw)
    if np.all(np.isnan(r)):
        return Optimum(float("nan"), 0.0, float("-inf"))
    k = int(np.nanargmax(r))
    return Optimum(float(mus[k]), 0.0, float(r[k]))


# ---------------------------------------------------------------------------
# sweep rows

SWEEP_COLUMNS = ("length_km", "eta", "mu", "nu", "Q_mu", "E_mu", "Q_nu", "E_nu", "Y0",
                 "Q1L", "e1U", "R_per_pulse", "R_bps", "variant")


def sweep_row(link: LinkParams, settings: IntensitySettings, est: SecurityEstimate) -> dict:
    i = est.inputs
    return dict(length_km=link.length_km, eta=channel_transmittance(link), mu=settings.mu,
                nu=settings.nu, Q_mu=i["Q_mu"], E_mu=i["E_mu"], Q_nu=i["Q_nu"], E_nu=i["E_nu"],
                Y0=i["Y0"], Q1L=est.q1_lower, e1U=est.e1_upper, R_per_pulse=est.rate_per_pulse,
                R_bps=est.rate_bps, variant=est.variant.value)
