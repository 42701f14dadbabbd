"""One exchange end to end: simulate, sift, estimate, correct, amplify."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import VACUUM_ERROR_RATE, IntensitySettings, LinkParams, expected_gain
from .protocol import (
    CorrectedKey,
    GainQberStats,
    ReconciliationAbort,
    error_correct,
    privacy_amplify,
    sift,
)
from .quantum_sim import NO_EVE, EveModel, IntensityClass, Transcript, run_exchange
from .security import (
    DEFAULT_EC_EFFICIENCY,
    DEFAULT_Q,
    SecurityEstimate,
    Variant,
    estimate,
)

PNS_FLAG_Z = 5.0


@dataclass
class BoundCheck:
    q1_true: float
    q1_sigma: float
    e1_true: float
    e1_sigma: float
    q1_lower: float
    e1_upper: float

    @property
    def q1_margin(self) -> float:
        """Positive when the lower bound sits below truth."""
        return self.q1_true - self.q1_lower

    @property
    def e1_margin(self) -> float:
        return self.e1_upper - self.e1_true

    def passed(self, k: float = 3.0) -> bool:
        return (self.q1_lower <= self.q1_true + k * self.q1_sigma
                and self.e1_upper >= self.e1_true - k * self.e1_sigma)


@dataclass
class SessionResult:
    transcript: Transcript
    stats: GainQberStats
    estimate: SecurityEstimate
    estimate_alt: SecurityEstimate
    bounds: BoundCheck
    decoy_residual: float
    decoy_residual_z: float
    corrected: Optional[CorrectedKey]
    final_key: np.ndarray
    n_sifted_signal: int
    warnings: list[str] = field(default_factory=list)

    @property
    def pns_suspected(self) -> bool:
        return self.decoy_residual_z > PNS_FLAG_Z


def _binom_var(p: float, n: int) -> float:
    if n <= 0 or not math.isfinite(p):
        return 0.0
    p = min(max(p, 1.0 / n), 1.0)
    return p * (1 - p) / n


def bound_sigmas(stats: GainQberStats, settings: IntensitySettings, est: SecurityEstimate,
                 epsilon0: float = VACUUM_ERROR_RATE) -> tuple[float, float]:
    """Delta-method standard errors of the Q1 lower and (standard) e1 upper bounds."""
    mu, nu = settings.mu, settings.nu
    s, d, v = stats.signal, stats.decoy, stats.vacuum
    var_qmu = _binom_var(s.gain, s.sent)
    var_qnu = _binom_var(d.gain, d.sent)
    var_y0 = _binom_var(v.gain, v.sent)
    a = mu * mu * math.exp(-mu) / (mu * nu - nu * nu)
    var_q1 = a * a * (math.exp(2 * nu) * var_qnu
                      + (math.exp(mu) * nu * nu / (mu * mu)) ** 2 * var_qmu
                      + ((mu * mu - nu * nu) / (mu * mu)) ** 2 * var_y0)
    sig_q1 = math.sqrt(var_q1)
    if est.q1_lower <= 0:
        return sig_q1, math.inf
    # E_nu * Q_nu is an error count per decoy pulse seen through the sifting fraction
    frac = d.sifted / d.clicks if d.clicks else 0.5
    eq = d.errors / d.sent / frac if d.sent and frac else 0.0
    var_eq = _binom_var(eq * frac, d.sent) / (frac * frac) if frac else 0.0
    denom = est.q1_lower * math.exp(mu) / mu * nu
    num = (eq * math.exp(nu) - epsilon0 * v.gain)
    var_num = math.exp(2 * nu) * var_eq + epsilon0 ** 2 * var_y0
    var_denom = (math.exp(mu) / mu * nu) ** 2 * var_q1
    var_e1 = var_num / denom ** 2 + num ** 2 * var_denom / denom ** 4
    return sig_q1, math.sqrt(var_e1)


def decoy_consistency(stats: GainQberStats, settings: IntensitySettings) -> tuple[float, float]:
    """Residual between the decoy gain and the gain predicted from the signal class.

    The effective transmittance is inferred from the signal gain; an honest
    Poissonian channel predicts the decoy gain from it.  Returns the absolute
    residual and its size in decoy-gain standard errors.
    """
    y0 = stats.y0
    q_mu = stats.signal.gain
    arg = 1.0 - (q_mu - y0)
    if not (0.0 < arg <= 1.0):
        return math.nan, math.nan
    eta_eff = -math.log(arg) / settings.mu
    predicted = expected_gain(eta_eff, settings.nu, y0)
    resid = abs(stats.decoy.gain - predicted)
    sigma = math.sqrt(_binom_var(stats.decoy.gain, stats.decoy.sent)
                      + _binom_var(y0, stats.vacuum.sent))
    return resid, resid / sigma if sigma > 0 else math.inf


def run_session(link: LinkParams, settings: IntensitySettings, n_pulses: int, seed: int,
                eve: EveModel = NO_EVE, variant: Variant = Variant.STANDARD,
                q: float = DEFAULT_Q, f: float = DEFAULT_EC_EFFICIENCY,
                epsilon0: float = VACUUM_ERROR_RATE) -> SessionResult:
    variant = Variant(variant)
    tr = run_exchange(n_pulses, link, settings, eve, seed)
    pair, stats = sift(tr)
    warnings: list[str] = []

    s, d = stats.signal, stats.decoy
    q_mu = s.gain if s.sent else 0.0
    q_nu = d.gain if d.sent else 0.0
    e_mu = s.qber if s.sifted else 0.5
    e_nu = d.qber if d.sifted else 0.5
    y0 = stats.y0 if stats.vacuum.sent else 0.0
    est = estimate(q_mu, e_mu, q_nu, e_nu, y0, settings, link, variant, q, f, epsilon0)
    other = Variant.AS_PRINTED if variant is Variant.STANDARD else Variant.STANDARD
    est_alt = estimate(q_mu, e_mu, q_nu, e_nu, y0, settings, link, other, q, f, epsilon0)

    q1_true, q1_sig = tr.true_single_photon_gain()
    e1_true, e1_sig = tr.true_single_photon_error()
    sq1, se1 = bound_sigmas(stats, settings, est, epsilon0)
    bounds = BoundCheck(q1_true, math.hypot(q1_sig, sq1), e1_true, math.hypot(e1_sig, se1),
                        est.q1_lower, est.e1_upper)
    resid, z = decoy_consistency(stats, settings)

    signal_pair = pair.restrict(IntensityClass.SIGNAL)
    corrected = None
    final = np.zeros(0, dtype=np.uint8)
    if len(signal_pair) == 0:
        warnings.append("no sifted signal bits")
    else:
        try:
            corrected = error_correct(signal_pair, f, qber=e_mu)
        except ReconciliationAbort as exc:
            warnings.append(str(exc))
        else:
            final = privacy_amplify(corrected, est, seed=seed + 1, q=q)
    if est.rate_per_pulse <= 0:
        warnings.append("estimated secure rate is not positive; no key distilled")
    if z > PNS_FLAG_Z:
        warnings.append(f"decoy gain inconsistent with signal gain ({z:.1f} sigma): possible PNS attack")
    return SessionResult(tr, stats, est, est_alt, bounds, resid, z, corrected, final,
                         len(signal_pair), warnings)


def session_report(result: SessionResult) -> dict:
    est, alt, b = result.estimate, result.estimate_alt, result.bounds
    std = est if est.variant is Variant.STANDARD else alt
    ap = alt if est.variant is Variant.STANDARD else est
    tr = result.transcript
    return dict(
        link=tr.link.name, length_km=tr.link.length_km, seed=tr.seed, n_pulses=len(tr),
        mu=tr.settings.mu, nu=tr.settings.nu, eve=tr.eve.kind,
        eve_block_single_prob=tr.eve.block_single_prob,
        stats=result.stats.as_dict(), Y0=result.stats.y0,
        Q1L=est.q1_lower, Q1L_raw=est.q1_lower_raw,
        e1U_standard=std.e1_upper, e1U_as_printed=ap.e1_upper,
        variant=est.variant.value, R_per_pulse=est.rate_per_pulse, R_bps=est.rate_bps,
        n_sifted_signal=result.n_sifted_signal,
        leaked_bits=result.corrected.leaked_bits if result.corrected else 0,
        final_key_bits=int(len(result.final_key)),
        Q1_true=b.q1_true, e1_true=b.e1_true, Q1_margin=b.q1_margin, e1_margin=b.e1_margin,
        Q1_sigma=b.q1_sigma, e1_sigma=b.e1_sigma,
        bound_validity="PASS" if b.passed() else "FAIL",
        decoy_residual=result.decoy_residual, decoy_residual_z=result.decoy_residual_z,
        pns_suspected=result.pns_suspected, warnings=list(result.warnings),
    )
