"""Pulse-level Monte Carlo of a decoy-state BB84 link.

Every pulse keeps its true photon number and the number of photons that
reached the receiver, so decoy-state estimates can be checked against the
actual single-photon yield and error rate.

Loss is factored in two stages: fiber plus fixed losses act on photons in
transit, detector efficiency acts at detection.  Their product is the
``eta`` of :func:`starqkd.model.channel_transmittance`.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .model import (
    IntensitySettings,
    LinkParams,
    background_yield,
    channel_transmittance,
    fiber_transmittance,
)


class IntensityClass(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1
    VACUUM = 2


class Basis(enum.IntEnum):
    B0 = 0
    B1 = 1


class ClickSource(enum.IntEnum):
    NONE = 0
    PHOTON = 1
    DARK_COUNT = 2
    DOUBLE_CLICK = 3


@dataclass(frozen=True)
class PulseRecord:
    index: int
    intensity_class: IntensityClass
    photon_number: int
    basis: Basis
    bit: int


@dataclass(frozen=True)
class DetectionOutcome:
    index: int
    clicked: bool
    measured_bit: Optional[int]
    receiver_basis: Basis
    click_source: ClickSource


@dataclass(frozen=True)
class EveModel:
    kind: str = "none"  # "none" | "pns"
    block_single_prob: float = 0.0
    forward_lossless: bool = True
    # extra knob: fraction of multi-photon pulses Eve also discards, needed when
    # forwarding every multi-photon pulse already exceeds the honest gain
    block_multi_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "pns"):
            raise ValueError(f"unknown eavesdropper kind {self.kind!r}")
        if not 0.0 <= self.block_single_prob <= 1.0:
            raise ValueError("block_single_prob must lie in [0,1]")
        if not 0.0 <= self.block_multi_prob <= 1.0:
            raise ValueError("block_multi_prob must lie in [0,1]")

    @property
    def active(self) -> bool:
        return self.kind == "pns"


NO_EVE = EveModel()


# ---------------------------------------------------------------------------
# single-pulse operations


def generate_pulse(settings: IntensitySettings, rng: np.random.Generator,
                   index: int = 0, basis_bias: float = 0.5) -> PulseRecord:
    """Draw one pulse: intensity class, Poisson photon number, basis, bit.

    ``basis_bias`` is the probability of preparing in ``B0``.
    """
    cls = IntensityClass(int(rng.choice(3, p=settings.probabilities)))
    mean = settings.mean(cls)
    n = int(rng.poisson(mean)) if mean > 0 else 0
    basis = Basis.B0 if rng.random() < basis_bias else Basis.B1
    bit = int(rng.integers(0, 2))
    return PulseRecord(index, cls, n, basis, bit)


def transmit(pulse: PulseRecord, link: LinkParams, eve: EveModel,
             rng: np.random.Generator) -> int:
    """Number of photons that reach the receiver's detectors."""
    n = pulse.photon_number
    t = fiber_transmittance(link)
    if n == 0:
        return 0
    if eve.active:
        if n >= 2:
            if eve.block_multi_prob and rng.random() < eve.block_multi_prob:
                return 0
            if eve.forward_lossless:
                return n - 1
            return int(rng.binomial(n - 1, t))
        if rng.random() < eve.block_single_prob:
            return 0
    return int(rng.binomial(n, t))


def detect(survivors: int, pulse: PulseRecord, receiver_basis: Basis,
           link: LinkParams, rng: np.random.Generator) -> DetectionOutcome:
    """Two gated threshold detectors with dark counts, misalignment and squashing."""
    detected = int(rng.binomial(survivors, link.detector_efficiency)) if survivors else 0
    photon = [False, False]
    if detected:
        if receiver_basis == pulse.basis:
            target = pulse.bit
            if rng.random() < link.misalignment_error:
                target ^= 1
            photon[target] = True
        else:
            c0 = int(rng.binomial(detected, 0.5))
            photon[0] = c0 > 0
            photon[1] = detected - c0 > 0
    dark = [rng.random() < link.dark_count_prob, rng.random() < link.dark_count_prob]
    clicks = [photon[0] or dark[0], photon[1] or dark[1]]
    if clicks[0] and clicks[1]:
        return DetectionOutcome(pulse.index, True, int(rng.integers(0, 2)),
                                receiver_basis, ClickSource.DOUBLE_CLICK)
    if clicks[0] or clicks[1]:
        d = 0 if clicks[0] else 1
        src = ClickSource.PHOTON if photon[d] else ClickSource.DARK_COUNT
        return DetectionOutcome(pulse.index, True, d, receiver_basis, src)
    return DetectionOutcome(pulse.index, False, None, receiver_basis, ClickSource.NONE)


# ---------------------------------------------------------------------------
# batch exchange


@dataclass
class Transcript:
    """Column-oriented record of one exchange.

    ``measured_bit`` is -1 where there was no click.
    """

    settings: IntensitySettings
    link: LinkParams
    eve: EveModel
    seed: int
    intensity_class: np.ndarray
    photon_number: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    survivors: np.ndarray
    receiver_basis: np.ndarray
    clicked: np.ndarray
    measured_bit: np.ndarray
    click_source: np.ndarray

    def __len__(self) -> int:
        return len(self.intensity_class)

    def pulses(self) -> Iterator[PulseRecord]:
        for i in range(len(self)):
            yield PulseRecord(i, IntensityClass(int(self.intensity_class[i])),
                              int(self.photon_number[i]), Basis(int(self.basis[i])),
                              int(self.bit[i]))

    def outcomes(self) -> Iterator[DetectionOutcome]:
        for i in range(len(self)):
            c = bool(self.clicked[i])
            yield DetectionOutcome(i, c, int(self.measured_bit[i]) if c else None,
                                   Basis(int(self.receiver_basis[i])),
                                   ClickSource(int(self.click_source[i])))

    # ground truth -----------------------------------------------------

    def true_yield(self, photon_number: int) -> float:
        mask = self.photon_number == photon_number
        total = int(mask.sum())
        return float(self.clicked[mask].sum()) / total if total else float("nan")

    def true_single_photon_gain(self, cls: IntensityClass = IntensityClass.SIGNAL) -> tuple[float, float]:
        """Q1 for ``cls`` from the ledger, with its binomial standard error."""
        in_cls = self.intensity_class == cls
        sent = int(in_cls.sum())
        hits = int((in_cls & (self.photon_number == 1) & self.clicked).sum())
        q1 = hits / sent
        return q1, math.sqrt(max(q1 * (1 - q1), 1.0 / sent) / sent)

    def true_single_photon_error(self, cls: IntensityClass = IntensityClass.SIGNAL) -> tuple[float, float]:
        """e1 for ``cls`` over sifted single-photon clicks, with standard error."""
        sel = ((self.intensity_class == cls) & (self.photon_number == 1) & self.clicked
               & (self.basis == self.receiver_basis))
        n = int(sel.sum())
        if n == 0:
            return float("nan"), float("inf")
        err = int((self.measured_bit[sel] != self.bit[sel]).sum())
        e1 = err / n
        return e1, math.sqrt(max(e1 * (1 - e1), 1.0 / n) / n)

    # export -----------------------------------------------------------

    def to_csv(self, path, overwrite: bool = False) -> Path:
        path = Path(path)
        if path.exists() and not overwrite:
            raise FileExistsError(path)
        names = [c.name for c in IntensityClass]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "class", "photon_number", "basis", "bit",
                        "clicked", "receiver_basis", "measured_bit"])
            for i in range(len(self)):
                mb = int(self.measured_bit[i])
                w.writerow([i, names[self.intensity_class[i]], int(self.photon_number[i]),
                            int(self.basis[i]), int(self.bit[i]), int(self.clicked[i]),
                            int(self.receiver_basis[i]), "" if mb < 0 else mb])
        return path


def run_exchange(n_pulses: int, link: LinkParams, settings: IntensitySettings,
                 eve: EveModel = NO_EVE, seed: int = 0,
                 basis_bias: float = 0.5) -> Transcript:
    """Simulate ``n_pulses`` pulses; bit-identical for identical arguments."""
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(n_pulses)

    cls = np.searchsorted(np.cumsum(settings.probabilities)[:-1], rng.random(n),
                          side="right").astype(np.int8)
    means = np.array([settings.mu, settings.nu, 0.0])
    photons = rng.poisson(means[cls]).astype(np.int32)
    basis = (rng.random(n) >= basis_bias).astype(np.int8)
    bit = rng.integers(0, 2, n, dtype=np.int8)
    rbasis = (rng.random(n) >= basis_bias).astype(np.int8)

    survivors = _transit(photons, link, eve, rng)

    detected = np.zeros(n, dtype=np.int32)
    idx = np.flatnonzero(survivors)
    detected[idx] = rng.binomial(survivors[idx], link.detector_efficiency)

    photon0 = np.zeros(n, dtype=bool)
    photon1 = np.zeros(n, dtype=bool)
    hit = np.flatnonzero(detected)
    matched = basis[hit] == rbasis[hit]
    flips = rng.random(hit.size) < link.misalignment_error
    target = (bit[hit] ^ flips).astype(bool)
    mh = hit[matched]
    photon1[mh] = target[matched]
    photon0[mh] = ~target[matched]
    xh = hit[~matched]
    c0 = rng.binomial(detected[xh], 0.5)
    photon0[xh] = c0 > 0
    photon1[xh] = detected[xh] - c0 > 0

    d = link.dark_count_prob
    click0 = photon0 | (rng.random(n) < d)
    click1 = photon1 | (rng.random(n) < d)
    clicked = click0 | click1
    double = click0 & click1
    coin = rng.integers(0, 2, n, dtype=np.int8)
    measured = np.where(double, coin, np.where(click1, 1, np.where(click0, 0, -1))).astype(np.int8)

    source = np.zeros(n, dtype=np.int8)
    single1 = click1 & ~click0
    single0 = click0 & ~click1
    from_photon = (single1 & photon1) | (single0 & photon0)
    source[clicked] = ClickSource.DARK_COUNT
    source[from_photon] = ClickSource.PHOTON
    source[double] = ClickSource.DOUBLE_CLICK

    return Transcript(settings, link, eve, seed, cls, photons, basis, bit, survivors,
                      rbasis, clicked, measured, source)


def _transit(photons: np.ndarray, link: LinkParams, eve: EveModel,
             rng: np.random.Generator) -> np.ndarray:
    t = fiber_transmittance(link)
    out = np.zeros_like(photons)
    if not eve.active:
        idx = np.flatnonzero(photons)
        out[idx] = rng.binomial(photons[idx], t)
        return out
    multi = np.flatnonzero(photons >= 2)
    if eve.block_multi_prob:
        multi = multi[rng.random(multi.size) >= eve.block_multi_prob]
    if eve.forward_lossless:
        out[multi] = photons[multi] - 1
    else:
        out[multi] = rng.binomial(photons[multi] - 1, t)
    single = np.flatnonzero(photons == 1)
    passed = single[rng.random(single.size) >= eve.block_single_prob]
    out[passed] = rng.binomial(1, t, passed.size)
    return out


# ---------------------------------------------------------------------------
# analytic helpers for the simulator's own statistics


def simulated_gain(link: LinkParams, intensity: float, eve: EveModel = NO_EVE,
                   n_max: int = 60) -> float:
    """Exact click probability of the simulator for a Poisson(intensity) pulse."""
    y0 = background_yield(link.dark_count_prob)
    if not eve.active:
        return 1.0 - (1.0 - y0) * math.exp(-channel_transmittance(link) * intensity)
    p_photon = _pns_photon_click(link, intensity, eve, n_max)
    return 1.0 - (1.0 - y0) * (1.0 - p_photon)


def _pns_photon_click(link, intensity, eve, n_max, block=None, block_multi=None):
    eff = link.detector_efficiency
    t = fiber_transmittance(link)
    b = eve.block_single_prob if block is None else block
    keep_multi = 1.0 - (eve.block_multi_prob if block_multi is None else block_multi)
    if intensity == 0:
        return 0.0
    total = 0.0
    log_mu = math.log(intensity)
    for k in range(1, n_max):
        p = math.exp(-intensity + k * log_mu - math.lgamma(k + 1))
        if k == 1:
            total += p * (1 - b) * t * eff
        elif eve.forward_lossless:
            total += keep_multi * p * (1 - (1 - eff) ** (k - 1))
        else:
            total += keep_multi * p * (1 - (1 - t * eff) ** (k - 1))
    return total


def tune_pns_block_prob(link: LinkParams, settings: IntensitySettings,
                        forward_lossless: bool = True) -> EveModel:
    """PNS attacker whose blocking keeps the signal-class gain unchanged.

    Single-photon pulses are blocked first; if forwarding every multi-photon
    pulse still exceeds the honest gain, a fraction of those is dropped too.
    Returns a no-blocking attacker when even that undershoots.
    """
    eve0 = EveModel("pns", 0.0, forward_lossless)
    target = 1.0 - math.exp(-channel_transmittance(link) * settings.mu)
    multi = _pns_photon_click(link, settings.mu, eve0, 60, block=1.0, block_multi=0.0)
    full = _pns_photon_click(link, settings.mu, eve0, 60, block=0.0, block_multi=0.0)
    if multi >= target:
        return EveModel("pns", 1.0, forward_lossless, 1.0 - target / multi if multi else 0.0)
    single = full - multi
    block = 1.0 if single <= 0 else 1.0 - (target - multi) / single
    return EveModel("pns", min(1.0, max(0.0, block)), forward_lossless)
